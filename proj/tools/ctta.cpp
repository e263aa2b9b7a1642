// Copyright 2026 The ctta-prune Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// ctta: command-line driver.
//
//   ctta pretrain        --config C --out DIR
//   ctta collect-stats   --config C --out DIR
//   ctta run             --config C --out DIR [--dry-run] [--rounds N]
//   ctta direct-test     --config C --out DIR
//   ctta ablate-channels --config C --out DIR
//   ctta flops-table     --config C [--mask HEX|FILE] [--backward]
//   ctta report          --out DIR [--direct]

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ctta/ctta.hpp"

namespace fs = std::filesystem;
using namespace ctta;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> rounds;
  std::string profile;
  std::string out = "out";
  std::string mask;
  bool dry_run = false;
  bool verbose_sensitivity = false;
  bool backward = false;
  bool direct = false;
  bool quiet = false;
  bool verbose = false;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? config_from_json(Json::object(), o.profile)
                                          : load_config(o.config, o.profile);
  if (o.seed) {
    cfg.pretrain.seed = *o.seed;
    cfg.adapt.prune.seed = *o.seed;
    cfg.stream.seed = *o.seed;
  }
  if (o.rounds) cfg.stream.rounds = *o.rounds;
  if (o.verbose_sensitivity) cfg.adapt.verbose_sensitivity = true;
  cfg.validate();
  return cfg;
}

void save_resolved(const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  write_file((dir / "config.resolved.json").string(), config_to_json(cfg).dump(2) + "\n");
}

int cmd_pretrain(const Options& o) {
  const ExperimentConfig cfg = resolve(o);
  const ArtifactPaths paths{o.out};
  save_resolved(cfg, paths.dir);
  PretrainReport rep;
  const NetworkState st = pretrain_from_config(cfg, &rep);
  save_checkpoint(paths.checkpoint().string(), st);
  std::cout << "checkpoint: " << paths.checkpoint().string() << " (" << rep.steps << " steps)\n";
  return 0;
}

int cmd_collect_stats(const Options& o) {
  const ExperimentConfig cfg = resolve(o);
  const ArtifactPaths paths{o.out};
  require_files({paths.checkpoint()});
  const NetworkState st = load_checkpoint(paths.checkpoint().string(), cfg.network);
  const SourceStats stats = stats_from_config(st, cfg);
  save_stats(paths.stats().string(), stats);
  std::cout << "source stats: " << paths.stats().string() << " (" << stats.images << " images)\n";
  return 0;
}

int cmd_run(const Options& o, bool dry_run) {
  const ExperimentConfig cfg = resolve(o);
  const ArtifactPaths paths{o.out};
  require_files({paths.checkpoint(), paths.stats()});
  const NetworkState st = load_checkpoint(paths.checkpoint().string(), cfg.network);
  const SourceStats stats = load_stats(paths.stats().string(), cfg.network);
  save_resolved(cfg, paths.dir);
  const ContinualResult res = run_experiment(cfg, st, stats, paths.dir, dry_run);
  std::cout << summary_text(res.summary);
  if (!dry_run) std::cout << "adaptation steps " << res.steps << ", skipped " << res.skipped << '\n';
  return 0;
}

int cmd_ablate(const Options& o) {
  const ExperimentConfig cfg = resolve(o);
  const ArtifactPaths paths{o.out};
  require_files({paths.checkpoint()});
  const NetworkState st = load_checkpoint(paths.checkpoint().string(), cfg.network);
  const auto [in, cross] = ablation_sets(cfg);
  const AblationResult res = channel_ablation_study(st, in, cross, cfg.ablation.batch_size,
                                                    [](std::size_t done, std::size_t total) {
                                                      if (done % 16 == 0 || done == total)
                                                        log::info(concat("ablation ", done, "/", total));
                                                    });
  write_file((paths.dir / "ablation.csv").string(), ablation_csv(res));
  std::cout << "baseline mAP@50 in-domain " << res.base_in << ", cross-domain " << res.base_cross << '\n'
            << quadrant_report(res.quadrants);
  return 0;
}

ChannelMask mask_from_option(const std::string& text, const NetworkSpec& spec) {
  if (text.empty()) return ChannelMask::all_alive(spec);
  std::string hex = text;
  if (fs::exists(text)) {
    std::ifstream in(text);
    std::getline(in, hex);
  }
  return decode_mask(hex, spec);
}

int cmd_flops_table(const Options& o) {
  const ExperimentConfig cfg = resolve(o);
  const ChannelMask mask = mask_from_option(o.mask, cfg.network);
  const FlopsReport r = flops_report(cfg.network, mask,
                                     o.backward ? trainable_layers(cfg.network, ParamMode::adaptation)
                                                : std::set<std::string>{});
  std::printf("%-10s %-8s %6s %6s %14s %14s %14s\n", "layer", "kind", "in", "out", "fwd", "bwd_prop", "bwd_param");
  for (const auto& l : r.layers)
    std::printf("%-10s %-8s %6zu %6zu %14llu %14llu %14llu\n", l.layer.c_str(), l.kind.c_str(), l.in_active,
                l.out_active, static_cast<unsigned long long>(l.fwd), static_cast<unsigned long long>(l.bwd_prop),
                static_cast<unsigned long long>(l.bwd_param));
  std::printf("%-10s %-8s %6s %6s %14llu %14llu %14llu\n", "total", "", "", "", static_cast<unsigned long long>(r.fwd),
              static_cast<unsigned long long>(r.bwd_prop), static_cast<unsigned long long>(r.bwd_param));
  std::printf("pruning ratio %.4f, per image, 1 MAC = 1 FLOP\n", pruning_ratio(mask));
  return 0;
}

int cmd_report(const Options& o) {
  const RunFiles files = run_files(o.out, o.direct);
  require_files({files.batches, files.rounds});
  const CsvTable batches = read_csv_log(files.batches.string());
  const CsvTable rounds = read_csv_log(files.rounds.string());
  for (const auto& [k, v] : batches.metadata) std::cout << k << ": " << v << '\n';
  std::cout << summary_text(summary_from_logs(rounds, batches));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sensitivity-guided channel pruning for continual test-time adaptive detection"};
  app.require_subcommand(1);
  Options o;
  auto common = [&o](CLI::App* c) {
    c->add_option("--config", o.config, "experiment config (JSON)");
    c->add_option("--profile", o.profile, "profile: ci or full")->check(CLI::IsMember({"ci", "full"}));
    c->add_option("--seed", o.seed, "override the pretrain, stream and pruning seeds");
    c->add_option("--out", o.out, "artifact and log directory");
    c->add_flag("-q,--quiet", o.quiet, "suppress warnings");
    c->add_flag("-v,--verbose", o.verbose, "progress messages");
  };
  auto* pretrain = app.add_subcommand("pretrain", "train the source detector");
  auto* collect = app.add_subcommand("collect-stats", "collect source feature statistics");
  auto* run = app.add_subcommand("run", "continual test-time adaptation over the target stream");
  auto* direct = app.add_subcommand("direct-test", "evaluate the frozen source model on the target stream");
  auto* ablate = app.add_subcommand("ablate-channels", "single-channel ablation sweep");
  auto* flops = app.add_subcommand("flops-table", "per-layer cost table for a mask");
  auto* report = app.add_subcommand("report", "summary table from run logs");
  for (auto* c : {pretrain, collect, run, direct, ablate, flops, report}) common(c);
  for (auto* c : {run, direct}) c->add_option("--rounds", o.rounds, "number of rounds");
  run->add_flag("--dry-run", o.dry_run, "predict only: no pruning, no updates");
  run->add_flag("--verbose-sensitivity", o.verbose_sensitivity, "compute sensitivity weights every batch");
  flops->add_option("--mask", o.mask, "mask as hex text or a file holding it (default: all alive)");
  flops->add_flag("--backward", o.backward, "include adaptation backward cost");
  report->add_flag("--direct", o.direct, "report the direct-test logs");
  CLI11_PARSE(app, argc, argv);

  log::level() = o.quiet ? log::Level::quiet : (o.verbose ? log::Level::info : log::Level::warn);
  try {
    if (*pretrain) return cmd_pretrain(o);
    if (*collect) return cmd_collect_stats(o);
    if (*run) return cmd_run(o, o.dry_run);
    if (*direct) return cmd_run(o, true);
    if (*ablate) return cmd_ablate(o);
    if (*flops) return cmd_flops_table(o);
    if (*report) return cmd_report(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
