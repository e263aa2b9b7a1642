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

// End-to-end pipeline steps shared by the command-line tool and the
// acceptance runner. Everything here is a thin composition of the library.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ctta/ablation.hpp"
#include "ctta/archive.hpp"
#include "ctta/config.hpp"

namespace ctta {

struct ArtifactPaths {
  std::filesystem::path dir;
  std::filesystem::path checkpoint() const { return dir / "source.ckpt"; }
  std::filesystem::path stats() const { return dir / "source.stats"; }
  std::filesystem::path adapted() const { return dir / "adapted.ckpt"; }
};

/// Throws one error naming every missing file.
inline void require_files(const std::vector<std::filesystem::path>& paths) {
  std::string missing;
  for (const auto& p : paths)
    if (!std::filesystem::exists(p)) missing += "\n  " + p.string();
  if (!missing.empty()) throw InvalidInput("missing required artifacts:" + missing);
}

inline Dataset source_dataset(const ExperimentConfig& cfg) { return generate_source(cfg.scene, cfg.source_images); }

inline NetworkState pretrain_from_config(const ExperimentConfig& cfg, PretrainReport* report = nullptr) {
  return pretrain_source(cfg.network, source_dataset(cfg), cfg.pretrain, report);
}

inline SourceStats stats_from_config(const NetworkState& st, const ExperimentConfig& cfg) {
  return collect_source_stats(st, source_dataset(cfg), cfg.stats);
}

/// Run metadata; deliberately free of timestamps and paths so identical
/// runs write identical logs.
inline std::vector<std::pair<std::string, std::string>> run_metadata(const ExperimentConfig& cfg,
                                                                     const NetworkState& source, bool dry_run) {
  return {{"code_version", kCodeVersion},
          {"config_hash", hex64(config_hash(cfg))},
          {"profile", cfg.profile},
          {"mode", dry_run ? "direct-test" : "adapt"},
          {"scene_seed", std::to_string(cfg.scene.seed)},
          {"pretrain_seed", std::to_string(cfg.pretrain.seed)},
          {"stream_seed", std::to_string(cfg.stream.seed)},
          {"prune_seed", std::to_string(cfg.adapt.prune.seed)},
          {"source_checksum", hex64(gamma_checksum(source))}};
}

struct RunFiles {
  std::filesystem::path batches, rounds, summary_csv, summary_txt, checkpoint;
};

inline RunFiles run_files(const std::filesystem::path& dir, bool dry_run) {
  const std::string p = dry_run ? "direct_" : "";
  return {dir / (p + "metrics.csv"), dir / (p + "rounds.csv"), dir / (p + "summary.csv"), dir / (p + "summary.txt"),
          dry_run ? std::filesystem::path{} : dir / "adapted.ckpt"};
}

/// Streams the configured target domains through the model, writing the
/// batch log, round log, summary table and (unless dry) final checkpoint.
inline ContinualResult run_experiment(const ExperimentConfig& cfg, const NetworkState& source,
                                      const SourceStats& stats, const std::filesystem::path& out_dir, bool dry_run) {
  std::filesystem::create_directories(out_dir);
  const RunFiles files = run_files(out_dir, dry_run);
  const auto meta = run_metadata(cfg, source, dry_run);
  CsvLog batches(files.batches.string(), meta, batch_log_columns());
  CsvLog rounds(files.rounds.string(), meta, round_log_columns());
  const auto domains = make_target_stream(cfg.scene, cfg.stream);
  ContinualResult res = run_continual(source, stats, domains, cfg.stream, cfg.adapt, dry_run, {&batches, &rounds});
  write_file(files.summary_csv.string(), summary_csv(res.summary));
  write_file(files.summary_txt.string(), summary_text(res.summary));
  if (!dry_run) save_checkpoint(files.checkpoint.string(), res.final_state);
  return res;
}

/// Clean held-out images (in-domain) and the same scenes under the
/// configured corruption (cross-domain).
inline std::pair<Dataset, Dataset> ablation_sets(const ExperimentConfig& cfg) {
  const AblationConfig& a = cfg.ablation;
  Dataset in = generate_source(cfg.scene, a.in_images, a.first_index);
  Dataset cross = generate_source(cfg.scene, a.cross_images, a.first_index + a.in_images);
  for (std::size_t i = 0; i < cross.size(); ++i)
    cross[i].image = corrupt(cross[i].image, a.cross.kind, a.cross.severity, mix_seed(cfg.stream.seed, 7'000'000 + i));
  return {std::move(in), std::move(cross)};
}

}  // namespace ctta
