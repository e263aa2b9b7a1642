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

// Continual test-time protocol: a fixed group of corrupted target domains
// visited for several rounds, one online adaptation step per batch, with
// every image scored by the forward pass it takes part in.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ctta/adaptation.hpp"
#include "ctta/corrupt.hpp"
#include "ctta/evaluation.hpp"
#include "ctta/flops.hpp"
#include "ctta/metrics_log.hpp"
#include "ctta/scene.hpp"

namespace ctta {

struct ConditionSpec {
  Corruption kind = Corruption::motion;
  int severity = 3;
};

struct StreamConfig {
  std::vector<ConditionSpec> conditions{
      {Corruption::motion, 3}, {Corruption::noise, 3}, {Corruption::defocus, 3}, {Corruption::contrast, 3}};
  std::size_t rounds = 10;
  std::size_t batch_size = 4;
  std::size_t images_per_condition = 100;
  std::uint64_t seed = 11;               // corruption noise and per-domain image order
  std::size_t first_index = 1'000'000;  // scene indices, disjoint from the source split

  void validate() const {
    if (conditions.empty()) throw InvalidInput("stream needs at least one condition");
    for (const auto& c : conditions)
      if (c.severity < 1 || c.severity > 5) throw InvalidInput("corruption severity must lie in 1..5");
    if (rounds == 0) throw InvalidInput("rounds must be >= 1");
    if (batch_size == 0) throw InvalidInput("batch size must be >= 1");
    if (images_per_condition == 0) throw InvalidInput("images per condition must be >= 1");
  }
};

struct TargetDomain {
  std::string name;
  ConditionSpec condition;
  Dataset data;
};

inline std::string condition_name(const ConditionSpec& c) { return concat(to_string(c.kind), '-', c.severity); }

/// Every domain corrupts the same clean image group; each domain's image
/// order is shuffled once and then fixed for all rounds.
inline std::vector<TargetDomain> make_target_stream(const SceneSpec& scene, const StreamConfig& cfg) {
  cfg.validate();
  const Dataset clean = generate_source(scene, cfg.images_per_condition, cfg.first_index);
  std::vector<TargetDomain> out;
  for (std::size_t c = 0; c < cfg.conditions.size(); ++c) {
    const ConditionSpec& cond = cfg.conditions[c];
    std::vector<std::size_t> order(clean.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(cfg.seed, c));
    std::shuffle(order.begin(), order.end(), rng);
    TargetDomain d{condition_name(cond), cond, {}};
    for (std::size_t i : order) {
      Sample s = clean[i];
      s.image = corrupt(s.image, cond.kind, cond.severity, mix_seed(cfg.seed ^ 0x5eedull, c * 1'000'003 + i));
      d.data.push_back(std::move(s));
    }
    out.push_back(std::move(d));
  }
  return out;
}

// --- summary -------------------------------------------------------------------

struct RoundConditionResult {
  std::size_t round = 0, condition = 0;
  std::string name;
  MapResult map;
  std::size_t images = 0;
};

/// Per-round, per-condition mAP@50 with row, column and grand averages.
struct SummaryTable {
  std::vector<std::string> conditions;
  std::vector<std::vector<double>> map;  // [round][condition]
  std::vector<double> round_avg, condition_avg;
  double overall = 0.0;
  LedgerTotals flops;
};

inline SummaryTable summarize(const std::vector<std::string>& conditions, const std::vector<std::vector<double>>& map,
                              LedgerTotals flops) {
  SummaryTable t;
  t.conditions = conditions;
  t.map = map;
  t.flops = flops;
  const std::size_t R = map.size(), C = conditions.size();
  if (R == 0 || C == 0) throw InvalidInput("summary needs at least one round and condition");
  double all = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    if (map[r].size() != C) throw InvalidInput("summary: ragged table");
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += map[r][c];
    t.round_avg.push_back(s / static_cast<double>(C));
  }
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < R; ++r) s += map[r][c];
    t.condition_avg.push_back(s / static_cast<double>(R));
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) all += map[r][c];
  t.overall = all / static_cast<double>(R * C);
  return t;
}

inline SummaryTable summarize(const std::vector<RoundConditionResult>& results, std::size_t conditions,
                              LedgerTotals flops) {
  std::size_t rounds = 0;
  for (const auto& r : results) rounds = std::max(rounds, r.round + 1);
  std::vector<std::string> names(conditions);
  std::vector<std::vector<double>> map(rounds, std::vector<double>(conditions, 0.0));
  for (const auto& r : results) {
    names.at(r.condition) = r.name;
    map.at(r.round).at(r.condition) = r.map.map;
  }
  return summarize(names, map, flops);
}

/// Machine-readable table: one row per round plus an average row; mAP
/// values are fractions written at full precision.
inline std::string summary_csv(const SummaryTable& t) {
  std::ostringstream os;
  os << "round";
  for (const auto& c : t.conditions) os << ',' << c;
  os << ",avg\n";
  for (std::size_t r = 0; r < t.map.size(); ++r) {
    os << r + 1;
    for (double v : t.map[r]) os << ',' << fmt_double(v);
    os << ',' << fmt_double(t.round_avg[r]) << '\n';
  }
  os << "avg";
  for (double v : t.condition_avg) os << ',' << fmt_double(v);
  os << ',' << fmt_double(t.overall) << '\n';
  os << "# flops_fwd=" << t.flops.fwd << " flops_bwd=" << t.flops.bwd << " flops_total=" << t.flops.total() << '\n';
  return os.str();
}

/// Aligned text rendering, mAP@50 in percent.
inline std::string summary_text(const SummaryTable& t) {
  std::ostringstream os;
  char buf[64];
  os << "round ";
  for (const auto& c : t.conditions) {
    std::snprintf(buf, sizeof(buf), " %12s", c.c_str());
    os << buf;
  }
  os << "          avg\n";
  auto row = [&](const std::string& label, const std::vector<double>& v, double avg) {
    std::snprintf(buf, sizeof(buf), "%-6s", label.c_str());
    os << buf;
    for (double x : v) {
      std::snprintf(buf, sizeof(buf), " %12.2f", 100.0 * x);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), " %12.2f\n", 100.0 * avg);
    os << buf;
  };
  for (std::size_t r = 0; r < t.map.size(); ++r) row(std::to_string(r + 1), t.map[r], t.round_avg[r]);
  row("avg", t.condition_avg, t.overall);
  std::snprintf(buf, sizeof(buf), "%.4f", static_cast<double>(t.flops.fwd) * 1e-9);
  os << "FLOPs (G, 1 MAC = 1 FLOP): fwd " << buf;
  std::snprintf(buf, sizeof(buf), "%.4f", static_cast<double>(t.flops.bwd) * 1e-9);
  os << "  bwd " << buf;
  std::snprintf(buf, sizeof(buf), "%.4f", static_cast<double>(t.flops.total()) * 1e-9);
  os << "  total " << buf << '\n';
  return os.str();
}

// --- the continual run ------------------------------------------------------------

inline std::uint64_t gamma_checksum(const NetworkState& st) {
  std::uint64_t h = fnv1a("");
  for (const auto& name : st.spec.considered_bn())
    for (double v : st.gamma(name)) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
  return h;
}

inline std::vector<std::string> batch_log_columns() {
  return {"round",  "condition", "batch", "images", "gt",     "detections", "batch_map", "rho",
          "l_img",  "l_ins",     "l_wreg", "l_total", "branch", "reactivated", "skipped",  "fwd_flops",
          "bwd_flops", "state_checksum", "mask"};
}

inline std::vector<std::string> round_log_columns() {
  return {"round", "condition", "name", "images", "gt", "map", "ap"};
}

struct RunLogs {
  CsvLog* batches = nullptr;
  CsvLog* rounds = nullptr;
};

struct ContinualResult {
  std::vector<RoundConditionResult> maps;
  std::vector<BatchTelemetry> telemetry;
  std::vector<double> rho;  // per batch, as used in its forward pass
  FlopsLedger ledger;
  SummaryTable summary;
  NetworkState final_state;
  std::size_t steps = 0, skipped = 0;
};

/// Runs rounds x domains x batches. With `dry_run` the frozen source model
/// only predicts (no pruning, no backward pass).
inline ContinualResult run_continual(NetworkState st, const SourceStats& stats,
                                     const std::vector<TargetDomain>& domains, const StreamConfig& cfg,
                                     const AdaptConfig& acfg, bool dry_run = false, RunLogs logs = {}) {
  cfg.validate();
  acfg.validate();
  if (domains.empty()) throw InvalidInput("run_continual: no target domains");
  check_layout(stats, st.spec);
  const std::size_t K = head_of(st.spec).num_classes;
  AdaptState adapt = init_adapt_state(stats, acfg);
  ContinualResult res;
  const ChannelMask all_alive = ChannelMask::all_alive(st.spec);
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    for (std::size_t c = 0; c < domains.size(); ++c) {
      const Dataset& data = domains[c].data;
      std::vector<ImageDetections> dets;
      std::vector<std::vector<GroundTruth>> truth;
      std::size_t b = 0;
      for (std::size_t begin = 0; begin < data.size(); begin += cfg.batch_size, ++b) {
        const std::size_t end = std::min(data.size(), begin + cfg.batch_size);
        const Tensor4 batch = stack_images(data, begin, end);
        const std::uint64_t checksum = gamma_checksum(st);
        BatchTelemetry tel{r, domains[c].name, b, end - begin, all_alive, false};
        std::vector<ImageDetections> bd;
        LossReport loss;
        double rho = 0.0;
        std::size_t reactivated = 0;
        bool skipped = false;
        LedgerTotals cost;
        if (dry_run) {
          bd = infer(st, batch, all_alive).detections;
          cost = batch_cost(st.spec, all_alive, false, end - begin);
        } else {
          AdaptStepResult step = adapt_batch(st, adapt, stats, batch, acfg);
          bd = std::move(step.detections);
          loss = step.loss;
          rho = step.rho;
          reactivated = step.reactivation.reactivated.size();
          skipped = step.skipped;
          cost = step.flops;
          tel.mask = step.mask;
          tel.backward = !skipped;
          if (skipped) {
            cost = batch_cost(st.spec, step.mask, false, end - begin);
            ++res.skipped;
          } else {
            ++res.steps;
          }
        }
        std::vector<std::vector<GroundTruth>> bt;
        std::size_t gt = 0, nd = 0;
        for (std::size_t i = begin; i < end; ++i) {
          bt.push_back(data[i].objects);
          gt += data[i].objects.size();
        }
        for (const auto& d : bd) nd += d.size();
        const double batch_map = evaluate_map50(bd, bt, K).map;
        if (logs.batches) {
          const char* branch = dry_run ? "frozen" : (loss.sparsity_branch ? "sparse" : "adapt");
          logs.batches->append({std::to_string(r + 1), domains[c].name, std::to_string(b + 1),
                                std::to_string(end - begin), std::to_string(gt), std::to_string(nd),
                                fmt_double(batch_map), fmt_double(rho), fmt_double(loss.l_img),
                                fmt_double(loss.l_ins), fmt_double(loss.l_wreg), fmt_double(loss.l_total), branch,
                                std::to_string(reactivated), skipped ? "1" : "0", std::to_string(cost.fwd),
                                std::to_string(cost.bwd), hex64(checksum), encode_mask(tel.mask)});
        }
        res.rho.push_back(rho);
        res.telemetry.push_back(std::move(tel));
        for (auto& d : bd) dets.push_back(std::move(d));
        for (auto& t : bt) truth.push_back(std::move(t));
      }
      RoundConditionResult rc{r, c, domains[c].name, evaluate_map50(dets, truth, K), data.size()};
      if (logs.rounds) {
        std::string ap;
        for (std::size_t k = 0; k < rc.map.ap.size(); ++k) ap += (k ? ";" : "") + fmt_double(rc.map.ap[k]);
        std::size_t gt = 0;
        for (auto g : rc.map.gt_count) gt += g;
        logs.rounds->append({std::to_string(r + 1), std::to_string(c + 1), rc.name, std::to_string(rc.images),
                             std::to_string(gt), fmt_double(rc.map.map), ap});
      }
      log::info(concat("round ", r + 1, " ", rc.name, " mAP@50 ", rc.map.map,
                       dry_run ? "" : concat(" rho ", res.rho.back())));
      res.maps.push_back(std::move(rc));
    }
  }
  res.ledger = run_flops_ledger(st.spec, res.telemetry);
  res.summary = summarize(res.maps, domains.size(), res.ledger.overall);
  res.final_state = std::move(st);
  return res;
}

/// Rebuilds the summary table from the two logs of a run.
inline SummaryTable summary_from_logs(const CsvTable& rounds, const CsvTable& batches) {
  std::vector<RoundConditionResult> rows;
  std::size_t conditions = 0;
  for (std::size_t i = 0; i < rounds.rows.size(); ++i) {
    RoundConditionResult r;
    r.round = std::stoul(rounds.at(i, "round")) - 1;
    r.condition = std::stoul(rounds.at(i, "condition")) - 1;
    r.name = rounds.at(i, "name");
    r.map.map = std::stod(rounds.at(i, "map"));
    conditions = std::max(conditions, r.condition + 1);
    rows.push_back(std::move(r));
  }
  LedgerTotals flops;
  for (std::size_t i = 0; i < batches.rows.size(); ++i) {
    flops.fwd += std::stoull(batches.at(i, "fwd_flops"));
    flops.bwd += std::stoull(batches.at(i, "bwd_flops"));
  }
  return summarize(rows, conditions, flops);
}

}  // namespace ctta
