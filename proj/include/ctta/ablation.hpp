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

// Single-channel ablation of a frozen source model: remove one considered
// channel at a time and measure the relative mAP change on an in-domain
// and a cross-domain set.

#pragma once

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ctta/evaluation.hpp"
#include "ctta/metrics_log.hpp"

namespace ctta {

struct AblationRow {
  std::string layer;
  std::size_t channel = 0;
  double gamma0 = 0.0;
  double in_map = 0.0, cross_map = 0.0;
  double delta_in = 0.0, delta_cross = 0.0;  // percent change vs the baseline
};

struct AblationQuadrants {
  std::size_t sensitive = 0;   // removal helps cross-domain, hurts in-domain
  std::size_t harmful = 0;     // removal helps both
  std::size_t useful = 0;      // removal hurts both
  std::size_t in_only = 0;     // removal helps in-domain, hurts cross-domain
  std::size_t neutral = 0;     // at least one delta is exactly zero
};

struct AblationResult {
  double base_in = 0.0, base_cross = 0.0;
  std::vector<AblationRow> rows;
  AblationQuadrants quadrants;
};

inline double percent_change(double value, double base) {
  return base > 0.0 ? 100.0 * (value - base) / base : 0.0;
}

inline AblationQuadrants count_quadrants(const std::vector<AblationRow>& rows) {
  AblationQuadrants q;
  for (const auto& r : rows) {
    if (r.delta_in == 0.0 || r.delta_cross == 0.0) {
      ++q.neutral;
    } else if (r.delta_cross > 0 && r.delta_in < 0) {
      ++q.sensitive;
    } else if (r.delta_cross > 0) {
      ++q.harmful;
    } else if (r.delta_in < 0) {
      ++q.useful;
    } else {
      ++q.in_only;
    }
  }
  return q;
}

/// The baseline (nothing masked) is evaluated once and reused for every
/// delta. `progress` is called after each channel with (done, total).
inline AblationResult channel_ablation_study(const NetworkState& st, const Dataset& in_domain,
                                             const Dataset& cross_domain, std::size_t batch_size = 8,
                                             const std::function<void(std::size_t, std::size_t)>& progress = {}) {
  if (in_domain.empty() || cross_domain.empty()) throw InvalidInput("ablation needs non-empty evaluation sets");
  const ChannelMask all = ChannelMask::all_alive(st.spec);
  AblationResult res;
  res.base_in = evaluate_dataset(st, in_domain, all, batch_size).map;
  res.base_cross = evaluate_dataset(st, cross_domain, all, batch_size).map;
  const std::size_t total = all.total();
  for (const auto& lm : all.layers) {
    const auto g = st.gamma(lm.layer);
    for (std::size_t c = 0; c < lm.alive.size(); ++c) {
      ChannelMask m = all;
      (*m.find(lm.layer))[c] = 0;
      AblationRow row{lm.layer, c, g[c]};
      row.in_map = evaluate_dataset(st, in_domain, m, batch_size).map;
      row.cross_map = evaluate_dataset(st, cross_domain, m, batch_size).map;
      row.delta_in = percent_change(row.in_map, res.base_in);
      row.delta_cross = percent_change(row.cross_map, res.base_cross);
      res.rows.push_back(std::move(row));
      if (progress) progress(res.rows.size(), total);
    }
  }
  res.quadrants = count_quadrants(res.rows);
  return res;
}

/// Scatter data; the first data row is the unmasked baseline (channel -1).
inline std::string ablation_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "layer,channel,gamma0,in_map,cross_map,delta_in_pct,delta_cross_pct\n";
  os << "baseline,-1,0," << fmt_double(r.base_in) << ',' << fmt_double(r.base_cross) << ",0,0\n";
  for (const auto& row : r.rows)
    os << row.layer << ',' << row.channel << ',' << fmt_double(row.gamma0) << ',' << fmt_double(row.in_map) << ','
       << fmt_double(row.cross_map) << ',' << fmt_double(row.delta_in) << ',' << fmt_double(row.delta_cross) << '\n';
  return os.str();
}

inline std::string quadrant_report(const AblationQuadrants& q) {
  std::ostringstream os;
  os << "removal helps cross-domain, hurts in-domain: " << q.sensitive << '\n'
     << "removal helps both:                           " << q.harmful << '\n'
     << "removal hurts both:                           " << q.useful << '\n'
     << "removal helps in-domain, hurts cross-domain:  " << q.in_only << '\n'
     << "no change on at least one set:                " << q.neutral << '\n';
  return os.str();
}

}  // namespace ctta
