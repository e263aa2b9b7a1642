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

// Channel pruning driven by BN scales: mask derivation, pruning ratio,
// sensitivity-weighted sparsity, ratio-gated loss and stochastic
// reactivation of pruned channels.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctta/autodiff.hpp"
#include "ctta/detector.hpp"
#include "ctta/errors.hpp"
#include "ctta/optim.hpp"
#include "ctta/sensitivity.hpp"

namespace ctta {

struct PruneConfig {
  double t = 0.05;       // pruning threshold on |gamma|
  double p = 0.1;        // pruning ratio threshold
  double r = 0.01;       // reactivation probability
  double lambda = 0.05;  // sparsity weight
  std::uint64_t seed = 2024;

  /// t = 0 is accepted and disables pruning (every |gamma| >= 0).
  void validate() const {
    if (!(t >= 0.0)) throw InvalidInput("pruning threshold t must be >= 0");
    if (!(p > 0.0 && p < 1.0)) throw InvalidInput("pruning ratio threshold p must lie in (0, 1)");
    if (!(r >= 0.0 && r <= 1.0)) throw InvalidInput("reactivation probability r must lie in [0, 1]");
    if (!(lambda >= 0.0)) throw InvalidInput("lambda must be >= 0");
  }
};

/// alive = |gamma| >= t for every considered BN channel.
inline ChannelMask derive_mask(const NetworkState& st, double t) {
  if (!(t >= 0.0)) throw InvalidInput("pruning threshold t must be >= 0");
  ChannelMask m;
  for (const auto& name : st.spec.considered_bn()) {
    auto g = st.gamma(name);
    ChannelFlags alive(g.size());
    for (std::size_t c = 0; c < g.size(); ++c) alive[c] = std::abs(g[c]) >= t ? 1 : 0;
    m.layers.push_back({name, std::move(alive)});
  }
  return m;
}

inline double pruning_ratio(const ChannelMask& mask) {
  const std::size_t total = mask.total();
  if (total == 0) throw InvalidInput("pruning_ratio: empty mask");
  return static_cast<double>(mask.pruned()) / static_cast<double>(total);
}

/// sum over alive channels of |omega * gamma|. Gamma enters the tape as
/// trainable leaves, so its gradient merges with every other use by name.
inline Var weighted_sparsity_loss(Tape& tape, const NetworkState& st, const SensitivityWeights& omega,
                                  const ChannelMask& mask) {
  mask.check(st.spec);
  Var total;
  for (const auto& lm : mask.layers) {
    const LayerSensitivity* w = omega.find(lm.layer);
    if (!w) throw InvalidInput("sensitivity weights missing layer '" + lm.layer + "'");
    const std::string name = param_name(lm.layer, "gamma");
    Var g = tape.parameter(name, st.param(name), true);
    Var term = ad::weighted_abs_sum(tape, g, w->omega, lm.alive);
    total = total.valid() ? ad::add(tape, total, term) : term;
  }
  if (!total.valid()) throw InvalidInput("weighted_sparsity_loss: no considered layers");
  return total;
}

/// L_adp + lambda * L_wreg while rho < p, L_adp alone otherwise.
inline Var gated_total_loss(Tape& tape, Var l_adp, Var l_wreg, double rho, const PruneConfig& cfg) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidInput("pruning ratio must lie in [0, 1]");
  if (rho < cfg.p) return ad::add(tape, l_adp, ad::scale(tape, l_wreg, cfg.lambda));
  return l_adp;
}

struct ReactivationReport {
  std::vector<std::pair<std::string, std::size_t>> reactivated;  // (layer, channel)
  std::size_t draws = 0;
};

/// One Bernoulli(r) draw per pruned channel; a success restores gamma to its
/// source value and clears the channel's optimizer moments.
inline ReactivationReport stochastic_reactivation(NetworkState& st, const ChannelMask& mask, const PruneConfig& cfg,
                                                  std::mt19937_64& rng, Adam* opt = nullptr) {
  if (!(cfg.r >= 0.0 && cfg.r <= 1.0)) throw InvalidInput("reactivation probability r must lie in [0, 1]");
  ReactivationReport rep;
  std::bernoulli_distribution coin(cfg.r);
  for (const auto& lm : mask.layers) {
    const auto& g0 = st.source_gamma(lm.layer);
    auto g = st.gamma(lm.layer);
    for (std::size_t c = 0; c < lm.alive.size(); ++c) {
      if (lm.alive[c]) continue;
      ++rep.draws;
      if (!coin(rng)) continue;
      g[c] = g0[c];
      if (opt) opt->reset_moments(param_name(lm.layer, "gamma"), c);
      rep.reactivated.emplace_back(lm.layer, c);
    }
  }
  return rep;
}

}  // namespace ctta
