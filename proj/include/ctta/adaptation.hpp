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

// Online adaptation of BN scales: feature alignment against source
// statistics, class-frequency weighting, and the per-batch update loop.
//
// Both alignment terms are the closed-form KL divergence between Gaussians
// sharing the source diagonal covariance, 0.5 * sum (mu_s - mu_t)^2 / var_s,
// which is symmetric in its arguments. Target means are EMAs; only the
// current batch's share (weight 1 - m) carries gradient.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ctta/autodiff.hpp"
#include "ctta/detector.hpp"
#include "ctta/errors.hpp"
#include "ctta/flops.hpp"
#include "ctta/optim.hpp"
#include "ctta/pruning.hpp"
#include "ctta/sensitivity.hpp"
#include "ctta/source_stats.hpp"

namespace ctta {

struct AdaptConfig {
  PruneConfig prune;
  AdamConfig adam;                     // lr 0.005
  double ema_momentum = 0.9;
  double variance_floor = 1e-6;
  double background_threshold = 0.5;   // foreground RoI: background < this
  double confidence_floor = 0.5;       // minimum class confidence for L_ins rows
  double sensitivity_momentum = 0.0;   // 0 disables smoothing of omega
  bool verbose_sensitivity = false;    // compute omega every batch

  void validate() const {
    prune.validate();
    if (!(adam.lr > 0.0)) throw InvalidInput("learning rate must be > 0");
    if (!(ema_momentum >= 0.0 && ema_momentum < 1.0)) throw InvalidInput("EMA momentum must lie in [0, 1)");
    if (!(variance_floor > 0.0)) throw InvalidInput("variance floor must be > 0");
    if (!(background_threshold > 0.0 && background_threshold < 1.0))
      throw InvalidInput("background threshold must lie in (0, 1)");
    if (!(confidence_floor >= 0.0 && confidence_floor <= 1.0))
      throw InvalidInput("confidence floor must lie in [0, 1]");
    if (!(sensitivity_momentum >= 0.0 && sensitivity_momentum < 1.0))
      throw InvalidInput("sensitivity momentum must lie in [0, 1)");
  }
};

struct AdaptState {
  std::vector<double> mu_t;                          // image level
  std::map<std::size_t, std::vector<double>> mu_tk;  // classes in the source stats only
  std::map<std::size_t, std::uint64_t> counts;
  double momentum = 0.9;
  Adam optimizer;
  std::mt19937_64 rng;
  std::optional<SensitivitySmoother> smoother;
  std::size_t steps = 0;
  std::set<std::size_t> unknown_classes_reported;
  std::set<std::string> floors_reported;
};

/// Target means start at the source means, so the first batches measure
/// their own shift against an unbiased EMA.
inline AdaptState init_adapt_state(const SourceStats& stats, const AdaptConfig& cfg) {
  cfg.validate();
  AdaptState a;
  a.mu_t = stats.image_mean;
  for (const auto& [k, c] : stats.classes) {
    a.mu_tk[k] = c.mean;
    a.counts[k] = 0;
  }
  a.momentum = cfg.ema_momentum;
  a.optimizer = Adam(cfg.adam);
  a.rng.seed(cfg.prune.seed);
  if (cfg.sensitivity_momentum > 0.0) a.smoother.emplace(cfg.sensitivity_momentum);
  return a;
}

/// Entries below `floor` are clamped to it. The warning is issued once per
/// `what` when `reported` is given.
inline std::vector<double> floored_variance(const std::vector<double>& var, double floor, const std::string& what,
                                            std::set<std::string>* reported = nullptr) {
  std::vector<double> out(var);
  std::size_t clamped = 0;
  for (double& v : out)
    if (!(v >= floor)) {
      v = floor;
      ++clamped;
    }
  if (clamped > 0 && (!reported || reported->insert(what).second))
    log::warn(concat(what, ": ", clamped, " variance entries clamped to ", floor));
  return out;
}

/// 0.5 * sum (a - b)^2 / var. Plain-value form of the alignment divergence.
inline double gaussian_kl_shared(const std::vector<double>& a, const std::vector<double>& b,
                                 const std::vector<double>& var) {
  if (a.size() != b.size() || a.size() != var.size()) throw InvalidInput("gaussian_kl_shared: length mismatch");
  double acc = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) acc += 0.5 * (a[d] - b[d]) * (a[d] - b[d]) / var[d];
  return acc;
}

/// w_k = 1 / (count_k + 1), rescaled so the weights sum to the class count.
inline std::map<std::size_t, double> class_weights(const std::map<std::size_t, std::uint64_t>& counts) {
  std::map<std::size_t, double> w;
  double total = 0.0;
  for (const auto& [k, c] : counts) {
    w[k] = 1.0 / (static_cast<double>(c) + 1.0);
    total += w[k];
  }
  const double K = static_cast<double>(counts.size());
  for (auto& [k, v] : w) v = v * K / total;
  return w;
}

namespace detail {
inline Tensor4 column(const std::vector<double>& v) {
  Tensor4 t(Shape4{1, v.size(), 1, 1});
  for (std::size_t i = 0; i < v.size(); ++i) t.data()[i] = v[i];
  return t;
}
}  // namespace detail

/// EMA-updates `mu` with the mean of `rows` of x (R x D x 1 x 1) and
/// returns the differentiable updated mean.
inline Var ema_update(Tape& tape, Var x, const std::vector<std::size_t>& rows, std::vector<double>& mu,
                      double momentum) {
  Var mean = ad::rows_mean(tape, x, rows);
  if (tape.value(mean).size() != mu.size()) throw InvalidInput("ema_update: feature dimension mismatch");
  Tensor4 hist = detail::column(mu);
  hist.scale(momentum);
  Var updated = ad::affine(tape, mean, 1.0 - momentum, hist);
  const auto v = tape.value(updated).data();
  mu.assign(v.begin(), v.end());
  return updated;
}

/// Image-level alignment. `pooled` holds the per-image pooled features
/// (N x D x 1 x 1); mu_t is updated first, then compared with mu_s.
inline Var image_alignment_loss(Tape& tape, Var pooled, const SourceStats& stats, AdaptState& adapt,
                                double variance_floor = 1e-6) {
  const std::size_t n = tape.value(pooled).shape().n;
  if (n == 0) throw InvalidInput("image_alignment_loss: empty batch");
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  Var mu = ema_update(tape, pooled, rows, adapt.mu_t, adapt.momentum);
  return ad::half_mahalanobis(tape, mu, stats.image_mean,
                              floored_variance(stats.image_var, variance_floor, "image statistics", &adapt.floors_reported));
}

struct InstanceLoss {
  Var loss;  // invalid when no known class is present
  std::map<std::size_t, double> weights;
  std::map<std::size_t, double> terms;  // unweighted divergence per present class
};

/// Class-level alignment over RoI features grouped by predicted class.
/// `rows_by_class` indexes rows of `roi_pooled` (M x C x 1 x 1). Frequency
/// counts are updated before the weights are computed; classes absent from
/// the batch contribute nothing.
inline InstanceLoss instance_alignment_loss(Tape& tape, Var roi_pooled,
                                            const std::map<std::size_t, std::vector<std::size_t>>& rows_by_class,
                                            const SourceStats& stats, AdaptState& adapt,
                                            double variance_floor = 1e-6) {
  InstanceLoss out;
  std::map<std::size_t, const std::vector<std::size_t>*> present;
  for (const auto& [k, rows] : rows_by_class) {
    if (rows.empty()) continue;
    if (!stats.classes.count(k) || !adapt.mu_tk.count(k)) {
      if (adapt.unknown_classes_reported.insert(k).second)
        log::warn(concat("instance alignment: class ", k, " has no source statistics; ignored"));
      continue;
    }
    adapt.counts[k] += rows.size();
    present[k] = &rows;
  }
  out.weights = class_weights(adapt.counts);
  for (const auto& [k, rows] : present) {
    const ClassSourceStats& cs = stats.classes.at(k);
    Var mu = ema_update(tape, roi_pooled, *rows, adapt.mu_tk.at(k), adapt.momentum);
    Var term = ad::half_mahalanobis(tape, mu, cs.mean,
                                    floored_variance(cs.var, variance_floor, concat("class ", k, " statistics"),
                                                     &adapt.floors_reported));
    out.terms[k] = tape.value(term).item();
    Var weighted = ad::scale(tape, term, out.weights.at(k));
    out.loss = out.loss.valid() ? ad::add(tape, out.loss, weighted) : weighted;
  }
  return out;
}

struct LossReport {
  double l_img = 0.0, l_ins = 0.0, l_wreg = 0.0, l_total = 0.0;
  double lambda = 0.0;
  bool sparsity_branch = false;  // rho < p: sparsity term included
  std::map<std::size_t, double> class_weights;

  double l_adp() const { return l_img + l_ins; }
  friend bool operator==(const LossReport&, const LossReport&) = default;
};

struct AdaptStepResult {
  std::vector<ImageDetections> detections;
  LossReport loss;
  ChannelMask mask;  // mask used for this batch's forward pass
  double rho = 0.0;
  ReactivationReport reactivation;
  std::optional<SensitivityWeights> omega;
  LedgerTotals flops;
  bool skipped = false;  // non-finite loss; state rolled back
};

/// Pooled ReLU outputs on the tape, N x D x 1 x 1.
inline Var pooled_taps_var(Tape& tape, const BackboneTrace& tr) {
  std::vector<Var> parts;
  for (const auto& [name, v] : tr.taps) parts.push_back(ad::spatial_mean(tape, v));
  return ad::concat_channels(tape, parts);
}

/// Channel sensitivity for the current batch from values already on the tape.
inline SensitivityWeights batch_sensitivity(const Tape& tape, const DetectorTrace& tr, const SourceStats& stats,
                                            const NetworkSpec& spec, const std::vector<std::size_t>& fg_rows) {
  std::vector<std::pair<std::string, Tensor4>> feats;
  for (const auto& [name, v] : tr.backbone.bn_inputs) feats.emplace_back(name, tape.value(v));
  auto roi = layer_roi_features(feats, tr.rois, fg_rows, spec.input_size, stats.roi_size);
  return combine(image_sensitivity(feats, stats), instance_sensitivity(roi, stats));
}

/// One step of online adaptation: mask from current gamma, forward pass
/// (whose detections are the batch's predictions), ratio-gated loss,
/// reactivation when the ratio is reached, backward, and an optimizer step
/// on the channels that were alive in the forward pass.
inline AdaptStepResult adapt_batch(NetworkState& st, AdaptState& adapt, const SourceStats& stats,
                                   const Tensor4& batch, const AdaptConfig& cfg) {
  if (!st.has_source_gamma()) throw StateError("adapt_batch: source gamma snapshot missing");
  check_layout(stats, st.spec);
  const NetworkSpec& spec = st.spec;
  const HeadSpec& h = head_of(spec);

  AdaptStepResult res;
  res.mask = derive_mask(st, cfg.prune.t);
  res.rho = pruning_ratio(res.mask);
  res.loss.lambda = cfg.prune.lambda;
  res.loss.sparsity_branch = res.rho < cfg.prune.p;

  std::map<std::string, std::vector<double>> gamma_snapshot;
  for (const auto& name : spec.considered_bn()) {
    auto g = st.gamma(name);
    gamma_snapshot[name].assign(g.begin(), g.end());
  }
  const AdaptState adapt_snapshot = adapt;
  auto rollback = [&](const std::string& why) {
    for (const auto& [name, g] : gamma_snapshot) std::copy(g.begin(), g.end(), st.gamma(name).begin());
    adapt = adapt_snapshot;
    res.skipped = true;
    log::warn(concat("adaptation step ", adapt.steps, " skipped: ", why, "; state rolled back"));
  };

  Tape tape;
  DetectorTrace tr = detector_forward(tape, st, batch, res.mask, ParamMode::adaptation);
  res.detections = tr.detections;
  const std::size_t images = batch.shape().n;
  res.flops = batch_cost(spec, res.mask, true, images);

  Var l_img = image_alignment_loss(tape, pooled_taps_var(tape, tr.backbone), stats, adapt, cfg.variance_floor);
  Var l_adp = l_img;
  res.loss.l_img = tape.value(l_img).item();

  const std::vector<std::size_t> fg = select_foreground_rois(tr.rois, cfg.background_threshold, h.max_rois_per_batch);
  if (tr.head) {
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i : fg)
      if (tr.rois[i].confidence >= cfg.confidence_floor) by_class[tr.rois[i].label].push_back(i);
    const std::size_t c = tape.value(tr.backbone.output).shape().c;
    Var roi_pooled = ad::spatial_mean(tape, tr.head->roi.features);
    if (tape.value(roi_pooled).shape().c != c) throw InvalidInput("adapt_batch: RoI feature width mismatch");
    InstanceLoss ins = instance_alignment_loss(tape, roi_pooled, by_class, stats, adapt, cfg.variance_floor);
    res.loss.class_weights = ins.weights;
    if (ins.loss.valid()) {
      res.loss.l_ins = tape.value(ins.loss).item();
      l_adp = ad::add(tape, l_adp, ins.loss);
    }
  } else {
    res.loss.class_weights = class_weights(adapt.counts);
  }

  const bool need_omega = (res.loss.sparsity_branch && cfg.prune.lambda > 0.0) || cfg.verbose_sensitivity;
  if (need_omega) {
    SensitivityWeights w = batch_sensitivity(tape, tr, stats, spec, fg);
    res.omega = adapt.smoother ? adapt.smoother->update(w) : w;
  }

  Var total = l_adp;
  if (res.loss.sparsity_branch && cfg.prune.lambda > 0.0) {
    Var l_wreg = weighted_sparsity_loss(tape, st, *res.omega, res.mask);
    res.loss.l_wreg = tape.value(l_wreg).item();
    total = gated_total_loss(tape, l_adp, l_wreg, res.rho, cfg.prune);
  }
  res.loss.l_total = tape.value(total).item();

  if (!std::isfinite(res.loss.l_total) || !std::isfinite(res.loss.l_img) || !std::isfinite(res.loss.l_ins) ||
      !std::isfinite(res.loss.l_wreg)) {
    rollback("non-finite loss");
    return res;
  }

  if (!res.loss.sparsity_branch)
    res.reactivation = stochastic_reactivation(st, res.mask, cfg.prune, adapt.rng, &adapt.optimizer);

  ParamGrad grads = tape.backward(total);
  for (const auto& [name, g] : grads)
    for (double v : g.data())
      if (!std::isfinite(v)) {
        rollback("non-finite gradient in '" + name + "'");
        return res;
      }

  std::map<std::string, ChannelFlags> active;
  for (const auto& lm : res.mask.layers) active[param_name(lm.layer, "gamma")] = lm.alive;
  adapt.optimizer.step(st.params, grads, active);
  ++adapt.steps;
  return res;
}

}  // namespace ctta
