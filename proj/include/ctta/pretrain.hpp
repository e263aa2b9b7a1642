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

// Source-domain training of the detector.
//
// BN layers train as fixed-statistics affines. Their running statistics are
// estimated from data before the first step and re-estimated after every
// epoch with a function-preserving update of gamma and beta, so the final
// statistics describe the source features the network actually produces.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ctta/autodiff.hpp"
#include "ctta/boxes.hpp"
#include "ctta/detector.hpp"
#include "ctta/errors.hpp"
#include "ctta/optim.hpp"
#include "ctta/scene.hpp"

namespace ctta {

struct PretrainConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 8;
  double lr = 0.002;
  double final_lr_fraction = 0.1;  // cosine decay floor
  double l1_gamma = 0.002;         // slimming penalty on considered gamma
  double box_weight = 5.0;
  double positive_weight = 4.0;  // objectness positives
  std::size_t calibration_images = 64;
  std::size_t jitter_per_object = 4;
  std::size_t random_rois_per_image = 4;
  std::size_t rois_per_image = 32;
  double max_grad_norm = 20.0;
  bool snap_to_float = true;
  std::uint64_t seed = 7;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

/// Rounds every parameter and running statistic to the nearest 32-bit float
/// so that archives reproduce the state exactly.
inline void snap_to_float(NetworkState& st) {
  auto snap = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  for (auto& [name, t] : st.params)
    for (double& v : t.data()) v = snap(v);
  for (auto& [name, s] : st.running) {
    for (double& v : s.mean) v = snap(v);
    for (double& v : s.var) v = snap(v);
  }
}

namespace detail {

struct ChannelMoments {
  std::vector<double> sum, sumsq;
  double count = 0;
  void add(const Tensor4& x) {
    const Shape4 s = x.shape();
    if (sum.empty()) {
      sum.assign(s.c, 0.0);
      sumsq.assign(s.c, 0.0);
    }
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (double v : x.plane(n, c)) {
          sum[c] += v;
          sumsq[c] += v * v;
        }
    count += static_cast<double>(s.n * s.plane());
  }
  BnStats stats() const {
    BnStats b;
    for (std::size_t c = 0; c < sum.size(); ++c) {
      const double m = sum[c] / count;
      b.mean.push_back(m);
      b.var.push_back(std::max(sumsq[c] / count - m * m, 0.0));
    }
    return b;
  }
};

/// Per-channel statistics of the input of every BN layer over `images`.
inline std::map<std::string, BnStats> bn_input_stats(const NetworkState& st, const Dataset& data,
                                                     std::size_t count, std::size_t chunk) {
  std::map<std::string, ChannelMoments> acc;
  const auto bns = st.spec.bn_layers();
  count = std::min(count, data.size());
  for (std::size_t b = 0; b < count; b += chunk) {
    Tape tape;
    Var in = tape.constant(stack_images(data, b, std::min(count, b + chunk)));
    BackboneTrace tr = backbone_forward(tape, st, in, ChannelMask{}, ParamMode::frozen);
    for (const auto& name : bns) acc[name].add(tape.value(tr.out.at(st.spec.layer(name).inputs.front())));
  }
  std::map<std::string, BnStats> out;
  for (auto& [name, m] : acc) out[name] = m.stats();
  return out;
}

}  // namespace detail

/// Sets running statistics from data, layer by layer in network order.
inline void initialize_bn_statistics(NetworkState& st, const Dataset& data, std::size_t count) {
  for (const auto& name : st.spec.bn_layers()) {
    auto stats = detail::bn_input_stats(st, data, count, 16);
    st.running[name] = stats.at(name);
  }
}

/// Re-estimates running statistics and folds the change into gamma and beta,
/// leaving the network function unchanged.
inline void recalibrate_bn(NetworkState& st, const Dataset& data, std::size_t count) {
  const auto fresh = detail::bn_input_stats(st, data, count, 16);
  const double eps = st.spec.bn_eps;
  for (const auto& name : st.spec.bn_layers()) {
    BnStats& old = st.running.at(name);
    const BnStats& now = fresh.at(name);
    auto g = st.param(param_name(name, "gamma")).data();
    auto b = st.param(param_name(name, "beta")).data();
    for (std::size_t c = 0; c < g.size(); ++c) {
      const double so = std::sqrt(old.var[c] + eps), sn = std::sqrt(now.var[c] + eps);
      b[c] += g[c] * (now.mean[c] - old.mean[c]) / so;
      g[c] *= sn / so;
    }
    old = now;
  }
}

namespace detail {

struct RoiTargets {
  std::vector<Proposal> boxes;
  std::vector<std::size_t> labels;  // K = background
  std::vector<BoxDelta> deltas;     // valid for foreground rows
};

inline Box jitter(const Box& b, std::mt19937_64& rng, double size) {
  std::uniform_real_distribution<double> u(-0.15, 0.15);
  const double w = b.width(), h = b.height();
  Box j{b.x0 + u(rng) * w, b.y0 + u(rng) * h, b.x1 + u(rng) * w, b.y1 + u(rng) * h};
  return clip(j, size, size);
}

inline RoiTargets sample_rois(const NetworkSpec& spec, const PretrainConfig& cfg, const Dataset& data,
                              std::size_t first, std::size_t count, const std::vector<Proposal>& proposals,
                              std::mt19937_64& rng) {
  const HeadSpec& h = *spec.head;
  const double size = static_cast<double>(spec.input_size);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  RoiTargets t;
  for (std::size_t n = 0; n < count; ++n) {
    const auto& objects = data[first + n].objects;
    std::vector<Box> cand;
    for (const auto& g : objects) {
      cand.push_back(g.box);
      for (std::size_t j = 0; j < cfg.jitter_per_object; ++j) cand.push_back(jitter(g.box, rng, size));
    }
    for (const auto& p : proposals)
      if (p.image == n) cand.push_back(p.box);
    for (std::size_t j = 0; j < cfg.random_rois_per_image; ++j) {
      const double w = 8 + 24 * u01(rng), hh = 8 + 24 * u01(rng);
      const double x = u01(rng) * (size - w), y = u01(rng) * (size - hh);
      cand.push_back({x, y, x + w, y + hh});
    }
    std::vector<std::size_t> fg, bg;
    std::vector<std::size_t> label(cand.size(), h.num_classes);
    std::vector<BoxDelta> delta(cand.size());
    for (std::size_t i = 0; i < cand.size(); ++i) {
      if (cand[i].width() < 1.0 || cand[i].height() < 1.0) continue;
      double best = 0.0;
      std::size_t arg = 0;
      for (std::size_t g = 0; g < objects.size(); ++g) {
        const double o = iou(cand[i], objects[g].box);
        if (o > best) {
          best = o;
          arg = g;
        }
      }
      if (best >= 0.5) {
        label[i] = objects[arg].label;
        delta[i] = encode(cand[i], objects[arg].box);
        fg.push_back(i);
      } else {
        bg.push_back(i);
      }
    }
    std::shuffle(fg.begin(), fg.end(), rng);
    std::shuffle(bg.begin(), bg.end(), rng);
    const std::size_t nfg = std::min(fg.size(), cfg.rois_per_image / 2);
    const std::size_t nbg = std::min(bg.size(), cfg.rois_per_image - nfg);
    for (std::size_t i = 0; i < nfg + nbg; ++i) {
      const std::size_t c = i < nfg ? fg[i] : bg[i - nfg];
      t.boxes.push_back({n, cand[c], 0.0});
      t.labels.push_back(label[c]);
      t.deltas.push_back(delta[c]);
    }
  }
  return t;
}

}  // namespace detail

/// Detection training loss for one batch; returns the scalar loss node.
inline Var detection_loss(Tape& tape, const NetworkState& st, const PretrainConfig& cfg, const Dataset& data,
                          std::size_t first, std::size_t count, std::mt19937_64& rng) {
  const NetworkSpec& spec = st.spec;
  const HeadSpec& h = head_of(spec);
  Var input = tape.constant(stack_images(data, first, first + count));
  BackboneTrace bb = backbone_forward(tape, st, input, ChannelMask{}, ParamMode::source_training);
  Var rpn = proposal_layer(tape, st, bb.output, ChannelMask{}, ParamMode::source_training);

  // objectness and proposal regression: the cell holding each object centre
  const Shape4 rs = tape.value(rpn).shape();
  const double stride = static_cast<double>(spec.input_size) / static_cast<double>(rs.h);
  Tensor4 obj_t(rs), obj_w(rs), box_t(rs), box_w(rs);
  std::size_t npos = 0;
  for (std::size_t n = 0; n < count; ++n) {
    for (std::size_t y = 0; y < rs.h; ++y)
      for (std::size_t x = 0; x < rs.w; ++x) obj_w.at(n, 0, y, x) = 1.0;
    for (const auto& g : data[first + n].objects) {
      const auto cy = std::min(rs.h - 1, static_cast<std::size_t>(g.box.cy() / stride));
      const auto cx = std::min(rs.w - 1, static_cast<std::size_t>(g.box.cx() / stride));
      obj_t.at(n, 0, cy, cx) = 1.0;
      obj_w.at(n, 0, cy, cx) = cfg.positive_weight;
      const BoxDelta d = encode(anchor_box(h, stride, cy, cx), g.box);
      const double dv[4] = {d.dx, d.dy, d.dw, d.dh};
      for (std::size_t k = 0; k < 4; ++k) {
        box_t.at(n, 1 + k, cy, cx) = dv[k];
        box_w.at(n, 1 + k, cy, cx) = 1.0;
      }
      ++npos;
    }
  }
  obj_w.scale(1.0 / static_cast<double>(count * rs.plane()));
  box_w.scale(cfg.box_weight / static_cast<double>(std::max<std::size_t>(npos, 1)));
  Var loss = ad::add(tape, ad::bce_with_logits(tape, rpn, obj_t, obj_w), ad::smooth_l1(tape, rpn, box_t, box_w));

  // RoI head on sampled boxes
  const std::vector<Proposal> props = decode_proposals(spec, tape.value(rpn));
  detail::RoiTargets rt = detail::sample_rois(spec, cfg, data, first, count, props, rng);
  if (!rt.boxes.empty()) {
    HeadTrace ht = roi_head(tape, st, bb.output, rt.boxes, ChannelMask{}, ParamMode::source_training);
    const std::size_t rows = ht.roi.kept.size();
    std::vector<std::size_t> labels(rows);
    std::vector<double> weights(rows, 1.0 / static_cast<double>(std::max<std::size_t>(rows, 1)));
    const Shape4 ls = tape.value(ht.logits).shape();
    Tensor4 reg_t(ls), reg_w(ls);
    std::size_t nfg = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t src = ht.roi.kept[r];
      labels[r] = rt.labels[src];
      if (labels[r] == h.num_classes) continue;
      ++nfg;
      const BoxDelta& d = rt.deltas[src];
      const double dv[4] = {d.dx, d.dy, d.dw, d.dh};
      for (std::size_t k = 0; k < 4; ++k) {
        reg_t.data()[r * ls.c + h.num_classes + 1 + k] = dv[k];
        reg_w.data()[r * ls.c + h.num_classes + 1 + k] = 1.0;
      }
    }
    reg_w.scale(cfg.box_weight / static_cast<double>(std::max<std::size_t>(nfg, 1)));
    loss = ad::add(tape, loss,
                   ad::softmax_cross_entropy(tape, ht.logits, 0, h.num_classes + 1, std::move(labels),
                                             std::move(weights)));
    loss = ad::add(tape, loss, ad::smooth_l1(tape, ht.logits, reg_t, reg_w));
  }

  if (cfg.l1_gamma > 0.0)
    for (const auto& [name, v] : bb.bn_inputs) {
      (void)v;
      Var g = tape.parameter(param_name(name, "gamma"), st.param(param_name(name, "gamma")), true);
      const std::size_t c = tape.value(g).size();
      loss = ad::add(tape, loss, ad::weighted_abs_sum(tape, g, std::vector<double>(c, cfg.l1_gamma)));
    }
  return loss;
}

/// Trains every parameter on the source data and captures the gamma snapshot.
/// Zero epochs return the initialized state.
inline NetworkState pretrain_source(const NetworkSpec& spec, const Dataset& data, const PretrainConfig& cfg,
                                    PretrainReport* report = nullptr) {
  if (data.empty()) throw InvalidInput("pretrain_source: empty dataset");
  if (cfg.batch_size == 0) throw InvalidInput("pretrain_source: batch size must be >= 1");
  const HeadSpec& h = head_of(spec);
  for (const auto& s : data)
    for (const auto& g : s.objects)
      if (g.label >= h.num_classes) throw InvalidInput("pretrain_source: label out of range");
  NetworkState st = init_state(spec, cfg.seed);
  if (cfg.epochs == 0) {
    st.capture_source_gamma();
    return st;
  }
  initialize_bn_statistics(st, data, cfg.calibration_images);
  Adam opt(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x5eed));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batches = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(cfg.epochs * batches);
  std::size_t step = 0;
  Dataset batch_data;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      batch_data.clear();
      for (std::size_t i = b * cfg.batch_size; i < std::min(data.size(), (b + 1) * cfg.batch_size); ++i)
        batch_data.push_back(data[order[i]]);
      const double progress = static_cast<double>(step) / total_steps;
      opt.set_lr(cfg.lr * (cfg.final_lr_fraction +
                           (1 - cfg.final_lr_fraction) * 0.5 * (1 + std::cos(M_PI * progress))));
      Tape tape;
      Var loss = detection_loss(tape, st, cfg, batch_data, 0, batch_data.size(), rng);
      const double value = tape.value(loss).item();
      if (!std::isfinite(value)) throw DivergenceError("pretraining loss is not finite", step);
      ParamGrad grads = tape.backward(loss);
      const double norm = grad_norm(grads);
      if (!std::isfinite(norm)) throw DivergenceError("pretraining gradient is not finite", step);
      if (norm > cfg.max_grad_norm)
        for (auto& [name, g] : grads) g.scale(cfg.max_grad_norm / norm);
      opt.step(st.params, grads);
      epoch_loss += value;
      ++step;
    }
    recalibrate_bn(st, data, cfg.calibration_images);
    if (report) report->epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    log::info(concat("pretrain epoch ", e + 1, "/", cfg.epochs, " loss ", epoch_loss / static_cast<double>(batches)));
  }
  if (report) report->steps = step;
  if (cfg.snap_to_float) snap_to_float(st);
  st.capture_source_gamma();
  return st;
}

}  // namespace ctta
