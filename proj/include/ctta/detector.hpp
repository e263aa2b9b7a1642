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

// A tiny two-stage detector: Conv-BN-ReLU backbone, dense one-anchor-per-cell
// proposal layer, RoI-Align and a two-layer fully connected head.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctta/autodiff.hpp"
#include "ctta/boxes.hpp"
#include "ctta/errors.hpp"
#include "ctta/network.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

/// Which parameters receive gradients.
enum class ParamMode {
  frozen,           // inference only
  adaptation,       // gamma of considered BN layers
  source_training,  // everything
};

struct BnStats {
  std::vector<double> mean, var;
  friend bool operator==(const BnStats&, const BnStats&) = default;
};

inline std::string param_name(const std::string& layer, const char* what) { return layer + "." + what; }

class NetworkState {
 public:
  NetworkSpec spec;
  std::map<std::string, Tensor4> params;  // "<layer>.weight|bias|gamma|beta"
  std::map<std::string, BnStats> running;

  const Tensor4& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw InvalidInput("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor4& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw InvalidInput("missing parameter '" + name + "'");
    return it->second;
  }
  std::span<double> gamma(const std::string& bn) { return param(param_name(bn, "gamma")).data(); }
  std::span<const double> gamma(const std::string& bn) const {
    return param(param_name(bn, "gamma")).data();
  }

  /// Freezes the current gamma of every considered BN layer as the source
  /// snapshot. Allowed once.
  void capture_source_gamma() {
    if (!gamma0_.empty()) throw StateError("source gamma snapshot already captured");
    for (const auto& name : spec.considered_bn()) {
      auto g = gamma(name);
      gamma0_[name] = std::vector<double>(g.begin(), g.end());
    }
  }
  /// Installs a snapshot read from an archive.
  void restore_source_gamma(std::map<std::string, std::vector<double>> snapshot) {
    if (!gamma0_.empty()) throw StateError("source gamma snapshot already captured");
    gamma0_ = std::move(snapshot);
  }
  bool has_source_gamma() const { return !gamma0_.empty(); }
  const std::map<std::string, std::vector<double>>& source_gamma() const { return gamma0_; }
  const std::vector<double>& source_gamma(const std::string& bn) const {
    auto it = gamma0_.find(bn);
    if (it == gamma0_.end()) throw StateError("no source gamma snapshot for '" + bn + "'");
    return it->second;
  }

  bool trainable(const std::string& name, ParamMode mode) const {
    switch (mode) {
      case ParamMode::frozen: return false;
      case ParamMode::source_training: return true;
      case ParamMode::adaptation: {
        const auto dot = name.rfind('.');
        if (name.substr(dot + 1) != "gamma") return false;
        auto idx = spec.find(name.substr(0, dot));
        return idx && spec.layers[*idx].considered;
      }
    }
    return false;
  }

  friend bool operator==(const NetworkState& a, const NetworkState& b) {
    return describe(a.spec) == describe(b.spec) && a.params == b.params && a.running == b.running &&
           a.gamma0_ == b.gamma0_;
  }

 private:
  std::map<std::string, std::vector<double>> gamma0_;
};

namespace detail {
inline Tensor4 random_normal(Shape4 s, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(s.count());
  for (double& x : v) x = dist(rng);
  return Tensor4(s, std::move(v));
}
}  // namespace detail

/// Fresh parameters: He-normal conv/fc weights, unit BN scale, zero shift,
/// zero-mean unit-variance running statistics.
inline NetworkState init_state(const NetworkSpec& spec, std::uint64_t seed) {
  validate(spec);
  NetworkState st;
  st.spec = spec;
  std::mt19937_64 rng(seed);
  const auto plan = shape_plan(spec);
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::conv) {
      const double fan_in = static_cast<double>(l.in_ch * l.kernel * l.kernel);
      st.params[param_name(l.name, "weight")] = detail::random_normal(
          Shape4{l.out_ch, l.in_ch, static_cast<std::size_t>(l.kernel), static_cast<std::size_t>(l.kernel)},
          std::sqrt(2.0 / fan_in), rng);
      if (l.bias) st.params[param_name(l.name, "bias")] = Tensor4(Shape4{1, l.out_ch, 1, 1});
    } else if (l.kind == LayerKind::fc) {
      st.params[param_name(l.name, "weight")] = detail::random_normal(
          Shape4{l.out_ch, l.in_ch, 1, 1}, std::sqrt(2.0 / static_cast<double>(l.in_ch)), rng);
      if (l.bias) st.params[param_name(l.name, "bias")] = Tensor4(Shape4{1, l.out_ch, 1, 1});
    } else if (l.kind == LayerKind::bn) {
      st.params[param_name(l.name, "gamma")] = Tensor4(Shape4{1, l.out_ch, 1, 1}, 1.0);
      st.params[param_name(l.name, "beta")] = Tensor4(Shape4{1, l.out_ch, 1, 1}, 0.0);
      st.running[l.name] = {std::vector<double>(l.out_ch, 0.0), std::vector<double>(l.out_ch, 1.0)};
    }
  }
  if (spec.head) {
    const HeadSpec& h = *spec.head;
    const std::size_t c = plan.at(spec.output()).c;
    st.params["rpn.weight"] = detail::random_normal(Shape4{5, c, 1, 1}, 0.01, rng);
    Tensor4 rb(Shape4{1, 5, 1, 1});
    rb.data()[0] = -2.0;  // objectness prior
    st.params["rpn.bias"] = rb;
    const std::size_t feat = c * h.roi_size * h.roi_size;
    st.params["fc1.weight"] =
        detail::random_normal(Shape4{h.fc_hidden, feat, 1, 1}, std::sqrt(2.0 / static_cast<double>(feat)), rng);
    st.params["fc1.bias"] = Tensor4(Shape4{1, h.fc_hidden, 1, 1});
    st.params["fc2.weight"] = detail::random_normal(Shape4{h.logits(), h.fc_hidden, 1, 1}, 0.01, rng);
    st.params["fc2.bias"] = Tensor4(Shape4{1, h.logits(), 1, 1});
  }
  return st;
}

// --- backbone ----------------------------------------------------------------

struct BackboneTrace {
  std::map<std::string, Var> out;                       // every layer output
  std::vector<std::pair<std::string, Var>> bn_inputs;   // considered bn -> conv output it normalizes
  std::vector<std::pair<std::string, Var>> taps;        // image-level feature layers
  Var output;
};

inline Var param_var(Tape& tape, const NetworkState& st, const std::string& name, ParamMode mode) {
  return tape.parameter(name, st.param(name), st.trainable(name, mode));
}

/// Runs the backbone on `input`. An empty mask disables masking entirely.
inline BackboneTrace backbone_forward(Tape& tape, const NetworkState& st, Var input, const ChannelMask& mask,
                                      ParamMode mode) {
  const NetworkSpec& spec = st.spec;
  if (!mask.layers.empty()) mask.check(spec);
  const Shape4 xs = tape.value(input).shape();
  if (xs.c != spec.input_channels)
    throw InvalidInput(concat("input has ", xs.c, " channels, network expects ", spec.input_channels));
  BackboneTrace tr;
  tr.out[kInputName] = input;
  for (const auto& l : spec.layers) {
    const Var x = tr.out.at(l.inputs.front());
    Var y;
    switch (l.kind) {
      case LayerKind::conv: {
        ad::ConvArgs args{l.stride, l.pad, input_mask(spec, l, mask), output_mask(spec, l, mask)};
        Var w = param_var(tape, st, param_name(l.name, "weight"), mode);
        Var b = l.bias ? param_var(tape, st, param_name(l.name, "bias"), mode) : Var{};
        y = ad::conv2d(tape, x, w, b, args);
        break;
      }
      case LayerKind::bn: {
        Var g = param_var(tape, st, param_name(l.name, "gamma"), mode);
        Var b = param_var(tape, st, param_name(l.name, "beta"), mode);
        const BnStats& rs = st.running.at(l.name);
        ChannelFlags alive;
        if (l.considered)
          if (const ChannelFlags* a = mask.find(l.name)) alive = *a;
        y = ad::batch_norm(tape, x, g, b, rs.mean, rs.var, spec.bn_eps, std::move(alive));
        if (l.considered) tr.bn_inputs.emplace_back(l.name, x);
        break;
      }
      case LayerKind::relu:
        y = ad::relu(tape, x);
        break;
      case LayerKind::maxpool: y = ad::maxpool(tape, x, l.kernel, l.stride); break;
      case LayerKind::add: {
        y = x;
        for (std::size_t i = 1; i < l.inputs.size(); ++i) y = ad::add(tape, y, tr.out.at(l.inputs[i]));
        break;
      }
      case LayerKind::fc: {
        Var w = param_var(tape, st, param_name(l.name, "weight"), mode);
        Var b = l.bias ? param_var(tape, st, param_name(l.name, "bias"), mode) : Var{};
        y = ad::fc(tape, ad::flatten(tape, x), w, b, input_mask(spec, l, mask));
        break;
      }
    }
    tr.out[l.name] = y;
  }
  for (const auto& t : spec.taps()) tr.taps.emplace_back(t, tr.out.at(t));
  tr.output = tr.out.at(spec.output());
  return tr;
}

// --- detection head ------------------------------------------------------------

struct Proposal {
  std::size_t image = 0;
  Box box;
  double objectness = 0.0;
};

struct RoiRecord {
  std::size_t image = 0;
  Box box;                     // proposal box, image pixels
  std::vector<double> scores;  // K + 1, background last
  double background = 1.0;     // scores.back()
  std::size_t label = 0;       // argmax over foreground classes
  double confidence = 0.0;     // scores[label]
};

struct Detection {
  Box box;
  std::vector<double> scores;  // K + 1, background last
  std::size_t label = 0;
  double confidence = 0.0;
};

using ImageDetections = std::vector<Detection>;

inline const HeadSpec& head_of(const NetworkSpec& spec) {
  if (!spec.head) throw InvalidInput("network has no detection head");
  return *spec.head;
}

inline Box anchor_box(const HeadSpec& h, double stride, std::size_t y, std::size_t x) {
  const double cx = (static_cast<double>(x) + 0.5) * stride;
  const double cy = (static_cast<double>(y) + 0.5) * stride;
  const double a = 0.5 * h.anchor_size;
  return {cx - a, cy - a, cx + a, cy + a};
}

/// Decodes the dense proposal map (N x 5 x H x W: objectness logit, then
/// dx, dy, dw, dh relative to the cell anchor) into NMS-filtered proposals.
inline std::vector<Proposal> decode_proposals(const NetworkSpec& spec, const Tensor4& rpn) {
  const HeadSpec& h = head_of(spec);
  const double stride = static_cast<double>(spec.input_size) / static_cast<double>(rpn.shape().h);
  const double size = static_cast<double>(spec.input_size);
  std::vector<Proposal> out;
  for (std::size_t n = 0; n < rpn.shape().n; ++n) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t y = 0; y < rpn.shape().h; ++y)
      for (std::size_t x = 0; x < rpn.shape().w; ++x) {
        const double s = 1.0 / (1.0 + std::exp(-rpn.at(n, 0, y, x)));
        if (s < h.proposal_score_threshold) continue;
        BoxDelta d{rpn.at(n, 1, y, x), rpn.at(n, 2, y, x), rpn.at(n, 3, y, x), rpn.at(n, 4, y, x)};
        Box b = clip(decode(anchor_box(h, stride, y, x), d), size, size);
        if (b.width() < 1.0 || b.height() < 1.0) continue;
        boxes.push_back(b);
        scores.push_back(s);
      }
    // pre-NMS top-k
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    if (order.size() > h.pre_nms_top_k) order.resize(h.pre_nms_top_k);
    std::vector<Box> tb;
    std::vector<double> ts;
    for (auto i : order) {
      tb.push_back(boxes[i]);
      ts.push_back(scores[i]);
    }
    for (auto i : nms(tb, ts, h.proposal_nms_iou, h.top_k)) out.push_back({n, tb[i], ts[i]});
  }
  return out;
}

struct HeadTrace {
  ad::RoiAlignVar roi;  // M x C x r x r on the backbone output
  Var logits;           // M x (K + 1 + 4)
};

/// RoI head over explicit boxes (image pixels). Degenerate boxes are dropped;
/// `roi.kept` maps output rows back to `boxes`.
inline HeadTrace roi_head(Tape& tape, const NetworkState& st, Var feature, const std::vector<Proposal>& boxes,
                          const ChannelMask& mask, ParamMode mode) {
  const NetworkSpec& spec = st.spec;
  const HeadSpec& h = head_of(spec);
  const double stride = static_cast<double>(spec.input_size) / static_cast<double>(tape.value(feature).shape().h);
  std::vector<RoiBox> rb;
  rb.reserve(boxes.size());
  for (const auto& p : boxes)
    rb.push_back({p.image, p.box.x0 / stride, p.box.y0 / stride, p.box.x1 / stride, p.box.y1 / stride});
  HeadTrace ht;
  ht.roi = ad::roi_align(tape, feature, rb, h.roi_size, h.roi_size);
  ChannelFlags fmask;
  if (!mask.layers.empty()) {
    if (auto src = channel_source(spec, spec.output())) {
      const ChannelFlags& a = *mask.find(*src);
      for (auto v : a) fmask.insert(fmask.end(), h.roi_size * h.roi_size, v);
    }
  }
  Var flat = ad::flatten(tape, ht.roi.features);
  Var hid = ad::relu(tape, ad::fc(tape, flat, param_var(tape, st, "fc1.weight", mode),
                                  param_var(tape, st, "fc1.bias", mode), std::move(fmask)));
  ht.logits = ad::fc(tape, hid, param_var(tape, st, "fc2.weight", mode), param_var(tape, st, "fc2.bias", mode));
  return ht;
}

/// Objectness/proposal conv on the backbone output.
inline Var proposal_layer(Tape& tape, const NetworkState& st, Var feature, const ChannelMask& mask, ParamMode mode) {
  ad::ConvArgs args{1, 0, {}, {}};
  if (!mask.layers.empty())
    if (auto src = channel_source(st.spec, st.spec.output())) args.in_mask = *mask.find(*src);
  return ad::conv2d(tape, feature, param_var(tape, st, "rpn.weight", mode), param_var(tape, st, "rpn.bias", mode),
                    args);
}

inline RoiRecord make_record(const HeadSpec& h, const Proposal& p, const Tensor4& probs, std::size_t row) {
  RoiRecord r;
  r.image = p.image;
  r.box = p.box;
  r.scores.assign(probs.data().begin() + static_cast<long>(row * (h.num_classes + 1)),
                  probs.data().begin() + static_cast<long>((row + 1) * (h.num_classes + 1)));
  r.background = r.scores.back();
  r.label = static_cast<std::size_t>(
      std::max_element(r.scores.begin(), r.scores.end() - 1) - r.scores.begin());
  r.confidence = r.scores[r.label];
  return r;
}

/// Refines RoIs into final detections: box regression, per-class NMS,
/// confidence floor.
inline std::vector<ImageDetections> postprocess(const NetworkSpec& spec, const std::vector<RoiRecord>& rois,
                                                const Tensor4& logits, std::size_t images) {
  const HeadSpec& h = head_of(spec);
  const double size = static_cast<double>(spec.input_size);
  std::vector<ImageDetections> out(images);
  for (std::size_t n = 0; n < images; ++n) {
    for (std::size_t k = 0; k < h.num_classes; ++k) {
      std::vector<Box> boxes;
      std::vector<double> scores;
      std::vector<std::size_t> src;
      for (std::size_t m = 0; m < rois.size(); ++m) {
        const RoiRecord& r = rois[m];
        if (r.image != n || r.label != k || r.confidence < h.detection_score_floor) continue;
        const std::size_t base = m * h.logits() + h.num_classes + 1;
        BoxDelta d{logits.data()[base], logits.data()[base + 1], logits.data()[base + 2], logits.data()[base + 3]};
        boxes.push_back(clip(decode(r.box, d), size, size));
        scores.push_back(r.confidence);
        src.push_back(m);
      }
      for (auto i : nms(boxes, scores, h.detection_nms_iou))
        out[n].push_back({boxes[i], rois[src[i]].scores, k, scores[i]});
    }
    std::stable_sort(out[n].begin(), out[n].end(),
                     [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  }
  return out;
}

struct DetectorTrace {
  BackboneTrace backbone;
  Var rpn;
  std::vector<Proposal> proposals;  // rows of roi features / logits
  std::optional<HeadTrace> head;    // absent when there are no proposals
  std::vector<RoiRecord> rois;
  std::vector<ImageDetections> detections;
};

/// Full detector forward on the tape. Detections and RoI records come from
/// the same pass whose intermediate values feed adaptation.
inline DetectorTrace detector_forward(Tape& tape, const NetworkState& st, const Tensor4& batch,
                                      const ChannelMask& mask, ParamMode mode) {
  const NetworkSpec& spec = st.spec;
  const HeadSpec& h = head_of(spec);
  if (batch.shape().h != spec.input_size || batch.shape().w != spec.input_size)
    throw InvalidInput(concat("batch spatial size ", batch.shape().h, "x", batch.shape().w,
                              " != network input ", spec.input_size));
  DetectorTrace tr;
  Var input = tape.constant(batch);
  tr.backbone = backbone_forward(tape, st, input, mask, mode);
  tr.rpn = proposal_layer(tape, st, tr.backbone.output, mask, mode);
  std::vector<Proposal> props = decode_proposals(spec, tape.value(tr.rpn));
  tr.detections.assign(batch.shape().n, {});
  if (props.empty()) return tr;
  HeadTrace ht = roi_head(tape, st, tr.backbone.output, props, mask, mode);
  const Tensor4& logits = tape.value(ht.logits);
  const Tensor4 probs = softmax_rows(logits, 0, h.num_classes + 1);
  for (std::size_t row = 0; row < ht.roi.kept.size(); ++row) {
    tr.proposals.push_back(props[ht.roi.kept[row]]);
    tr.rois.push_back(make_record(h, tr.proposals.back(), probs, row));
  }
  tr.detections = postprocess(spec, tr.rois, logits, batch.shape().n);
  tr.head = std::move(ht);
  return tr;
}

struct InferenceResult {
  std::vector<ImageDetections> detections;
  std::vector<std::pair<std::string, Tensor4>> features;  // conv output entering each considered bn
  std::vector<RoiRecord> rois;
  Tensor4 pooled_taps;  // N x sum(C_tap), spatial means of the image-level feature layers
  Tensor4 roi_pooled;   // M x C, spatial means of the aligned RoI features (rows match `rois`)
};

inline Tensor4 pooled_taps(const Tape& tape, const BackboneTrace& tr) {
  std::size_t rows = 0, total = 0;
  for (const auto& [name, v] : tr.taps) {
    rows = tape.value(v).shape().n;
    total += tape.value(v).shape().c;
  }
  Tensor4 out(Shape4{rows, total, 1, 1});
  std::size_t off = 0;
  for (const auto& [name, v] : tr.taps) {
    Tensor4 m = spatial_mean(tape.value(v));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < m.shape().c; ++c) out.at(r, off + c, 0, 0) = m.at(r, c, 0, 0);
    off += m.shape().c;
  }
  return out;
}

/// Inference without gradients.
inline InferenceResult infer(const NetworkState& st, const Tensor4& batch, const ChannelMask& mask) {
  mask.check(st.spec);
  Tape tape;
  DetectorTrace tr = detector_forward(tape, st, batch, mask, ParamMode::frozen);
  InferenceResult r;
  r.detections = std::move(tr.detections);
  for (const auto& [name, v] : tr.backbone.bn_inputs) r.features.emplace_back(name, tape.value(v));
  r.rois = std::move(tr.rois);
  r.pooled_taps = pooled_taps(tape, tr.backbone);
  const std::size_t c = tape.value(tr.backbone.output).shape().c;
  r.roi_pooled = tr.head ? spatial_mean(tape.value(tr.head->roi.features)).reshaped(Shape4{r.rois.size(), c, 1, 1})
                         : Tensor4(Shape4{0, c, 1, 1});
  return r;
}

/// Indices of RoIs whose background confidence is strictly below
/// `background_threshold`, ordered by descending foreground confidence
/// (1 - background) and capped at `cap`.
inline std::vector<std::size_t> select_foreground_rois(const std::vector<RoiRecord>& rois,
                                                       double background_threshold, std::size_t cap) {
  if (!(background_threshold > 0.0 && background_threshold < 1.0))
    throw InvalidInput("background threshold must lie in (0, 1)");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < rois.size(); ++i)
    if (rois[i].background < background_threshold) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return rois[a].background < rois[b].background; });
  if (idx.size() > cap) idx.resize(cap);
  return idx;
}

}  // namespace ctta
