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

// Network layout: a small DAG of backbone layers plus an optional two-stage
// detection head, and the per-layer channel masks that act on it.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/kernels.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

enum class LayerKind { conv, bn, relu, maxpool, add, fc };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::bn: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::add: return "add";
    case LayerKind::fc: return "fc";
  }
  return "?";
}

inline constexpr const char* kInputName = "input";

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  std::vector<std::string> inputs;
  std::size_t in_ch = 0;   // conv: input channels; fc: flattened input features
  std::size_t out_ch = 0;  // conv/fc outputs; bn channel count
  int kernel = 1;          // conv, maxpool
  int stride = 1;          // conv, maxpool
  int pad = 0;             // conv
  bool bias = false;       // conv, fc
  bool considered = false;  // bn: participates in sensitivity, sparsity and pruning
  // conv/fc: whether input channels may be dropped when the upstream
  // considered BN prunes them. The first group of a residual main branch, the
  // down-sampling group and any conv fed by a residual sum are not.
  bool input_prunable = false;
};

/// Dense objectness/proposal layer and RoI classification head.
struct HeadSpec {
  std::size_t num_classes = 3;
  std::size_t roi_size = 4;
  std::size_t fc_hidden = 64;
  double anchor_size = 16.0;
  double proposal_score_threshold = 0.0;
  std::size_t pre_nms_top_k = 64;
  std::size_t top_k = 32;
  double proposal_nms_iou = 0.7;
  double detection_nms_iou = 0.5;
  double detection_score_floor = 0.05;
  std::size_t max_rois_per_batch = 64;

  std::size_t logits() const { return num_classes + 1 + 4; }
};

struct NetworkSpec {
  std::size_t input_channels = 3;
  std::size_t input_size = 64;
  std::vector<LayerSpec> layers;
  std::optional<HeadSpec> head;
  double bn_eps = 1e-5;
  /// Layers whose pooled outputs form the image-level feature vector;
  /// empty selects the backbone output.
  std::vector<std::string> image_taps;

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return i;
    return std::nullopt;
  }
  const LayerSpec& layer(const std::string& name) const {
    auto i = find(name);
    if (!i) throw InvalidInput("unknown layer '" + name + "'");
    return layers[*i];
  }
  const std::string& output() const { return layers.back().name; }

  std::vector<std::string> considered_bn() const {
    std::vector<std::string> out;
    for (const auto& l : layers)
      if (l.kind == LayerKind::bn && l.considered) out.push_back(l.name);
    return out;
  }
  std::vector<std::string> bn_layers() const {
    std::vector<std::string> out;
    for (const auto& l : layers)
      if (l.kind == LayerKind::bn) out.push_back(l.name);
    return out;
  }
  /// Layers pooled into the image-level feature vector.
  std::vector<std::string> taps() const {
    if (image_taps.empty()) return {output()};
    return image_taps;
  }
};

struct FeatureShape {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t plane() const { return h * w; }
  std::size_t count() const { return c * h * w; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

/// Output shape of every layer at the configured input size (keyed by name,
/// including "input").
inline std::map<std::string, FeatureShape> shape_plan(const NetworkSpec& spec) {
  std::map<std::string, FeatureShape> s;
  s[kInputName] = {spec.input_channels, spec.input_size, spec.input_size};
  for (const auto& l : spec.layers) {
    if (l.inputs.empty()) throw InvalidInput("layer '" + l.name + "' has no inputs");
    for (const auto& in : l.inputs)
      if (!s.count(in)) throw InvalidInput("layer '" + l.name + "' reads unknown '" + in + "'");
    const FeatureShape x = s.at(l.inputs.front());
    FeatureShape o{};
    switch (l.kind) {
      case LayerKind::conv:
        if (l.in_ch != x.c)
          throw InvalidInput(concat("conv '", l.name, "' expects ", l.in_ch, " channels, input has ", x.c));
        o = {l.out_ch, conv_out_size(x.h, l.kernel, l.stride, l.pad),
             conv_out_size(x.w, l.kernel, l.stride, l.pad)};
        break;
      case LayerKind::bn:
        if (l.out_ch != x.c)
          throw InvalidInput(concat("bn '", l.name, "' has ", l.out_ch, " channels, input has ", x.c));
        o = x;
        break;
      case LayerKind::relu: o = x; break;
      case LayerKind::maxpool:
        o = {x.c, conv_out_size(x.h, l.kernel, l.stride, 0), conv_out_size(x.w, l.kernel, l.stride, 0)};
        break;
      case LayerKind::add:
        for (const auto& in : l.inputs)
          if (!(s.at(in) == x)) throw InvalidInput("add '" + l.name + "' has mismatched inputs");
        o = x;
        break;
      case LayerKind::fc:
        if (l.in_ch != x.count())
          throw InvalidInput(concat("fc '", l.name, "' expects ", l.in_ch, " features, input has ",
                                    x.count()));
        o = {l.out_ch, 1, 1};
        break;
    }
    s[l.name] = o;
  }
  return s;
}

/// The considered BN whose mask governs the channels of `name`'s output, if
/// any. Masks pass through ReLU and max-pooling unchanged; sums are dense.
inline std::optional<std::string> channel_source(const NetworkSpec& spec, const std::string& name) {
  std::string cur = name;
  while (cur != kInputName) {
    const LayerSpec& l = spec.layer(cur);
    if (l.kind == LayerKind::bn) return l.considered ? std::optional<std::string>(l.name) : std::nullopt;
    if (l.kind == LayerKind::relu || l.kind == LayerKind::maxpool) {
      cur = l.inputs.front();
      continue;
    }
    return std::nullopt;
  }
  return std::nullopt;
}

/// The considered BN layer that directly consumes conv `name`, if any.
inline std::optional<std::string> output_mask_owner(const NetworkSpec& spec, const std::string& name) {
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::bn && l.considered && l.inputs.front() == name) return l.name;
  return std::nullopt;
}

/// Structural checks: shapes are consistent, every considered BN sits
/// directly on a conv it alone consumes, and every input-prunable conv/fc is
/// fed by a considered BN.
inline void validate(const NetworkSpec& spec) {
  if (spec.layers.empty()) throw InvalidInput("network has no layers");
  (void)shape_plan(spec);
  std::map<std::string, int> consumers;
  for (const auto& l : spec.layers)
    for (const auto& in : l.inputs) ++consumers[in];
  std::map<std::string, int> seen;
  for (const auto& l : spec.layers) {
    if (seen[l.name]++) throw InvalidInput("duplicate layer name '" + l.name + "'");
    if (l.kind == LayerKind::bn && l.considered) {
      const std::string& src = l.inputs.front();
      if (src == kInputName || spec.layer(src).kind != LayerKind::conv)
        throw InvalidInput("considered bn '" + l.name + "' must follow a convolution");
      if (consumers[src] != 1)
        throw InvalidInput("conv feeding considered bn '" + l.name + "' has other consumers");
    }
    if ((l.kind == LayerKind::conv || l.kind == LayerKind::fc) && l.input_prunable &&
        !channel_source(spec, l.inputs.front()))
      throw InvalidInput("layer '" + l.name + "' is input-prunable but not fed by a considered bn");
  }
  for (const auto& t : spec.image_taps)
    if (!spec.find(t)) throw InvalidInput("image feature layer '" + t + "' is not in the network");
  if (spec.head) {
    const HeadSpec& h = *spec.head;
    if (h.num_classes == 0 || h.roi_size == 0 || h.fc_hidden == 0 || h.top_k == 0)
      throw InvalidInput("head settings must be positive");
    if (!(h.proposal_nms_iou > 0 && h.proposal_nms_iou <= 1) ||
        !(h.detection_nms_iou > 0 && h.detection_nms_iou <= 1))
      throw InvalidInput("NMS IoU thresholds must lie in (0, 1]");
  }
}

/// Total stride of a layer output relative to the input image.
inline double feature_stride(const NetworkSpec& spec, const std::string& name) {
  const auto plan = shape_plan(spec);
  return static_cast<double>(spec.input_size) / static_cast<double>(plan.at(name).h);
}

/// Canonical text form; hashed into archives and logs.
inline std::string describe(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "in " << spec.input_channels << ' ' << spec.input_size << " eps " << spec.bn_eps << '\n';
  if (!spec.image_taps.empty()) {
    os << "taps";
    for (const auto& t : spec.image_taps) os << ' ' << t;
    os << '\n';
  }
  for (const auto& l : spec.layers) {
    os << l.name << ' ' << to_string(l.kind) << " [";
    for (const auto& in : l.inputs) os << in << ';';
    os << "] " << l.in_ch << ' ' << l.out_ch << ' ' << l.kernel << ' ' << l.stride << ' ' << l.pad << ' '
       << l.bias << l.considered << l.input_prunable << '\n';
  }
  if (spec.head) {
    const HeadSpec& h = *spec.head;
    os << "head " << h.num_classes << ' ' << h.roi_size << ' ' << h.fc_hidden << ' ' << h.anchor_size
       << ' ' << h.proposal_score_threshold << ' ' << h.pre_nms_top_k << ' ' << h.top_k << ' '
       << h.proposal_nms_iou << ' ' << h.detection_nms_iou << ' ' << h.detection_score_floor << ' '
       << h.max_rois_per_batch << '\n';
  }
  return os.str();
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t spec_hash(const NetworkSpec& spec) { return fnv1a(describe(spec)); }

// --- default layouts -------------------------------------------------------

namespace detail {
inline LayerSpec conv(std::string name, std::string in, std::size_t cin, std::size_t cout, int k,
                      int stride, int pad, bool prunable_input) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::conv;
  l.inputs = {std::move(in)};
  l.in_ch = cin;
  l.out_ch = cout;
  l.kernel = k;
  l.stride = stride;
  l.pad = pad;
  l.input_prunable = prunable_input;
  return l;
}
inline LayerSpec bn(std::string name, std::string in, std::size_t c, bool considered) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::bn;
  l.inputs = {std::move(in)};
  l.in_ch = l.out_ch = c;
  l.considered = considered;
  return l;
}
inline LayerSpec simple(std::string name, LayerKind kind, std::vector<std::string> in) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = kind;
  l.inputs = std::move(in);
  if (kind == LayerKind::maxpool) l.kernel = l.stride = 2;
  return l;
}
}  // namespace detail

/// Four-stage Conv-BN-ReLU backbone, widths {16, 32, 64, 64}, with one
/// residual down-sampling block at stage 3, plus the detection head.
inline NetworkSpec default_detector_spec(std::size_t input_channels = 3, std::size_t input_size = 64,
                                         std::size_t num_classes = 3) {
  using detail::bn;
  using detail::conv;
  using detail::simple;
  NetworkSpec s;
  s.input_channels = input_channels;
  s.input_size = input_size;
  s.layers = {
      conv("conv1", kInputName, input_channels, 16, 3, 1, 1, false),
      bn("bn1", "conv1", 16, true),
      simple("relu1", LayerKind::relu, {"bn1"}),
      simple("pool1", LayerKind::maxpool, {"relu1"}),
      conv("conv2", "pool1", 16, 32, 3, 1, 1, true),
      bn("bn2", "conv2", 32, true),
      simple("relu2", LayerKind::relu, {"bn2"}),
      simple("pool2", LayerKind::maxpool, {"relu2"}),
      // residual block: main branch
      conv("conv3a", "pool2", 32, 64, 3, 2, 1, false),
      bn("bn3a", "conv3a", 64, true),
      simple("relu3a", LayerKind::relu, {"bn3a"}),
      conv("conv3b", "relu3a", 64, 64, 3, 1, 1, true),
      bn("bn3b", "conv3b", 64, true),
      // residual block: down-sampling branch
      conv("conv3d", "pool2", 32, 64, 1, 2, 0, false),
      bn("bn3d", "conv3d", 64, false),
      simple("add3", LayerKind::add, {"bn3b", "bn3d"}),
      simple("relu3", LayerKind::relu, {"add3"}),
      conv("conv4", "relu3", 64, 64, 3, 1, 1, false),
      bn("bn4", "conv4", 64, true),
      simple("relu4", LayerKind::relu, {"bn4"}),
  };
  HeadSpec h;
  h.num_classes = num_classes;
  s.head = h;
  validate(s);
  return s;
}

/// Conv-BN-ReLU x 2 without a head; small enough for finite differences.
inline NetworkSpec toy_two_stage_spec(std::size_t channels = 3, std::size_t width = 4,
                                      std::size_t input_size = 8) {
  using detail::bn;
  using detail::conv;
  using detail::simple;
  NetworkSpec s;
  s.input_channels = channels;
  s.input_size = input_size;
  s.layers = {
      conv("conv1", kInputName, channels, width, 3, 1, 1, false),
      bn("bn1", "conv1", width, true),
      simple("relu1", LayerKind::relu, {"bn1"}),
      conv("conv2", "relu1", width, width, 3, 1, 1, true),
      bn("bn2", "conv2", width, true),
      simple("relu2", LayerKind::relu, {"bn2"}),
  };
  validate(s);
  return s;
}

// --- channel masks ---------------------------------------------------------

struct LayerMask {
  std::string layer;
  ChannelFlags alive;  // 1 = kept
};

/// Per-considered-BN keep flags, in network order.
struct ChannelMask {
  std::vector<LayerMask> layers;

  static ChannelMask all_alive(const NetworkSpec& spec) {
    ChannelMask m;
    for (const auto& name : spec.considered_bn())
      m.layers.push_back({name, ChannelFlags(spec.layer(name).out_ch, 1)});
    return m;
  }

  const ChannelFlags* find(const std::string& layer) const {
    for (const auto& l : layers)
      if (l.layer == layer) return &l.alive;
    return nullptr;
  }
  ChannelFlags* find(const std::string& layer) {
    for (auto& l : layers)
      if (l.layer == layer) return &l.alive;
    return nullptr;
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.alive.size();
    return n;
  }
  std::size_t pruned() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      for (auto a : l.alive) n += a ? 0 : 1;
    return n;
  }
  std::vector<std::size_t> pruned_indices(const std::string& layer) const {
    std::vector<std::size_t> out;
    if (const ChannelFlags* a = find(layer))
      for (std::size_t c = 0; c < a->size(); ++c)
        if (!(*a)[c]) out.push_back(c);
    return out;
  }

  /// Throws unless the mask covers exactly the considered BN layers of `spec`.
  void check(const NetworkSpec& spec) const {
    const auto names = spec.considered_bn();
    if (names.size() != layers.size())
      throw InvalidInput(concat("mask covers ", layers.size(), " layers, network has ", names.size(),
                                " considered bn layers"));
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (layers[i].layer != names[i])
        throw InvalidInput("mask layer '" + layers[i].layer + "' does not match '" + names[i] + "'");
      if (layers[i].alive.size() != spec.layer(names[i]).out_ch)
        throw InvalidInput("mask for '" + names[i] + "' has wrong channel count");
    }
  }

  friend bool operator==(const ChannelMask& a, const ChannelMask& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i)
      if (a.layers[i].layer != b.layers[i].layer || a.layers[i].alive != b.layers[i].alive) return false;
    return true;
  }
};

/// Input-side mask of a conv/fc layer: the upstream considered BN mask when
/// the layer is input-prunable, empty otherwise. For fc layers the channel
/// flags are expanded over the flattened spatial plane.
inline ChannelFlags input_mask(const NetworkSpec& spec, const LayerSpec& l, const ChannelMask& mask) {
  if (!l.input_prunable) return {};
  auto src = channel_source(spec, l.inputs.front());
  if (!src) return {};
  const ChannelFlags* a = mask.find(*src);
  if (!a) return {};
  if (l.kind == LayerKind::fc) {
    const auto plan = shape_plan(spec);
    const std::size_t plane = plan.at(l.inputs.front()).plane();
    ChannelFlags f;
    f.reserve(a->size() * plane);
    for (auto v : *a) f.insert(f.end(), plane, v);
    return f;
  }
  return *a;
}

/// Output-side mask of a conv: the consuming considered BN's flags, if any.
inline ChannelFlags output_mask(const NetworkSpec& spec, const LayerSpec& l, const ChannelMask& mask) {
  if (l.kind != LayerKind::conv) return {};
  auto owner = output_mask_owner(spec, l.name);
  if (!owner) return {};
  const ChannelFlags* a = mask.find(*owner);
  return a ? *a : ChannelFlags{};
}

}  // namespace ctta
