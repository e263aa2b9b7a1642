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

// Analytic cost model for forward and backward passes under a channel mask.
//
// Forward: conv = k^2 * Cin * Cout * Hout * Wout over active channels (a conv
// that may not drop inputs is charged its full input width), fc = in * out,
// BN = 2 and ReLU/add = 1 per active element, max-pool = k^2 per output.
// Backward: gradient propagation costs the forward amount for every layer
// whenever anything is trainable; parameter gradients cost the forward MACs
// for trainable conv/fc layers and 2 per active element for trainable BN.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ctta/detector.hpp"
#include "ctta/errors.hpp"
#include "ctta/network.hpp"

namespace ctta {

struct LayerCost {
  std::string layer;
  std::string kind;
  std::uint64_t fwd = 0, bwd_prop = 0, bwd_param = 0;
  std::size_t in_active = 0, out_active = 0;
  friend bool operator==(const LayerCost&, const LayerCost&) = default;
};

struct FlopsReport {
  std::vector<LayerCost> layers;
  std::uint64_t fwd = 0, bwd_prop = 0, bwd_param = 0;
  unsigned factor = 1;  // FLOPs per multiply-accumulate

  std::uint64_t bwd() const { return bwd_prop + bwd_param; }
  std::uint64_t total() const { return fwd + bwd(); }
  const LayerCost& layer(const std::string& name) const {
    for (const auto& l : layers)
      if (l.layer == name) return l;
    throw InvalidInput("flops report has no layer '" + name + "'");
  }
  friend bool operator==(const FlopsReport&, const FlopsReport&) = default;
};

/// Layers holding trainable parameters under `mode`. Head layers are named
/// "rpn", "fc1" and "fc2".
inline std::set<std::string> trainable_layers(const NetworkSpec& spec, ParamMode mode) {
  std::set<std::string> out;
  if (mode == ParamMode::frozen) return out;
  for (const auto& l : spec.layers) {
    if (mode == ParamMode::adaptation) {
      if (l.kind == LayerKind::bn && l.considered) out.insert(l.name);
    } else if (l.kind == LayerKind::conv || l.kind == LayerKind::bn || l.kind == LayerKind::fc) {
      out.insert(l.name);
    }
  }
  if (mode == ParamMode::source_training && spec.head) out.insert({"rpn", "fc1", "fc2"});
  return out;
}

/// Active-channel flags of every layer output under `mask` (empty mask = all).
inline std::map<std::string, ChannelFlags> active_flags(const NetworkSpec& spec, const ChannelMask& mask) {
  if (!mask.layers.empty()) mask.check(spec);
  std::map<std::string, ChannelFlags> f;
  f[kInputName] = ChannelFlags(spec.input_channels, 1);
  for (const auto& l : spec.layers) {
    const ChannelFlags& in = f.at(l.inputs.front());
    switch (l.kind) {
      case LayerKind::conv: {
        ChannelFlags om = output_mask(spec, l, mask);
        f[l.name] = om.empty() ? ChannelFlags(l.out_ch, 1) : om;
        break;
      }
      case LayerKind::bn: {
        const ChannelFlags* a = l.considered ? mask.find(l.name) : nullptr;
        f[l.name] = a ? *a : in;
        break;
      }
      case LayerKind::relu:
      case LayerKind::maxpool: f[l.name] = in; break;
      case LayerKind::add: {
        ChannelFlags u = in;
        for (std::size_t i = 1; i < l.inputs.size(); ++i) {
          const ChannelFlags& o = f.at(l.inputs[i]);
          for (std::size_t c = 0; c < u.size(); ++c) u[c] = (u[c] || o[c]) ? 1 : 0;
        }
        f[l.name] = u;
        break;
      }
      case LayerKind::fc: f[l.name] = ChannelFlags(l.out_ch, 1); break;
    }
  }
  return f;
}

namespace detail {
inline std::size_t count_active(const ChannelFlags& f) {
  return static_cast<std::size_t>(std::count_if(f.begin(), f.end(), [](std::uint8_t v) { return v != 0; }));
}
}  // namespace detail

/// Per-image forward and backward cost under `mask` with the given
/// trainable layers.
inline FlopsReport flops_report(const NetworkSpec& spec, const ChannelMask& mask,
                                const std::set<std::string>& trainable, unsigned factor = 1) {
  if (factor != 1 && factor != 2) throw InvalidInput("flops factor must be 1 or 2");
  validate(spec);
  const auto plan = shape_plan(spec);
  const auto flags = active_flags(spec, mask);
  FlopsReport rep;
  rep.factor = factor;
  const bool any_trainable = !trainable.empty();
  auto push = [&](LayerCost c, bool is_trainable, std::uint64_t param_cost) {
    c.fwd *= factor;
    c.bwd_prop = any_trainable ? c.fwd : 0;
    c.bwd_param = is_trainable ? param_cost * factor : 0;
    rep.fwd += c.fwd;
    rep.bwd_prop += c.bwd_prop;
    rep.bwd_param += c.bwd_param;
    rep.layers.push_back(std::move(c));
  };
  for (const auto& l : spec.layers) {
    const auto& out = plan.at(l.name);
    const auto& inp = plan.at(l.inputs.front());
    const std::size_t in_act = detail::count_active(flags.at(l.inputs.front()));
    const std::size_t out_act = detail::count_active(flags.at(l.name));
    const std::uint64_t out_plane = out.h * out.w;
    LayerCost c{l.name, to_string(l.kind)};
    c.out_active = out_act;
    const bool tr = trainable.count(l.name) > 0;
    switch (l.kind) {
      case LayerKind::conv: {
        const std::size_t cin = l.input_prunable ? in_act : l.in_ch;
        c.in_active = cin;
        c.fwd = static_cast<std::uint64_t>(l.kernel * l.kernel) * cin * out_act * out_plane;
        push(c, tr, c.fwd);
        break;
      }
      case LayerKind::bn:
        c.in_active = in_act;
        c.fwd = 2ull * out_act * out_plane;
        push(c, tr, 2ull * out_act * out_plane);
        break;
      case LayerKind::relu:
      case LayerKind::add:
        c.in_active = in_act;
        c.fwd = static_cast<std::uint64_t>(out_act) * out_plane;
        push(c, false, 0);
        break;
      case LayerKind::maxpool:
        c.in_active = in_act;
        c.fwd = static_cast<std::uint64_t>(l.kernel * l.kernel) * out_act * out_plane;
        push(c, false, 0);
        break;
      case LayerKind::fc: {
        const std::size_t feat = l.input_prunable ? in_act * inp.plane() : inp.c * inp.plane();
        c.in_active = feat;
        c.fwd = static_cast<std::uint64_t>(feat) * l.out_ch;
        push(c, tr, c.fwd);
        break;
      }
    }
  }
  if (spec.head) {
    const HeadSpec& h = *spec.head;
    const auto& fo = plan.at(spec.output());
    const std::size_t act = detail::count_active(flags.at(spec.output()));
    const std::uint64_t rois = h.top_k, rr = h.roi_size * h.roi_size;
    LayerCost rpn{"rpn", "conv"};
    rpn.in_active = act;
    rpn.out_active = 5;
    rpn.fwd = static_cast<std::uint64_t>(act) * 5 * fo.h * fo.w;
    push(rpn, trainable.count("rpn") > 0, rpn.fwd);
    LayerCost ra{"roi_align", "roi_align"};
    ra.in_active = ra.out_active = act;
    ra.fwd = 4ull * act * rr * rois;  // bilinear taps
    push(ra, false, 0);
    LayerCost f1{"fc1", "fc"};
    f1.in_active = act * rr;
    f1.out_active = h.fc_hidden;
    f1.fwd = static_cast<std::uint64_t>(act) * rr * h.fc_hidden * rois;
    push(f1, trainable.count("fc1") > 0, f1.fwd);
    LayerCost hr{"fc1_relu", "relu"};
    hr.in_active = hr.out_active = h.fc_hidden;
    hr.fwd = static_cast<std::uint64_t>(h.fc_hidden) * rois;
    push(hr, false, 0);
    LayerCost f2{"fc2", "fc"};
    f2.in_active = h.fc_hidden;
    f2.out_active = h.logits();
    f2.fwd = static_cast<std::uint64_t>(h.fc_hidden) * h.logits() * rois;
    push(f2, trainable.count("fc2") > 0, f2.fwd);
  }
  return rep;
}

inline FlopsReport forward_flops(const NetworkSpec& spec, const ChannelMask& mask, unsigned factor = 1) {
  return flops_report(spec, mask, {}, factor);
}

inline FlopsReport backward_flops(const NetworkSpec& spec, const ChannelMask& mask,
                                  const std::set<std::string>& trainable, unsigned factor = 1) {
  return flops_report(spec, mask, trainable, factor);
}

/// Sum of conv and fc forward MACs of the backbone plus the proposal conv:
/// the quantity MacCounter observes during one image's backbone and
/// proposal-layer pass.
inline std::uint64_t counted_conv_macs(const FlopsReport& r) {
  std::uint64_t s = 0;
  for (const auto& l : r.layers)
    if (l.kind == "conv" || (l.kind == "fc" && l.layer != "fc1" && l.layer != "fc2")) s += l.fwd / r.factor;
  return s;
}

// --- ledger ------------------------------------------------------------------

/// What one adaptation step did, enough to recompute its cost.
struct BatchTelemetry {
  std::size_t round = 0;
  std::string condition;
  std::size_t batch = 0;
  std::size_t images = 0;
  ChannelMask mask;
  bool backward = false;
};

struct LedgerTotals {
  std::uint64_t fwd = 0, bwd = 0;
  std::uint64_t total() const { return fwd + bwd; }
  friend bool operator==(const LedgerTotals&, const LedgerTotals&) = default;
};

struct FlopsLedger {
  std::vector<LedgerTotals> rounds;
  LedgerTotals overall;

  /// Percentage saved relative to `baseline` (positive = cheaper).
  double reduction_percent(const FlopsLedger& baseline) const {
    if (baseline.overall.total() == 0) return 0.0;
    return 100.0 * (1.0 - static_cast<double>(overall.total()) / static_cast<double>(baseline.overall.total()));
  }
  friend bool operator==(const FlopsLedger&, const FlopsLedger&) = default;
};

/// Per-batch cost (batch of `images` images).
inline LedgerTotals batch_cost(const NetworkSpec& spec, const ChannelMask& mask, bool backward, std::size_t images,
                               ParamMode mode = ParamMode::adaptation, unsigned factor = 1) {
  const FlopsReport r = flops_report(spec, mask, backward ? trainable_layers(spec, mode) : std::set<std::string>{},
                                     factor);
  return {r.fwd * images, r.bwd() * images};
}

inline FlopsLedger run_flops_ledger(const NetworkSpec& spec, const std::vector<BatchTelemetry>& rows,
                                    ParamMode mode = ParamMode::adaptation, unsigned factor = 1) {
  FlopsLedger led;
  for (const auto& row : rows) {
    if (row.round >= led.rounds.size()) led.rounds.resize(row.round + 1);
    const LedgerTotals c = batch_cost(spec, row.mask, row.backward, row.images, mode, factor);
    led.rounds[row.round].fwd += c.fwd;
    led.rounds[row.round].bwd += c.bwd;
    led.overall.fwd += c.fwd;
    led.overall.bwd += c.bwd;
  }
  return led;
}

}  // namespace ctta
