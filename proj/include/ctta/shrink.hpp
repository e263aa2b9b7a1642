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

// Physical channel removal. A pruned channel is deleted from the producing
// conv, its BN and every consumer when all consumers may drop input
// channels. Channels that reach a sum or a layer that must keep its full
// input stay in place as dead (still masked) channels.

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctta/detector.hpp"
#include "ctta/errors.hpp"
#include "ctta/network.hpp"

namespace ctta {

struct ShrunkNetwork {
  NetworkState state;
  ChannelMask mask;                  // masks of the layers that were kept dense
  std::vector<std::string> removed;  // considered BN layers whose pruned channels were deleted
};

namespace detail {

inline std::vector<const LayerSpec*> consumers_of(const NetworkSpec& spec, const std::string& name) {
  std::vector<const LayerSpec*> out;
  for (const auto& l : spec.layers)
    for (const auto& in : l.inputs)
      if (in == name) {
        out.push_back(&l);
        break;
      }
  return out;
}

/// True when every path from `name` passes only through ReLU / pooling to
/// input-prunable conv or fc layers (or the detection head).
inline bool channels_removable(const NetworkSpec& spec, const std::string& name) {
  if (name == spec.output() && !spec.head) return false;  // would change the network's output shape
  for (const LayerSpec* c : consumers_of(spec, name)) {
    switch (c->kind) {
      case LayerKind::relu:
      case LayerKind::maxpool:
        if (!channels_removable(spec, c->name)) return false;
        break;
      case LayerKind::conv:
      case LayerKind::fc:
        if (!c->input_prunable) return false;
        break;
      default: return false;
    }
  }
  return true;
}

inline std::vector<std::size_t> kept_indices(const ChannelFlags& alive) {
  std::vector<std::size_t> k;
  for (std::size_t i = 0; i < alive.size(); ++i)
    if (alive[i]) k.push_back(i);
  return k;
}

/// Keeps the listed indices along dimension `dim` (0 = n, 1 = c) of `t`,
/// each index expanding to `block` consecutive entries along that dimension.
inline Tensor4 select(const Tensor4& t, int dim, const std::vector<std::size_t>& keep, std::size_t block = 1) {
  const Shape4 s = t.shape();
  Shape4 o = s;
  if (dim == 0) {
    o.n = keep.size() * block;
  } else {
    o.c = keep.size() * block;
  }
  Tensor4 out(o);
  const std::size_t hw = s.plane();
  for (std::size_t n = 0; n < o.n; ++n)
    for (std::size_t c = 0; c < o.c; ++c) {
      const std::size_t sn = dim == 0 ? keep[n / block] * block + n % block : n;
      const std::size_t sc = dim == 1 ? keep[c / block] * block + c % block : c;
      for (std::size_t i = 0; i < hw; ++i) out.data()[(n * o.c + c) * hw + i] = t.data()[(sn * s.c + sc) * hw + i];
    }
  return out;
}

template <typename T>
std::vector<T> select_vec(const std::vector<T>& v, const std::vector<std::size_t>& keep) {
  std::vector<T> out;
  for (std::size_t i : keep) out.push_back(v[i]);
  return out;
}

/// Drops input channels `keep` from every consumer reachable from `name`.
inline void shrink_consumers(NetworkState& st, NetworkSpec& spec, const std::string& name,
                             const std::vector<std::size_t>& keep, std::size_t plane) {
  const auto plan = shape_plan(st.spec);
  for (const LayerSpec* c : consumers_of(st.spec, name)) {
    LayerSpec& dst = spec.layers[*spec.find(c->name)];
    if (c->kind == LayerKind::relu || c->kind == LayerKind::maxpool) {
      shrink_consumers(st, spec, c->name, keep, plan.at(c->name).plane());
    } else if (c->kind == LayerKind::conv) {
      auto& w = st.params.at(param_name(c->name, "weight"));
      w = select(w, 1, keep);
      dst.in_ch = keep.size();
    } else if (c->kind == LayerKind::fc) {
      auto& w = st.params.at(param_name(c->name, "weight"));
      w = select(w, 1, keep, plane);
      dst.in_ch = keep.size() * plane;
    }
  }
  if (name == st.spec.output() && st.spec.head) {
    const HeadSpec& h = *st.spec.head;
    st.params.at("rpn.weight") = select(st.params.at("rpn.weight"), 1, keep);
    st.params.at("fc1.weight") = select(st.params.at("fc1.weight"), 1, keep, h.roi_size * h.roi_size);
  }
}

}  // namespace detail

/// Builds the smallest network computing the same function as `st` under
/// `mask`. Layers whose channels cannot be deleted keep their mask entry.
inline ShrunkNetwork physically_shrunk(const NetworkState& st, const ChannelMask& mask) {
  mask.check(st.spec);
  NetworkState work = st;
  NetworkSpec spec = st.spec;
  ShrunkNetwork out;
  std::map<std::string, std::vector<double>> g0 = st.has_source_gamma() ? st.source_gamma()
                                                                        : std::map<std::string, std::vector<double>>{};
  for (const auto& lm : mask.layers) {
    const auto keep = detail::kept_indices(lm.alive);
    const bool any_pruned = keep.size() < lm.alive.size();
    if (!any_pruned || keep.empty() || !detail::channels_removable(st.spec, lm.layer)) {
      out.mask.layers.push_back(lm);
      continue;
    }
    const LayerSpec& b = st.spec.layer(lm.layer);
    const std::string producer = b.inputs.front();
    auto& w = work.params.at(param_name(producer, "weight"));
    w = detail::select(w, 0, keep);
    if (auto it = work.params.find(param_name(producer, "bias")); it != work.params.end())
      it->second = detail::select(it->second, 1, keep);
    spec.layers[*spec.find(producer)].out_ch = keep.size();
    for (const char* p : {"gamma", "beta"}) {
      auto& t = work.params.at(param_name(lm.layer, p));
      t = detail::select(t, 1, keep);
    }
    auto& rs = work.running.at(lm.layer);
    rs.mean = detail::select_vec(rs.mean, keep);
    rs.var = detail::select_vec(rs.var, keep);
    LayerSpec& bs = spec.layers[*spec.find(lm.layer)];
    bs.in_ch = bs.out_ch = keep.size();
    if (g0.count(lm.layer)) g0[lm.layer] = detail::select_vec(g0[lm.layer], keep);
    detail::shrink_consumers(work, spec, lm.layer, keep, shape_plan(st.spec).at(lm.layer).plane());
    out.mask.layers.push_back({lm.layer, ChannelFlags(keep.size(), 1)});
    out.removed.push_back(lm.layer);
  }
  validate(spec);
  NetworkState res;
  res.spec = spec;
  res.params = std::move(work.params);
  res.running = std::move(work.running);
  if (!g0.empty()) res.restore_source_gamma(std::move(g0));
  out.state = std::move(res);
  out.mask.check(out.state.spec);
  return out;
}

}  // namespace ctta
