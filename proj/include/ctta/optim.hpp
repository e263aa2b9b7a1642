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

#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>

#include "ctta/autodiff.hpp"
#include "ctta/errors.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

struct AdamConfig {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over named parameters. Elements can be frozen per step through an
/// activity map; frozen elements keep both their value and their moments.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::size_t steps() const { return t_; }

  /// `active` maps a parameter name to per-element flags; names absent from
  /// the map are fully active.
  void step(std::map<std::string, Tensor4>& params, const ParamGrad& grads,
            const std::map<std::string, ChannelFlags>& active = {}) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      auto pit = params.find(name);
      if (pit == params.end()) throw InvalidInput("optimizer: gradient for unknown parameter '" + name + "'");
      Tensor4& p = pit->second;
      if (p.shape() != g.shape()) throw InvalidInput("optimizer: gradient shape mismatch for '" + name + "'");
      auto& slot = moments_[name];
      if (slot.m.size() != p.size()) {
        slot.m.assign(p.size(), 0.0);
        slot.v.assign(p.size(), 0.0);
      }
      const ChannelFlags* mask = nullptr;
      if (auto ait = active.find(name); ait != active.end()) {
        check_mask(ait->second, p.size(), "optimizer activity");
        mask = &ait->second;
      }
      auto pd = p.data();
      auto gd = g.data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (mask && !mask->empty() && !(*mask)[i]) continue;
        slot.m[i] = cfg_.beta1 * slot.m[i] + (1 - cfg_.beta1) * gd[i];
        slot.v[i] = cfg_.beta2 * slot.v[i] + (1 - cfg_.beta2) * gd[i] * gd[i];
        pd[i] -= cfg_.lr * (slot.m[i] / bc1) / (std::sqrt(slot.v[i] / bc2) + cfg_.eps);
      }
    }
  }

  /// Clears both moments of one element.
  void reset_moments(const std::string& name, std::size_t index) {
    auto it = moments_.find(name);
    if (it == moments_.end() || index >= it->second.m.size()) return;
    it->second.m[index] = 0.0;
    it->second.v[index] = 0.0;
  }

  double first_moment(const std::string& name, std::size_t index) const {
    auto it = moments_.find(name);
    return it == moments_.end() || index >= it->second.m.size() ? 0.0 : it->second.m[index];
  }
  double second_moment(const std::string& name, std::size_t index) const {
    auto it = moments_.find(name);
    return it == moments_.end() || index >= it->second.v.size() ? 0.0 : it->second.v[index];
  }

  friend bool operator==(const Adam& a, const Adam& b) {
    return a.t_ == b.t_ && a.moments_ == b.moments_;
  }

 private:
  struct Moments {
    std::vector<double> m, v;
    friend bool operator==(const Moments&, const Moments&) = default;
  };
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

/// Plain gradient descent, p -= lr * g.
inline void sgd_step(std::map<std::string, Tensor4>& params, const ParamGrad& grads, double lr) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw InvalidInput("optimizer: gradient for unknown parameter '" + name + "'");
    auto pd = it->second.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < pd.size(); ++i) pd[i] -= lr * gd[i];
  }
}

/// Global L2 norm over all gradients.
inline double grad_norm(const ParamGrad& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace ctta
