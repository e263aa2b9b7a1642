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

// Channel sensitivity weights. A channel's score is its mean absolute
// deviation from the source reference, normalized so the layer mean is 1.

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/source_stats.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

using LayerVectors = std::vector<std::pair<std::string, std::vector<double>>>;

struct LayerSensitivity {
  std::string layer;
  std::vector<double> omega, image, instance;
  friend bool operator==(const LayerSensitivity&, const LayerSensitivity&) = default;
};

struct SensitivityWeights {
  std::vector<LayerSensitivity> layers;

  const LayerSensitivity* find(const std::string& name) const {
    for (const auto& l : layers)
      if (l.layer == name) return &l;
    return nullptr;
  }
  friend bool operator==(const SensitivityWeights&, const SensitivityWeights&) = default;
};

inline constexpr double kDegenerateScoreSum = 1e-12;

/// C * S / sum(S); all ones when the scores carry no signal.
inline std::vector<double> normalize_scores(const std::vector<double>& s) {
  double total = 0.0;
  for (double v : s) total += v;
  if (!(total >= kDegenerateScoreSum)) return std::vector<double>(s.size(), 1.0);
  std::vector<double> w(s.size());
  const double c = static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) w[i] = c * s[i] / total;
  return w;
}

/// Per-channel mean absolute deviation of every row of `x` (R x C x H x W)
/// from `ref` (1 x C x H x W).
inline std::vector<double> deviation_scores(const Tensor4& x, const Tensor4& ref) {
  const Shape4 s = x.shape();
  if (ref.shape().n != 1 || ref.shape().c != s.c || ref.shape().h != s.h || ref.shape().w != s.w)
    throw InvalidInput(concat("sensitivity: feature shape ", s.str(), " does not match reference ",
                              ref.shape().str()));
  std::vector<double> score(s.c, 0.0);
  if (s.n == 0) return score;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      auto a = x.plane(n, c);
      auto b = ref.plane(0, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
      score[c] += acc;
    }
  const double denom = static_cast<double>(s.n * s.plane());
  for (double& v : score) v /= denom;
  return score;
}

namespace detail {
inline void check_layers(const std::vector<std::pair<std::string, Tensor4>>& xs, const SourceStats& stats) {
  if (xs.size() != stats.layers.size())
    throw InvalidInput(concat("sensitivity: got ", xs.size(), " layers, stats have ", stats.layers.size()));
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (xs[i].first != stats.layers[i].layer)
      throw InvalidInput("sensitivity: layer '" + xs[i].first + "' does not match stats");
}
}  // namespace detail

/// Image-level weights from the pre-BN feature maps of the current batch.
inline LayerVectors image_sensitivity(const std::vector<std::pair<std::string, Tensor4>>& features,
                                      const SourceStats& stats) {
  detail::check_layers(features, stats);
  LayerVectors out;
  for (std::size_t i = 0; i < features.size(); ++i)
    out.emplace_back(features[i].first,
                     normalize_scores(deviation_scores(features[i].second, stats.layers[i].feature_mean)));
  return out;
}

/// Instance-level weights from aligned RoI features (M x C x r x r per
/// layer). M = 0 yields all ones.
inline LayerVectors instance_sensitivity(const std::vector<std::pair<std::string, Tensor4>>& roi_features,
                                         const SourceStats& stats) {
  detail::check_layers(roi_features, stats);
  LayerVectors out;
  for (std::size_t i = 0; i < roi_features.size(); ++i)
    out.emplace_back(roi_features[i].first,
                     normalize_scores(deviation_scores(roi_features[i].second, stats.layers[i].roi_mean)));
  return out;
}

inline SensitivityWeights combine(const LayerVectors& image, const LayerVectors& instance) {
  if (image.size() != instance.size()) throw InvalidInput("combine: layer count mismatch");
  SensitivityWeights w;
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (image[i].first != instance[i].first) throw InvalidInput("combine: layer order mismatch");
    if (image[i].second.size() != instance[i].second.size())
      throw InvalidInput("combine: channel count mismatch in '" + image[i].first + "'");
    LayerSensitivity l{image[i].first, {}, image[i].second, instance[i].second};
    l.omega.resize(l.image.size());
    for (std::size_t c = 0; c < l.omega.size(); ++c) l.omega[c] = l.image[c] + l.instance[c];
    w.layers.push_back(std::move(l));
  }
  return w;
}

/// Uniform weights (omega = 1) for every considered layer; plain L1 sparsity.
inline SensitivityWeights uniform_weights(const NetworkSpec& spec, double value = 1.0) {
  SensitivityWeights w;
  for (const auto& name : spec.considered_bn()) {
    const std::size_t c = spec.layer(name).out_ch;
    w.layers.push_back({name, std::vector<double>(c, value), std::vector<double>(c, value / 2),
                        std::vector<double>(c, value / 2)});
  }
  return w;
}

/// Optional exponential smoothing of omega across batches (off by default).
class SensitivitySmoother {
 public:
  explicit SensitivitySmoother(double momentum) : momentum_(momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidInput("sensitivity momentum must lie in [0, 1)");
  }
  SensitivityWeights update(const SensitivityWeights& fresh) {
    if (!state_) {
      state_ = fresh;
      return fresh;
    }
    if (state_->layers.size() != fresh.layers.size()) throw InvalidInput("smoother: layer count changed");
    for (std::size_t i = 0; i < fresh.layers.size(); ++i) {
      auto& s = state_->layers[i];
      const auto& f = fresh.layers[i];
      for (std::size_t c = 0; c < s.omega.size(); ++c) {
        s.image[c] = momentum_ * s.image[c] + (1 - momentum_) * f.image[c];
        s.instance[c] = momentum_ * s.instance[c] + (1 - momentum_) * f.instance[c];
        s.omega[c] = s.image[c] + s.instance[c];
      }
    }
    return *state_;
  }

 private:
  double momentum_;
  std::optional<SensitivityWeights> state_;
};

}  // namespace ctta
