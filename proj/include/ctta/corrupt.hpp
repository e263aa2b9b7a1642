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

// Toy-scale image corruptions: motion blur, additive noise, defocus blur and
// contrast loss, each with severities 1..5 (0 = identity).

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

enum class Corruption { motion, noise, defocus, contrast };

inline Corruption parse_corruption(const std::string& s) {
  if (s == "motion") return Corruption::motion;
  if (s == "noise") return Corruption::noise;
  if (s == "defocus") return Corruption::defocus;
  if (s == "contrast") return Corruption::contrast;
  throw InvalidInput("unknown corruption kind '" + s + "'");
}

inline const char* to_string(Corruption c) {
  switch (c) {
    case Corruption::motion: return "motion";
    case Corruption::noise: return "noise";
    case Corruption::defocus: return "defocus";
    case Corruption::contrast: return "contrast";
  }
  return "?";
}

struct CorruptionLevels {
  std::array<double, 5> noise_sigma{0.04, 0.08, 0.12, 0.18, 0.26};
  std::array<double, 5> contrast_factor{0.75, 0.6, 0.45, 0.3, 0.2};
  std::array<double, 5> defocus_radius{1.0, 1.5, 2.0, 2.5, 3.0};
  std::array<int, 5> motion_length{3, 5, 7, 9, 11};
};

inline const CorruptionLevels& corruption_levels() {
  static const CorruptionLevels levels;
  return levels;
}

/// Normalized disk kernel of the given radius, side 2*ceil(r)+1.
inline std::vector<double> disk_kernel(double radius, int& side) {
  const int r = static_cast<int>(std::ceil(radius));
  side = 2 * r + 1;
  std::vector<double> k(static_cast<std::size_t>(side * side), 0.0);
  double total = 0.0;
  for (int y = -r; y <= r; ++y)
    for (int x = -r; x <= r; ++x)
      if (x * x + y * y <= radius * radius + 1e-9) {
        k[static_cast<std::size_t>((y + r) * side + x + r)] = 1.0;
        total += 1.0;
      }
  for (double& v : k) v /= total;
  return k;
}

namespace detail {
// Correlation with edge replication; the kernel is (kh x kw), centred.
inline Tensor4 filter2d(const Tensor4& img, const std::vector<double>& k, int kh, int kw) {
  const Shape4 s = img.shape();
  Tensor4 out(s);
  const int ry = kh / 2, rx = kw / 2;
  const int H = static_cast<int>(s.h), W = static_cast<int>(s.w);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      auto src = img.plane(n, c);
      auto dst = out.plane(n, c);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double acc = 0.0;
          for (int dy = -ry; dy <= ry; ++dy) {
            const int yy = std::clamp(y + dy, 0, H - 1);
            for (int dx = -rx; dx <= rx; ++dx) {
              const double w = k[static_cast<std::size_t>((dy + ry) * kw + dx + rx)];
              if (w == 0.0) continue;
              const int xx = std::clamp(x + dx, 0, W - 1);
              acc += w * src[static_cast<std::size_t>(yy * W + xx)];
            }
          }
          dst[static_cast<std::size_t>(y * W + x)] = acc;
        }
    }
  return out;
}
}  // namespace detail

/// Pure function of (image, kind, severity, seed). Pixel range [0, 1] is
/// preserved. Severity 0 returns the image unchanged.
inline Tensor4 corrupt(const Tensor4& image, Corruption kind, int severity, std::uint64_t seed = 0) {
  if (severity < 0 || severity > 5) throw InvalidInput("corruption severity must lie in 0..5");
  if (severity == 0) return image;
  const auto& lv = corruption_levels();
  const std::size_t s = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case Corruption::noise: {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> dist(0.0, lv.noise_sigma[s]);
      Tensor4 out = image;
      for (double& v : out.data()) v = std::clamp(v + dist(rng), 0.0, 1.0);
      return out;
    }
    case Corruption::contrast: {
      Tensor4 out = image;
      const Shape4 sh = image.shape();
      for (std::size_t n = 0; n < sh.n; ++n) {
        double mean = 0.0;
        for (double v : image.sample(n)) mean += v;
        mean /= static_cast<double>(sh.c * sh.plane());
        for (std::size_t c = 0; c < sh.c; ++c)
          for (double& v : out.plane(n, c)) v = std::clamp((v - mean) * lv.contrast_factor[s] + mean, 0.0, 1.0);
      }
      return out;
    }
    case Corruption::defocus: {
      int side = 0;
      auto k = disk_kernel(lv.defocus_radius[s], side);
      return detail::filter2d(image, k, side, side);
    }
    case Corruption::motion: {
      const int len = lv.motion_length[s];
      std::vector<double> k(static_cast<std::size_t>(len), 1.0 / len);
      return detail::filter2d(image, k, 1, len);
    }
  }
  throw InvalidInput("unknown corruption kind");
}

}  // namespace ctta
