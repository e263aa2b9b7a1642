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

// Synthetic labelled scenes: textured backgrounds with circles, squares and
// triangles. Boxes are exact by construction.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "ctta/boxes.hpp"
#include "ctta/errors.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

enum class ShapeClass : std::size_t { circle = 0, square = 1, triangle = 2 };

inline constexpr std::size_t kMaxShapeClasses = 3;

struct GroundTruth {
  Box box;
  std::size_t label = 0;
  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct SceneSpec {
  std::size_t image_size = 64;
  std::size_t channels = 3;  // 1 = grayscale
  std::size_t num_classes = 3;
  std::size_t min_objects = 1, max_objects = 3;
  double min_size = 14.0, max_size = 26.0;
  double texture_amplitude = 0.08;
  double texture_min_freq = 0.05, texture_max_freq = 0.25;  // cycles per pixel
  double min_contrast = 0.3;
  double max_overlap_iou = 0.1;
  std::uint64_t seed = 1;
};

struct Sample {
  Tensor4 image;  // 1 x C x S x S, values in [0, 1]
  std::vector<GroundTruth> objects;
};

using Dataset = std::vector<Sample>;

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace detail {

inline bool inside_shape(ShapeClass cls, const Box& b, double x, double y) {
  switch (cls) {
    case ShapeClass::circle: {
      const double r = 0.5 * b.width();
      const double dx = x - b.cx(), dy = y - b.cy();
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeClass::square: return x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1;
    case ShapeClass::triangle: {
      // apex at top centre, base along the bottom edge
      if (y < b.y0 || y > b.y1) return false;
      const double t = (y - b.y0) / std::max(b.height(), 1e-9);
      const double half = 0.5 * b.width() * t;
      return std::abs(x - b.cx()) <= half;
    }
  }
  return false;
}

inline bool try_generate(const SceneSpec& spec, std::mt19937_64& rng, Sample& out) {
  const std::size_t S = spec.image_size;
  const std::size_t C = spec.channels;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Tensor4 img(Shape4{1, C, S, S});

  // background: base colour, linear gradient and two sinusoids
  std::array<double, 3> base{}, grad_x{}, grad_y{};
  for (std::size_t c = 0; c < C; ++c) {
    base[c] = 0.25 + 0.5 * u01(rng);
    grad_x[c] = (u01(rng) - 0.5) * 0.2;
    grad_y[c] = (u01(rng) - 0.5) * 0.2;
  }
  struct Wave {
    double fx, fy, phase;
  };
  std::array<Wave, 2> waves{};
  for (auto& w : waves) {
    const double f = spec.texture_min_freq + (spec.texture_max_freq - spec.texture_min_freq) * u01(rng);
    const double a = 2.0 * M_PI * u01(rng);
    w = {f * std::cos(a), f * std::sin(a), 2.0 * M_PI * u01(rng)};
  }
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      double tex = 0.0;
      for (const auto& w : waves)
        tex += 0.5 * spec.texture_amplitude * std::sin(2.0 * M_PI * (w.fx * x + w.fy * y) + w.phase);
      const double gx = static_cast<double>(x) / S - 0.5, gy = static_cast<double>(y) / S - 0.5;
      for (std::size_t c = 0; c < C; ++c)
        img.at(0, c, y, x) = std::clamp(base[c] + grad_x[c] * gx + grad_y[c] * gy + tex, 0.0, 1.0);
    }

  std::uniform_int_distribution<std::size_t> count_dist(spec.min_objects, spec.max_objects);
  std::uniform_int_distribution<std::size_t> class_dist(0, spec.num_classes - 1);
  const std::size_t count = count_dist(rng);
  out.objects.clear();
  for (std::size_t o = 0; o < count; ++o) {
    const std::size_t label = class_dist(rng);
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      const double size = spec.min_size + (spec.max_size - spec.min_size) * u01(rng);
      const double x0 = u01(rng) * (static_cast<double>(S) - size);
      const double y0 = u01(rng) * (static_cast<double>(S) - size);
      const Box b{std::floor(x0), std::floor(y0), std::floor(x0) + std::round(size),
                  std::floor(y0) + std::round(size)};
      if (b.x1 > static_cast<double>(S) || b.y1 > static_cast<double>(S)) continue;
      bool clash = false;
      for (const auto& g : out.objects) clash = clash || iou(g.box, b) > spec.max_overlap_iou;
      if (clash) continue;
      // colour with enough contrast against the local background mean
      std::array<double, 3> local{};
      for (std::size_t c = 0; c < C; ++c) local[c] = img.at(0, c, static_cast<std::size_t>(b.cy()),
                                                            static_cast<std::size_t>(b.cx()));
      std::array<double, 3> col{};
      bool col_ok = false;
      for (int t = 0; t < 20 && !col_ok; ++t) {
        double diff = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          col[c] = u01(rng);
          diff += std::abs(col[c] - local[c]);
        }
        col_ok = diff / static_cast<double>(C) >= spec.min_contrast;
      }
      if (!col_ok) continue;
      // 2x2 supersampled coverage
      const auto cls = static_cast<ShapeClass>(label);
      for (std::size_t y = static_cast<std::size_t>(b.y0); y < static_cast<std::size_t>(b.y1); ++y)
        for (std::size_t x = static_cast<std::size_t>(b.x0); x < static_cast<std::size_t>(b.x1); ++x) {
          int hits = 0;
          for (int sy = 0; sy < 2; ++sy)
            for (int sx = 0; sx < 2; ++sx)
              hits += inside_shape(cls, b, x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy) ? 1 : 0;
          if (!hits) continue;
          const double a = hits / 4.0;
          for (std::size_t c = 0; c < C; ++c) img.at(0, c, y, x) = (1 - a) * img.at(0, c, y, x) + a * col[c];
        }
      out.objects.push_back({b, label});
      placed = true;
    }
    if (!placed) return false;
  }
  out.image = std::move(img);
  return true;
}

}  // namespace detail

/// One image, deterministic in (spec.seed, index).
inline Sample generate_image(const SceneSpec& spec, std::size_t index) {
  if (spec.channels != 1 && spec.channels != 3) throw InvalidInput("scene channels must be 1 or 3");
  if (spec.num_classes == 0 || spec.num_classes > kMaxShapeClasses)
    throw InvalidInput("scene supports 1..3 shape classes");
  if (spec.min_objects > spec.max_objects) throw InvalidInput("scene object range is empty");
  if (!(spec.min_size > 0 && spec.max_size >= spec.min_size && spec.max_size < spec.image_size))
    throw InvalidInput("scene object size range is invalid");
  Sample s;
  for (std::uint64_t sub = 0; sub < 64; ++sub) {
    std::mt19937_64 rng(mix_seed(mix_seed(spec.seed, index), sub));
    if (detail::try_generate(spec, rng, s)) return s;
    log::info(concat("scene ", index, ": placement infeasible, regenerating with sub-seed ", sub + 1));
  }
  throw InvalidInput(concat("scene ", index, ": object placement infeasible"));
}

inline Dataset generate_source(const SceneSpec& spec, std::size_t count, std::size_t first_index = 0) {
  if (count < 1) throw InvalidInput("generate_source: count must be >= 1");
  Dataset d;
  d.reserve(count);
  for (std::size_t i = 0; i < count; ++i) d.push_back(generate_image(spec, first_index + i));
  return d;
}

/// Stacks samples [begin, end) into one N x C x H x W batch.
inline Tensor4 stack_images(const Dataset& data, std::size_t begin, std::size_t end) {
  if (begin >= end || end > data.size()) throw InvalidInput("stack_images: bad range");
  const Shape4 s = data[begin].image.shape();
  std::vector<double> v;
  v.reserve((end - begin) * s.count());
  for (std::size_t i = begin; i < end; ++i) {
    if (data[i].image.shape() != s) throw InvalidInput("stack_images: mixed image shapes");
    v.insert(v.end(), data[i].image.data().begin(), data[i].image.data().end());
  }
  return Tensor4(Shape4{end - begin, s.c, s.h, s.w}, std::move(v));
}

}  // namespace ctta
