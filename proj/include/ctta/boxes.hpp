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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

namespace ctta {

/// Axis-aligned box in continuous image coordinates.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return std::max(0.0, x1 - x0); }
  double height() const { return std::max(0.0, y1 - y0); }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline Box clip(Box b, double w, double h) {
  b.x0 = std::clamp(b.x0, 0.0, w);
  b.x1 = std::clamp(b.x1, 0.0, w);
  b.y0 = std::clamp(b.y0, 0.0, h);
  b.y1 = std::clamp(b.y1, 0.0, h);
  return b;
}

/// Greedy NMS. Returns indices of kept boxes in descending score order; ties
/// keep the lower index first. Kept boxes are pairwise at or below
/// `iou_threshold`.
inline std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores,
                                    double iou_threshold, std::size_t max_keep = static_cast<std::size_t>(-1)) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  for (std::size_t i : order) {
    if (keep.size() >= max_keep) break;
    bool ok = true;
    for (std::size_t j : keep)
      if (iou(boxes[i], boxes[j]) > iou_threshold) {
        ok = false;
        break;
      }
    if (ok) keep.push_back(i);
  }
  return keep;
}

/// Regression targets of `target` relative to `ref`: centre offsets in units
/// of the reference size and log size ratios.
struct BoxDelta {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

inline BoxDelta encode(const Box& ref, const Box& target) {
  const double rw = std::max(ref.width(), 1e-6), rh = std::max(ref.height(), 1e-6);
  return {(target.cx() - ref.cx()) / rw, (target.cy() - ref.cy()) / rh,
          std::log(std::max(target.width(), 1e-6) / rw), std::log(std::max(target.height(), 1e-6) / rh)};
}

inline Box decode(const Box& ref, const BoxDelta& d) {
  constexpr double kMaxLog = 3.0;
  const double rw = ref.width(), rh = ref.height();
  const double cx = ref.cx() + d.dx * rw, cy = ref.cy() + d.dy * rh;
  const double w = rw * std::exp(std::clamp(d.dw, -kMaxLog, kMaxLog));
  const double h = rh * std::exp(std::clamp(d.dh, -kMaxLog, kMaxLog));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace ctta
