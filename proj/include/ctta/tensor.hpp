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
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctta/errors.hpp"

namespace ctta {

/// Shape and NaN validation on construction and at operator boundaries.
/// On by default; the CLI may switch it off for long runs.
inline std::atomic<bool>& checked_mode_flag() {
  static std::atomic<bool> flag{true};
  return flag;
}
inline bool checked_mode() { return checked_mode_flag().load(std::memory_order_relaxed); }
inline void set_checked_mode(bool on) { checked_mode_flag().store(on); }

struct Shape4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  constexpr std::size_t count() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

  std::string str() const { return concat("(", n, ",", c, ",", h, ",", w, ")"); }
};

/// Per-channel keep flags. An empty span means "no mask".
using ChannelFlags = std::vector<std::uint8_t>;

/// Dense NCHW array of doubles. Value type; operators never mutate their
/// inputs.
class Tensor4 {
 public:
  Tensor4() = default;

  explicit Tensor4(Shape4 shape, double fill = 0.0) : shape_(shape), data_(shape.count(), fill) {}

  Tensor4(Shape4 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.count())
      throw InvalidInput(concat("tensor data length ", data_.size(), " does not match shape ",
                                shape_.str()));
    if (checked_mode()) check_finite("tensor construction");
  }

  static Tensor4 scalar(double v) { return Tensor4(Shape4{1, 1, 1, 1}, v); }

  /// 1 x C x 1 x 1 view of a vector.
  static Tensor4 row(std::span<const double> v) {
    return Tensor4(Shape4{1, v.size(), 1, 1}, std::vector<double>(v.begin(), v.end()));
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[index(n, c, y, x)];
  }
  double at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(n, c, y, x)];
  }

  std::span<double> plane(std::size_t n, std::size_t c) {
    return {data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.plane()};
  }
  std::span<const double> plane(std::size_t n, std::size_t c) const {
    return {data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.plane()};
  }
  std::span<const double> sample(std::size_t n) const {
    const std::size_t len = shape_.c * shape_.plane();
    return {data_.data() + n * len, len};
  }

  double item() const {
    if (data_.size() != 1) throw InvalidInput("item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  /// Same data, different shape (element count must match).
  Tensor4 reshaped(Shape4 s) const {
    if (s.count() != shape_.count())
      throw InvalidInput(concat("cannot reshape ", shape_.str(), " to ", s.str()));
    Tensor4 t;
    t.shape_ = s;
    t.data_ = data_;
    return t;
  }

  Tensor4& operator+=(const Tensor4& o) {
    if (o.shape_ != shape_)
      throw InvalidInput(concat("accumulate shape ", o.shape_.str(), " into ", shape_.str()));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor4& scale(double k) {
    for (double& v : data_) v *= k;
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void check_finite(const char* where) const {
    if (!all_finite()) throw InvalidInput(concat("non-finite value in ", where));
  }

  friend bool operator==(const Tensor4& a, const Tensor4& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape4 shape_{};
  std::vector<double> data_;
};

inline double sum(const Tensor4& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s;
}

inline double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  if (a.shape() != b.shape()) throw InvalidInput("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace ctta
