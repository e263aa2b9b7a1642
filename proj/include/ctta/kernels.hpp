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

// Forward and reverse kernels for the operator set used by the detector.
// Every function here is pure: inputs are read-only, results are returned
// by value. The tape in autodiff.hpp wires these together.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

// --- multiply-accumulate instrumentation -----------------------------------

namespace detail {
inline thread_local std::uint64_t* mac_sink = nullptr;
inline void count_macs(std::uint64_t n) {
  if (mac_sink) *mac_sink += n;
}
}  // namespace detail

/// Counts forward conv/fc multiply-accumulates executed on this thread while
/// alive. Padded taps are counted: the counter mirrors the nominal
/// k*k*Cin*Cout*Hout*Wout loop volume over the channel pairs actually visited.
class MacCounter {
 public:
  MacCounter() : prev_(detail::mac_sink) { detail::mac_sink = &count_; }
  ~MacCounter() { detail::mac_sink = prev_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* prev_;
};

// --- helpers ---------------------------------------------------------------

inline bool kept(std::span<const std::uint8_t> mask, std::size_t i) {
  return mask.empty() || mask[i] != 0;
}

inline void check_mask(std::span<const std::uint8_t> mask, std::size_t channels, const char* what) {
  if (!mask.empty() && mask.size() != channels)
    throw InvalidInput(concat(what, " mask length ", mask.size(), " != channel count ", channels));
}

inline std::size_t conv_out_size(std::size_t in, std::size_t k, int stride, int pad) {
  const long v = (static_cast<long>(in) + 2L * pad - static_cast<long>(k));
  if (v < 0) throw InvalidInput("convolution kernel larger than padded input");
  return static_cast<std::size_t>(v / stride + 1);
}

namespace detail {
// Range of output columns whose input column ox*stride - pad + kx is in [0, in_w).
inline void valid_range(std::size_t out_len, std::size_t in_len, int stride, int pad, int k_off,
                        std::size_t& lo, std::size_t& hi) {
  long l = 0;
  const long shift = static_cast<long>(pad) - k_off;
  if (shift > 0) l = (shift + stride - 1) / stride;
  long h = (static_cast<long>(in_len) - 1 + shift);
  h = h < 0 ? -1 : h / stride;
  h = std::min<long>(h, static_cast<long>(out_len) - 1);
  lo = static_cast<std::size_t>(l);
  hi = h < l ? lo : static_cast<std::size_t>(h + 1);
}
}  // namespace detail

// --- convolution -----------------------------------------------------------

namespace detail {

// Active input channels, in order.
inline std::vector<std::size_t> active_channels(std::span<const std::uint8_t> mask, std::size_t c) {
  std::vector<std::size_t> out;
  out.reserve(c);
  for (std::size_t i = 0; i < c; ++i)
    if (kept(mask, i)) out.push_back(i);
  return out;
}

struct ConvGeometry {
  std::size_t k, oh, ow, in_h, in_w;
  int stride, pad;
  std::size_t positions() const { return oh * ow; }
};

// Unfolds sample n into rows (ci, ky, kx) x columns (oy, ox); padding is zero.
inline void im2col(const Tensor4& x, std::size_t n, const std::vector<std::size_t>& channels,
                   const ConvGeometry& g, std::vector<double>& col) {
  const std::size_t P = g.positions();
  col.assign(channels.size() * g.k * g.k * P, 0.0);
  std::size_t r = 0;
  for (std::size_t ci : channels) {
    const double* ip = x.plane(n, ci).data();
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
        double* dst = col.data() + r * P;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + static_cast<long>(ky) - g.pad;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          const double* irow = ip + static_cast<std::size_t>(iy) * g.in_w;
          double* drow = dst + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride + static_cast<long>(kx) - g.pad;
            if (ix >= 0 && ix < static_cast<long>(g.in_w)) drow[ox] = irow[ix];
          }
        }
      }
  }
}

// Adds the columns back into the input planes of sample n.
inline void col2im_add(const std::vector<double>& col, const std::vector<std::size_t>& channels,
                       const ConvGeometry& g, Tensor4& gx, std::size_t n) {
  const std::size_t P = g.positions();
  std::size_t r = 0;
  for (std::size_t ci : channels) {
    double* xp = gx.plane(n, ci).data();
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
        const double* src = col.data() + r * P;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + static_cast<long>(ky) - g.pad;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          double* xrow = xp + static_cast<std::size_t>(iy) * g.in_w;
          const double* srow = src + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride + static_cast<long>(kx) - g.pad;
            if (ix >= 0 && ix < static_cast<long>(g.in_w)) xrow[ix] += srow[ox];
          }
        }
      }
  }
}

// Dot product with independent partial sums so the compiler can vectorize.
inline double dot(const double* a, const double* b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  double s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace detail

/// Cross-correlation. `weight` is (Cout, Cin, k, k). Masked input channels
/// contribute nothing; masked output channels are exact zero planes (no bias).
inline Tensor4 conv2d_forward(const Tensor4& x, const Tensor4& weight, std::span<const double> bias,
                              int stride, int pad, std::span<const std::uint8_t> in_mask = {},
                              std::span<const std::uint8_t> out_mask = {}) {
  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  if (stride <= 0 || pad < 0) throw InvalidInput("conv2d: stride must be positive, pad >= 0");
  if (ws.c != xs.c)
    throw InvalidInput(concat("conv2d: weight expects ", ws.c, " input channels, got ", xs.c));
  if (ws.h != ws.w) throw InvalidInput("conv2d: only square kernels are supported");
  if (!bias.empty() && bias.size() != ws.n) throw InvalidInput("conv2d: bias length mismatch");
  check_mask(in_mask, xs.c, "conv2d input");
  check_mask(out_mask, ws.n, "conv2d output");

  const std::size_t k = ws.h;
  const detail::ConvGeometry g{k, conv_out_size(xs.h, k, stride, pad), conv_out_size(xs.w, k, stride, pad),
                               xs.h, xs.w, stride, pad};
  Tensor4 out(Shape4{xs.n, ws.n, g.oh, g.ow});
  const auto cin = detail::active_channels(in_mask, xs.c);
  const auto cout = detail::active_channels(out_mask, ws.n);
  const std::size_t P = g.positions(), kk = k * k;
  std::vector<double> col;
  for (std::size_t n = 0; n < xs.n; ++n) {
    detail::im2col(x, n, cin, g, col);
    for (std::size_t co : cout) {
      double* op = out.plane(n, co).data();
      if (!bias.empty()) std::fill(op, op + P, bias[co]);
      const double* wrow = weight.data().data() + co * xs.c * kk;
      std::size_t r = 0;
      for (std::size_t ci : cin)
        for (std::size_t t = 0; t < kk; ++t, ++r) {
          const double wv = wrow[ci * kk + t];
          if (wv != 0.0) detail::axpy(wv, col.data() + r * P, op, P);
        }
    }
  }
  detail::count_macs(static_cast<std::uint64_t>(xs.n) * cin.size() * cout.size() * kk * P);
  return out;
}

/// Gradient with respect to the convolution input.
inline Tensor4 conv2d_backward_input(const Tensor4& grad_out, const Tensor4& weight, Shape4 in_shape,
                                     int stride, int pad, std::span<const std::uint8_t> in_mask = {},
                                     std::span<const std::uint8_t> out_mask = {}) {
  const Shape4 ws = weight.shape();
  const Shape4 gs = grad_out.shape();
  const std::size_t k = ws.h;
  const detail::ConvGeometry g{k, gs.h, gs.w, in_shape.h, in_shape.w, stride, pad};
  Tensor4 gx(in_shape);
  const auto cin = detail::active_channels(in_mask, in_shape.c);
  const auto cout = detail::active_channels(out_mask, ws.n);
  const std::size_t P = g.positions(), kk = k * k;
  std::vector<double> col;
  for (std::size_t n = 0; n < gs.n; ++n) {
    col.assign(cin.size() * kk * P, 0.0);
    for (std::size_t co : cout) {
      const double* gp = grad_out.plane(n, co).data();
      const double* wrow = weight.data().data() + co * in_shape.c * kk;
      std::size_t r = 0;
      for (std::size_t ci : cin)
        for (std::size_t t = 0; t < kk; ++t, ++r) {
          const double wv = wrow[ci * kk + t];
          if (wv != 0.0) detail::axpy(wv, gp, col.data() + r * P, P);
        }
    }
    detail::col2im_add(col, cin, g, gx, n);
  }
  return gx;
}

/// Gradient with respect to the convolution weight. Masked filter taps get 0.
inline Tensor4 conv2d_backward_weight(const Tensor4& grad_out, const Tensor4& x, Shape4 weight_shape,
                                      int stride, int pad, std::span<const std::uint8_t> in_mask = {},
                                      std::span<const std::uint8_t> out_mask = {}) {
  const Shape4 xs = x.shape();
  const Shape4 gs = grad_out.shape();
  const std::size_t k = weight_shape.h;
  const detail::ConvGeometry g{k, gs.h, gs.w, xs.h, xs.w, stride, pad};
  Tensor4 gw(weight_shape);
  const auto cin = detail::active_channels(in_mask, xs.c);
  const auto cout = detail::active_channels(out_mask, weight_shape.n);
  const std::size_t P = g.positions(), kk = k * k;
  std::vector<double> col;
  for (std::size_t n = 0; n < xs.n; ++n) {
    detail::im2col(x, n, cin, g, col);
    for (std::size_t co : cout) {
      const double* gp = grad_out.plane(n, co).data();
      double* wrow = gw.data().data() + co * xs.c * kk;
      std::size_t r = 0;
      for (std::size_t ci : cin)
        for (std::size_t t = 0; t < kk; ++t, ++r) wrow[ci * kk + t] += detail::dot(gp, col.data() + r * P, P);
    }
  }
  return gw;
}

/// Per-output-channel sum of the gradient (bias gradient).
inline std::vector<double> channel_sums(const Tensor4& g, std::span<const std::uint8_t> mask = {}) {
  std::vector<double> s(g.shape().c, 0.0);
  for (std::size_t n = 0; n < g.shape().n; ++n)
    for (std::size_t c = 0; c < g.shape().c; ++c) {
      if (!kept(mask, c)) continue;
      for (double v : g.plane(n, c)) s[c] += v;
    }
  return s;
}

// --- batch normalization (inference statistics) ----------------------------

struct BnParams {
  std::span<const double> gamma, beta, mean, var;
  double eps = 1e-5;
};

inline void check_bn(const Tensor4& x, const BnParams& p) {
  const std::size_t c = x.shape().c;
  if (p.gamma.size() != c || p.beta.size() != c || p.mean.size() != c || p.var.size() != c)
    throw InvalidInput(concat("batch norm: per-channel vectors must have length ", c));
  if (!(p.eps > 0.0)) throw InvalidInput("batch norm: eps must be positive");
  for (double v : p.var)
    if (v < 0.0) throw InvalidInput("batch norm: negative running variance");
}

/// out = gamma * (x - mean) / sqrt(var + eps) + beta. Channels with a false
/// `alive` flag are removed from the graph: their output is exactly zero.
inline Tensor4 bn_forward(const Tensor4& x, const BnParams& p, std::span<const std::uint8_t> alive = {}) {
  check_bn(x, p);
  check_mask(alive, x.shape().c, "batch norm");
  Tensor4 out(x.shape());
  for (std::size_t n = 0; n < x.shape().n; ++n)
    for (std::size_t c = 0; c < x.shape().c; ++c) {
      if (!kept(alive, c)) continue;
      const double inv = 1.0 / std::sqrt(p.var[c] + p.eps);
      const double a = p.gamma[c] * inv;
      const double b = p.beta[c] - p.mean[c] * a;
      std::span<const double> xp = x.plane(n, c);
      std::span<double> op = out.plane(n, c);
      for (std::size_t i = 0; i < xp.size(); ++i) op[i] = a * xp[i] + b;
    }
  return out;
}

struct BnGrads {
  Tensor4 input;
  std::vector<double> gamma, beta;
};

inline BnGrads bn_backward(const Tensor4& grad_out, const Tensor4& x, const BnParams& p,
                           std::span<const std::uint8_t> alive = {}) {
  const std::size_t C = x.shape().c;
  BnGrads g{Tensor4(x.shape()), std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  for (std::size_t c = 0; c < C; ++c) {
    if (!kept(alive, c)) continue;
    const double inv = 1.0 / std::sqrt(p.var[c] + p.eps);
    const double a = p.gamma[c] * inv;
    double sg = 0.0, sb = 0.0;
    for (std::size_t n = 0; n < x.shape().n; ++n) {
      std::span<const double> gp = grad_out.plane(n, c);
      std::span<const double> xp = x.plane(n, c);
      std::span<double> gx = g.input.plane(n, c);
      for (std::size_t i = 0; i < xp.size(); ++i) {
        gx[i] = a * gp[i];
        sg += gp[i] * (xp[i] - p.mean[c]) * inv;
        sb += gp[i];
      }
    }
    g.gamma[c] = sg;
    g.beta[c] = sb;
  }
  return g;
}

// --- pointwise and pooling -------------------------------------------------

inline Tensor4 relu_forward(const Tensor4& x) {
  Tensor4 out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
  return out;
}

inline Tensor4 relu_backward(const Tensor4& grad_out, const Tensor4& x) {
  Tensor4 g(x.shape());
  auto src = x.data();
  auto go = grad_out.data();
  auto dst = g.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0 ? go[i] : 0.0;
  return g;
}

struct MaxPoolResult {
  Tensor4 out;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// Non-overlapping-or-strided max pooling without padding. Ties resolve to
/// the first element in row-major window order.
inline MaxPoolResult maxpool_forward(const Tensor4& x, int kernel, int stride) {
  if (kernel <= 0 || stride <= 0) throw InvalidInput("maxpool: kernel and stride must be positive");
  const Shape4 s = x.shape();
  const std::size_t oh = conv_out_size(s.h, kernel, stride, 0);
  const std::size_t ow = conv_out_size(s.w, kernel, stride, 0);
  MaxPoolResult r{Tensor4(Shape4{s.n, s.c, oh, ow}), {}};
  r.argmax.resize(r.out.size());
  std::size_t o = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * s.plane();
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t arg = 0;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
              const std::size_t idx = base + (oy * stride + ky) * s.w + ox * stride + kx;
              const double v = x.data()[idx];
              if (v > best) {
                best = v;
                arg = idx;
              }
            }
          r.out.data()[o] = best;
          r.argmax[o] = arg;
        }
    }
  return r;
}

inline Tensor4 maxpool_backward(const Tensor4& grad_out, const std::vector<std::size_t>& argmax,
                                Shape4 in_shape) {
  Tensor4 g(in_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) g.data()[argmax[o]] += grad_out.data()[o];
  return g;
}

// --- fully connected -------------------------------------------------------

/// Rows of `x` (N x F, any trailing layout flattened) times weight^T + bias.
/// `weight` is (O, F, 1, 1). Masked input features are skipped.
inline Tensor4 fc_forward(const Tensor4& x, const Tensor4& weight, std::span<const double> bias,
                          std::span<const std::uint8_t> in_mask = {}) {
  const std::size_t rows = x.shape().n;
  const std::size_t feat = x.shape().c * x.shape().plane();
  const std::size_t outs = weight.shape().n;
  if (weight.shape().c * weight.shape().plane() != feat)
    throw InvalidInput(concat("fc: weight expects ", weight.shape().c, " features, got ", feat));
  if (!bias.empty() && bias.size() != outs) throw InvalidInput("fc: bias length mismatch");
  check_mask(in_mask, feat, "fc input");
  Tensor4 out(Shape4{rows, outs, 1, 1});
  const auto active = detail::active_channels(in_mask, feat);
  // feature-major copy of the weight so the inner loop runs over outputs
  std::vector<double> wt(feat * outs);
  for (std::size_t o = 0; o < outs; ++o)
    for (std::size_t f = 0; f < feat; ++f) wt[f * outs + o] = weight.data()[o * feat + f];
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.sample(r).data();
    double* orow = out.data().data() + r * outs;
    if (!bias.empty()) std::copy(bias.begin(), bias.end(), orow);
    for (std::size_t f : active)
      if (xr[f] != 0.0) detail::axpy(xr[f], wt.data() + f * outs, orow, outs);
  }
  detail::count_macs(static_cast<std::uint64_t>(rows) * active.size() * outs);
  return out;
}

inline Tensor4 fc_backward_input(const Tensor4& grad_out, const Tensor4& weight, Shape4 in_shape,
                                 std::span<const std::uint8_t> in_mask = {}) {
  const std::size_t rows = in_shape.n;
  const std::size_t feat = in_shape.c * in_shape.plane();
  const std::size_t outs = weight.shape().n;
  Tensor4 g(in_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double* gr = g.data().data() + r * feat;
    for (std::size_t o = 0; o < outs; ++o) {
      const double go = grad_out.data()[r * outs + o];
      if (go == 0.0) continue;
      const double* wr = weight.data().data() + o * feat;
      for (std::size_t f = 0; f < feat; ++f) gr[f] += go * wr[f];
    }
    if (!in_mask.empty())
      for (std::size_t f = 0; f < feat; ++f)
        if (!in_mask[f]) gr[f] = 0.0;
  }
  return g;
}

inline Tensor4 fc_backward_weight(const Tensor4& grad_out, const Tensor4& x, Shape4 weight_shape,
                                  std::span<const std::uint8_t> in_mask = {}) {
  const std::size_t rows = x.shape().n;
  const std::size_t feat = x.shape().c * x.shape().plane();
  const std::size_t outs = weight_shape.n;
  Tensor4 g(weight_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const double> xr = x.sample(r);
    for (std::size_t o = 0; o < outs; ++o) {
      const double go = grad_out.data()[r * outs + o];
      if (go == 0.0) continue;
      double* gw = g.data().data() + o * feat;
      for (std::size_t f = 0; f < feat; ++f)
        if (kept(in_mask, f)) gw[f] += go * xr[f];
    }
  }
  return g;
}

// --- softmax ---------------------------------------------------------------

/// Row-wise softmax over channels [begin, begin+count) of an N x C x 1 x 1
/// tensor; returns N x count.
inline Tensor4 softmax_rows(const Tensor4& logits, std::size_t begin, std::size_t count) {
  const std::size_t rows = logits.shape().n;
  const std::size_t width = logits.shape().c;
  if (begin + count > width) throw InvalidInput("softmax: column range exceeds width");
  Tensor4 p(Shape4{rows, count, 1, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * width + begin;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < count; ++j) m = std::max(m, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < count; ++j) {
      const double e = std::exp(z[j] - m);
      p.data()[r * count + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < count; ++j) p.data()[r * count + j] /= s;
  }
  return p;
}

// --- spatial reductions ----------------------------------------------------

/// N x C x H x W -> N x C x 1 x 1, mean over each plane.
inline Tensor4 spatial_mean(const Tensor4& x) {
  const Shape4 s = x.shape();
  Tensor4 out(Shape4{s.n, s.c, 1, 1});
  const double inv = s.plane() ? 1.0 / static_cast<double>(s.plane()) : 0.0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (double v : x.plane(n, c)) acc += v;
      out.at(n, c, 0, 0) = acc * inv;
    }
  return out;
}

/// N x C x H x W -> 1 x C x 1 x 1, mean over batch and space.
inline Tensor4 global_channel_mean(const Tensor4& x) {
  const Shape4 s = x.shape();
  Tensor4 out(Shape4{1, s.c, 1, 1});
  const double denom = static_cast<double>(s.n * s.plane());
  if (denom == 0.0) return out;
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (std::size_t n = 0; n < s.n; ++n)
      for (double v : x.plane(n, c)) acc += v;
    out.at(0, c, 0, 0) = acc / denom;
  }
  return out;
}

// --- RoI-Align ---------------------------------------------------------------

/// Box in feature-map coordinates; a feature pixel (y, x) covers
/// [y, y+1) x [x, x+1).
struct RoiBox {
  std::size_t batch = 0;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct RoiAlignResult {
  Tensor4 features;               // M x C x out_h x out_w
  std::vector<std::size_t> kept;  // index into the input box list, per output row
  std::vector<RoiBox> clamped;    // clamped boxes, per output row
};

namespace detail {
struct BilinearTap {
  std::size_t y0, y1, x0, x1;
  double wy, wx;
};

inline BilinearTap bilinear_tap(double y, double x, std::size_t h, std::size_t w) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  BilinearTap t;
  t.y0 = static_cast<std::size_t>(std::floor(y));
  t.x0 = static_cast<std::size_t>(std::floor(x));
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.wy = y - static_cast<double>(t.y0);
  t.wx = x - static_cast<double>(t.x0);
  return t;
}
}  // namespace detail

/// One bilinear sample at the centre of each output cell. Boxes are clamped
/// to the map; degenerate boxes are dropped with a warning.
inline RoiAlignResult roi_align_forward(const Tensor4& feature, std::span<const RoiBox> boxes,
                                        std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw InvalidInput("roi_align: output size must be >= 1");
  const Shape4 fs = feature.shape();
  RoiAlignResult r;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    RoiBox b = boxes[i];
    if (b.batch >= fs.n) throw InvalidInput(concat("roi_align: batch index ", b.batch, " out of range"));
    b.x0 = std::clamp(b.x0, 0.0, static_cast<double>(fs.w));
    b.x1 = std::clamp(b.x1, 0.0, static_cast<double>(fs.w));
    b.y0 = std::clamp(b.y0, 0.0, static_cast<double>(fs.h));
    b.y1 = std::clamp(b.y1, 0.0, static_cast<double>(fs.h));
    if (!(b.x1 > b.x0) || !(b.y1 > b.y0)) {
      log::warn(concat("roi_align: skipping degenerate box #", i));
      continue;
    }
    r.kept.push_back(i);
    r.clamped.push_back(b);
  }
  r.features = Tensor4(Shape4{r.kept.size(), fs.c, out_h, out_w});
  for (std::size_t m = 0; m < r.clamped.size(); ++m) {
    const RoiBox& b = r.clamped[m];
    const double ch = (b.y1 - b.y0) / static_cast<double>(out_h);
    const double cw = (b.x1 - b.x0) / static_cast<double>(out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto t = detail::bilinear_tap(b.y0 + (oy + 0.5) * ch - 0.5,
                                            b.x0 + (ox + 0.5) * cw - 0.5, fs.h, fs.w);
        for (std::size_t c = 0; c < fs.c; ++c) {
          std::span<const double> p = feature.plane(b.batch, c);
          const double top = p[t.y0 * fs.w + t.x0] * (1 - t.wx) + p[t.y0 * fs.w + t.x1] * t.wx;
          const double bot = p[t.y1 * fs.w + t.x0] * (1 - t.wx) + p[t.y1 * fs.w + t.x1] * t.wx;
          r.features.at(m, c, oy, ox) = top * (1 - t.wy) + bot * t.wy;
        }
      }
  }
  return r;
}

inline Tensor4 roi_align_backward(const Tensor4& grad_out, std::span<const RoiBox> clamped,
                                  Shape4 feature_shape) {
  const std::size_t out_h = grad_out.shape().h, out_w = grad_out.shape().w;
  const Shape4& fs = feature_shape;
  Tensor4 g(fs);
  for (std::size_t m = 0; m < clamped.size(); ++m) {
    const RoiBox& b = clamped[m];
    const double ch = (b.y1 - b.y0) / static_cast<double>(out_h);
    const double cw = (b.x1 - b.x0) / static_cast<double>(out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto t = detail::bilinear_tap(b.y0 + (oy + 0.5) * ch - 0.5,
                                            b.x0 + (ox + 0.5) * cw - 0.5, fs.h, fs.w);
        for (std::size_t c = 0; c < fs.c; ++c) {
          const double go = grad_out.at(m, c, oy, ox);
          if (go == 0.0) continue;
          std::span<double> p = g.plane(b.batch, c);
          p[t.y0 * fs.w + t.x0] += go * (1 - t.wy) * (1 - t.wx);
          p[t.y0 * fs.w + t.x1] += go * (1 - t.wy) * t.wx;
          p[t.y1 * fs.w + t.x0] += go * t.wy * (1 - t.wx);
          p[t.y1 * fs.w + t.x1] += go * t.wy * t.wx;
        }
      }
  }
  return g;
}

}  // namespace ctta
