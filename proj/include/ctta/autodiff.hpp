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

// Eager reverse-mode differentiation over Tensor4 values.
//
// Operations execute immediately and push a node holding the result and a
// closure that maps the node's output gradient to gradients of its parents.
// Nodes are numbered in execution order, so reversal walks ids downward.
// Nodes with no trainable ancestor carry no closure and are never visited.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/kernels.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

/// Gradients keyed by parameter name. Only trainable parameters that were
/// reached by the reverse pass appear.
using ParamGrad = std::map<std::string, Tensor4>;

class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor4& grad, Tape& tape)>;

  Var constant(Tensor4 value) { return push(std::move(value), false, {}, {}); }

  /// Leaf for a named parameter. Gradients are collected only when `trainable`.
  Var parameter(const std::string& name, Tensor4 value, bool trainable) {
    Var v = push(std::move(value), trainable, {}, {});
    if (trainable) nodes_[v.id].param = name;
    return v;
  }

  /// Records an executed operation. The closure is kept only if a parent
  /// requires a gradient.
  Var record(Tensor4 value, std::span<const Var> parents, BackwardFn fn) {
    bool req = false;
    for (Var p : parents) req = req || requires_grad(p);
    return push(std::move(value), req, req ? std::move(fn) : BackwardFn{}, {});
  }
  Var record(Tensor4 value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(fn));
  }

  const Tensor4& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Adds `g` into the gradient slot of `v` (no-op when `v` is not on a
  /// trainable path).
  void accumulate(Var v, Tensor4&& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (checked_mode() && g.shape() != n.value.shape())
      throw InvalidInput(concat("gradient shape ", g.shape().str(), " != value shape ",
                                n.value.shape().str()));
    if (n.grad) {
      *n.grad += g;
    } else {
      n.grad = std::move(g);
    }
  }

  /// Reverse pass from a scalar node. The tape may be reversed once.
  ParamGrad backward(Var loss, double seed = 1.0) {
    if (consumed_) throw StateError("tape already consumed by a previous backward pass");
    consumed_ = true;
    if (node(loss).value.size() != 1) throw InvalidInput("backward: loss must be a scalar");
    ParamGrad grads;
    if (!node(loss).requires_grad) return grads;
    node(loss).grad = Tensor4(node(loss).value.shape(), seed);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad) continue;
      if (n.fn) {
        Tensor4 g = std::move(*n.grad);
        n.grad.reset();
        n.fn(g, *this);
      } else if (!n.param.empty()) {
        auto it = grads.find(n.param);
        if (it == grads.end()) {
          grads.emplace(n.param, std::move(*n.grad));
        } else {
          it->second += *n.grad;
        }
        n.grad.reset();
      }
    }
    return grads;
  }

 private:
  struct Node {
    Tensor4 value;
    bool requires_grad = false;
    BackwardFn fn;
    std::optional<Tensor4> grad;
    std::string param;
  };

  Var push(Tensor4 value, bool req, BackwardFn fn, std::string param) {
    if (consumed_) throw StateError("cannot record on a consumed tape");
    nodes_.push_back(Node{std::move(value), req, std::move(fn), std::nullopt, std::move(param)});
    return Var{nodes_.size() - 1};
  }
  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw InvalidInput("unknown tape variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw InvalidInput("unknown tape variable");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Differentiable operators. Each mirrors a kernel in kernels.hpp.
namespace ad {

inline std::vector<double> to_vec(const Tensor4& t) { return t.values(); }

struct ConvArgs {
  int stride = 1;
  int pad = 0;
  ChannelFlags in_mask;   // empty = unmasked
  ChannelFlags out_mask;  // empty = unmasked
};

/// `bias` may be an invalid Var (no bias).
inline Var conv2d(Tape& tape, Var x, Var weight, Var bias, const ConvArgs& args) {
  const Tensor4& xv = tape.value(x);
  const Tensor4& wv = tape.value(weight);
  std::vector<double> b;
  if (bias.valid()) b = tape.value(bias).values();
  Tensor4 out = conv2d_forward(xv, wv, b, args.stride, args.pad, args.in_mask, args.out_mask);
  const bool has_bias = bias.valid();
  return tape.record(std::move(out), {x, weight, has_bias ? bias : x},
                     [x, weight, bias, has_bias, args](const Tensor4& g, Tape& t) {
                       const Tensor4& xv = t.value(x);
                       const Tensor4& wv = t.value(weight);
                       if (t.requires_grad(x))
                         t.accumulate(x, conv2d_backward_input(g, wv, xv.shape(), args.stride,
                                                               args.pad, args.in_mask, args.out_mask));
                       if (t.requires_grad(weight))
                         t.accumulate(weight, conv2d_backward_weight(g, xv, wv.shape(), args.stride,
                                                                     args.pad, args.in_mask,
                                                                     args.out_mask));
                       if (has_bias && t.requires_grad(bias))
                         t.accumulate(bias, Tensor4::row(channel_sums(g, args.out_mask)));
                     });
}

/// Inference-statistics batch norm; gamma/beta are 1 x C x 1 x 1 vars,
/// running statistics are constants.
inline Var batch_norm(Tape& tape, Var x, Var gamma, Var beta, std::vector<double> mean,
                      std::vector<double> var, double eps, ChannelFlags alive = {}) {
  const Tensor4& xv = tape.value(x);
  BnParams p{tape.value(gamma).data(), tape.value(beta).data(), mean, var, eps};
  Tensor4 out = bn_forward(xv, p, alive);
  return tape.record(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, mean = std::move(mean), var = std::move(var), eps,
                      alive = std::move(alive)](const Tensor4& g, Tape& t) {
                       BnParams p{t.value(gamma).data(), t.value(beta).data(), mean, var, eps};
                       BnGrads bg = bn_backward(g, t.value(x), p, alive);
                       if (t.requires_grad(x)) t.accumulate(x, std::move(bg.input));
                       if (t.requires_grad(gamma)) t.accumulate(gamma, Tensor4::row(bg.gamma));
                       if (t.requires_grad(beta)) t.accumulate(beta, Tensor4::row(bg.beta));
                     });
}

inline Var relu(Tape& tape, Var x) {
  return tape.record(relu_forward(tape.value(x)), {x}, [x](const Tensor4& g, Tape& t) {
    t.accumulate(x, relu_backward(g, t.value(x)));
  });
}

inline Var maxpool(Tape& tape, Var x, int kernel, int stride) {
  MaxPoolResult r = maxpool_forward(tape.value(x), kernel, stride);
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
  return tape.record(std::move(r.out), {x}, [x, argmax](const Tensor4& g, Tape& t) {
    t.accumulate(x, maxpool_backward(g, *argmax, t.value(x).shape()));
  });
}

inline Var add(Tape& tape, Var a, Var b) {
  Tensor4 out = tape.value(a);
  out += tape.value(b);
  return tape.record(std::move(out), {a, b}, [a, b](const Tensor4& g, Tape& t) {
    if (t.requires_grad(a)) t.accumulate(a, Tensor4(g));
    if (t.requires_grad(b)) t.accumulate(b, Tensor4(g));
  });
}

/// Fully connected over flattened rows. `bias` may be invalid.
inline Var fc(Tape& tape, Var x, Var weight, Var bias, ChannelFlags in_mask = {}) {
  std::vector<double> b;
  if (bias.valid()) b = tape.value(bias).values();
  Tensor4 out = fc_forward(tape.value(x), tape.value(weight), b, in_mask);
  const bool has_bias = bias.valid();
  return tape.record(std::move(out), {x, weight, has_bias ? bias : x},
                     [x, weight, bias, has_bias, in_mask = std::move(in_mask)](const Tensor4& g,
                                                                               Tape& t) {
                       const Tensor4& xv = t.value(x);
                       const Tensor4& wv = t.value(weight);
                       if (t.requires_grad(x))
                         t.accumulate(x, fc_backward_input(g, wv, xv.shape(), in_mask));
                       if (t.requires_grad(weight))
                         t.accumulate(weight, fc_backward_weight(g, xv, wv.shape(), in_mask));
                       if (has_bias && t.requires_grad(bias)) {
                         const std::size_t outs = g.shape().c;
                         std::vector<double> gb(outs, 0.0);
                         for (std::size_t r = 0; r < g.shape().n; ++r)
                           for (std::size_t o = 0; o < outs; ++o) gb[o] += g.data()[r * outs + o];
                         t.accumulate(bias, Tensor4::row(gb));
                       }
                     });
}

/// N x C x H x W -> N x (C*H*W) x 1 x 1.
inline Var flatten(Tape& tape, Var x) {
  const Shape4 s = tape.value(x).shape();
  return tape.record(tape.value(x).reshaped(Shape4{s.n, s.c * s.plane(), 1, 1}), {x},
                     [x, s](const Tensor4& g, Tape& t) { t.accumulate(x, g.reshaped(s)); });
}

struct RoiAlignVar {
  Var features;
  std::vector<std::size_t> kept;
};

inline RoiAlignVar roi_align(Tape& tape, Var feature, std::span<const RoiBox> boxes,
                             std::size_t out_h, std::size_t out_w) {
  RoiAlignResult r = roi_align_forward(tape.value(feature), boxes, out_h, out_w);
  auto clamped = std::make_shared<std::vector<RoiBox>>(std::move(r.clamped));
  Var v = tape.record(std::move(r.features), {feature}, [feature, clamped](const Tensor4& g, Tape& t) {
    t.accumulate(feature, roi_align_backward(g, *clamped, t.value(feature).shape()));
  });
  return {v, std::move(r.kept)};
}

inline Var spatial_mean(Tape& tape, Var x) {
  return tape.record(ctta::spatial_mean(tape.value(x)), {x}, [x](const Tensor4& g, Tape& t) {
    const Shape4 s = t.value(x).shape();
    Tensor4 gx(s);
    const double inv = 1.0 / static_cast<double>(s.plane());
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const double v = g.at(n, c, 0, 0) * inv;
        for (double& e : gx.plane(n, c)) e = v;
      }
    t.accumulate(x, std::move(gx));
  });
}

inline Var global_channel_mean(Tape& tape, Var x) {
  return tape.record(ctta::global_channel_mean(tape.value(x)), {x}, [x](const Tensor4& g, Tape& t) {
    const Shape4 s = t.value(x).shape();
    Tensor4 gx(s);
    const double inv = 1.0 / static_cast<double>(s.n * s.plane());
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const double v = g.at(0, c, 0, 0) * inv;
        for (double& e : gx.plane(n, c)) e = v;
      }
    t.accumulate(x, std::move(gx));
  });
}

/// Concatenates N x C_i x 1 x 1 tensors along channels.
inline Var concat_channels(Tape& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInput("concat_channels: no inputs");
  const std::size_t rows = tape.value(parts.front()).shape().n;
  std::size_t total = 0;
  for (Var p : parts) {
    const Shape4 s = tape.value(p).shape();
    if (s.n != rows || s.plane() != 1) throw InvalidInput("concat_channels: incompatible shapes");
    total += s.c;
  }
  Tensor4 out(Shape4{rows, total, 1, 1});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor4& v = tape.value(p);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.shape().c; ++c) out.at(r, off + c, 0, 0) = v.at(r, c, 0, 0);
    off += v.shape().c;
  }
  return tape.record(std::move(out), std::span<const Var>(parts), [parts, rows](const Tensor4& g, Tape& t) {
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t c = t.value(p).shape().c;
      if (t.requires_grad(p)) {
        Tensor4 gp(Shape4{rows, c, 1, 1});
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) gp.at(r, j, 0, 0) = g.at(r, off + j, 0, 0);
        t.accumulate(p, std::move(gp));
      }
      off += c;
    }
  });
}

/// Mean over the listed rows of an N x C x 1 x 1 tensor -> 1 x C x 1 x 1.
inline Var rows_mean(Tape& tape, Var x, std::vector<std::size_t> rows) {
  const Tensor4& xv = tape.value(x);
  if (rows.empty()) throw InvalidInput("rows_mean: empty row set");
  const std::size_t C = xv.shape().c * xv.shape().plane();
  Tensor4 out(Shape4{1, C, 1, 1});
  for (std::size_t r : rows) {
    if (r >= xv.shape().n) throw InvalidInput("rows_mean: row index out of range");
    for (std::size_t c = 0; c < C; ++c) out.data()[c] += xv.data()[r * C + c];
  }
  out.scale(1.0 / static_cast<double>(rows.size()));
  return tape.record(std::move(out), {x}, [x, rows = std::move(rows), C](const Tensor4& g, Tape& t) {
    Tensor4 gx(t.value(x).shape());
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (std::size_t r : rows)
      for (std::size_t c = 0; c < C; ++c) gx.data()[r * C + c] += g.data()[c] * inv;
    t.accumulate(x, std::move(gx));
  });
}

/// scale * x + offset, elementwise with a constant offset of the same shape.
inline Var affine(Tape& tape, Var x, double scale, const Tensor4& offset) {
  Tensor4 out = tape.value(x);
  out.scale(scale);
  out += offset;
  return tape.record(std::move(out), {x}, [x, scale](const Tensor4& g, Tape& t) {
    Tensor4 gx = g;
    t.accumulate(x, std::move(gx.scale(scale)));
  });
}

/// 0.5 * sum_d (x[d] - target[d])^2 / var[d]  -> scalar.
inline Var half_mahalanobis(Tape& tape, Var x, std::vector<double> target, std::vector<double> var) {
  const Tensor4& xv = tape.value(x);
  if (target.size() != xv.size() || var.size() != xv.size())
    throw InvalidInput("half_mahalanobis: length mismatch");
  double acc = 0.0;
  for (std::size_t d = 0; d < xv.size(); ++d) {
    const double diff = xv.data()[d] - target[d];
    acc += 0.5 * diff * diff / var[d];
  }
  return tape.record(Tensor4::scalar(acc), {x},
                     [x, target = std::move(target), var = std::move(var)](const Tensor4& g, Tape& t) {
                       const Tensor4& xv = t.value(x);
                       Tensor4 gx(xv.shape());
                       const double s = g.item();
                       for (std::size_t d = 0; d < xv.size(); ++d)
                         gx.data()[d] = s * (xv.data()[d] - target[d]) / var[d];
                       t.accumulate(x, std::move(gx));
                     });
}

/// sum_c alive[c] * |w[c] * x[c]| over a 1 x C x 1 x 1 parameter. The
/// subgradient at 0 is taken as 0.
inline Var weighted_abs_sum(Tape& tape, Var x, std::vector<double> weights, ChannelFlags alive = {}) {
  const Tensor4& xv = tape.value(x);
  if (weights.size() != xv.size()) throw InvalidInput("weighted_abs_sum: weight length mismatch");
  check_mask(alive, xv.size(), "weighted_abs_sum");
  double acc = 0.0;
  for (std::size_t c = 0; c < xv.size(); ++c)
    if (kept(alive, c)) acc += std::abs(weights[c] * xv.data()[c]);
  return tape.record(Tensor4::scalar(acc), {x},
                     [x, weights = std::move(weights), alive = std::move(alive)](const Tensor4& g,
                                                                                 Tape& t) {
                       const Tensor4& xv = t.value(x);
                       Tensor4 gx(xv.shape());
                       const double s = g.item();
                       for (std::size_t c = 0; c < xv.size(); ++c) {
                         if (!kept(alive, c)) continue;
                         const double v = xv.data()[c];
                         const double sign = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
                         gx.data()[c] = s * std::abs(weights[c]) * sign;
                       }
                       t.accumulate(x, std::move(gx));
                     });
}

/// a + b for scalars.
inline Var add_scalar(Tape& tape, Var a, Var b) { return add(tape, a, b); }

/// k * a for a scalar (or any) node.
inline Var scale(Tape& tape, Var a, double k) {
  return affine(tape, a, k, Tensor4(tape.value(a).shape()));
}

/// Sum of all elements -> scalar.
inline Var sum(Tape& tape, Var x) {
  return tape.record(Tensor4::scalar(ctta::sum(tape.value(x))), {x}, [x](const Tensor4& g, Tape& t) {
    t.accumulate(x, Tensor4(t.value(x).shape(), g.item()));
  });
}

/// sum w * BCE(sigmoid(x), target), elementwise weights.
inline Var bce_with_logits(Tape& tape, Var x, const Tensor4& target, const Tensor4& weight) {
  const Tensor4& xv = tape.value(x);
  if (target.shape() != xv.shape() || weight.shape() != xv.shape())
    throw InvalidInput("bce_with_logits: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double w = weight.data()[i];
    if (w == 0.0) continue;
    const double z = xv.data()[i], y = target.data()[i];
    acc += w * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
  }
  return tape.record(Tensor4::scalar(acc), {x}, [x, target, weight](const Tensor4& g, Tape& t) {
    const Tensor4& xv = t.value(x);
    Tensor4 gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double w = weight.data()[i];
      if (w == 0.0) continue;
      const double s = 1.0 / (1.0 + std::exp(-xv.data()[i]));
      gx.data()[i] = g.item() * w * (s - target.data()[i]);
    }
    t.accumulate(x, std::move(gx));
  });
}

/// sum w * smoothL1(x - target) with transition at 1.
inline Var smooth_l1(Tape& tape, Var x, const Tensor4& target, const Tensor4& weight) {
  const Tensor4& xv = tape.value(x);
  if (target.shape() != xv.shape() || weight.shape() != xv.shape())
    throw InvalidInput("smooth_l1: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double w = weight.data()[i];
    if (w == 0.0) continue;
    const double d = std::abs(xv.data()[i] - target.data()[i]);
    acc += w * (d < 1.0 ? 0.5 * d * d : d - 0.5);
  }
  return tape.record(Tensor4::scalar(acc), {x}, [x, target, weight](const Tensor4& g, Tape& t) {
    const Tensor4& xv = t.value(x);
    Tensor4 gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double w = weight.data()[i];
      if (w == 0.0) continue;
      const double d = xv.data()[i] - target.data()[i];
      gx.data()[i] = g.item() * w * (std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
    }
    t.accumulate(x, std::move(gx));
  });
}

/// sum_r weight[r] * CE(softmax(x[r, begin:begin+count]), label[r]).
inline Var softmax_cross_entropy(Tape& tape, Var x, std::size_t begin, std::size_t count,
                                 std::vector<std::size_t> labels, std::vector<double> weights) {
  const Tensor4& xv = tape.value(x);
  const std::size_t rows = xv.shape().n;
  if (labels.size() != rows || weights.size() != rows)
    throw InvalidInput("softmax_cross_entropy: label/weight count mismatch");
  Tensor4 p = softmax_rows(xv, begin, count);
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= count) throw InvalidInput("softmax_cross_entropy: label out of range");
    acc -= weights[r] * std::log(std::max(p.data()[r * count + labels[r]], 1e-300));
  }
  return tape.record(Tensor4::scalar(acc), {x},
                     [x, begin, count, p = std::move(p), labels = std::move(labels),
                      weights = std::move(weights)](const Tensor4& g, Tape& t) {
                       const Tensor4& xv = t.value(x);
                       const std::size_t width = xv.shape().c;
                       Tensor4 gx(xv.shape());
                       for (std::size_t r = 0; r < labels.size(); ++r)
                         for (std::size_t j = 0; j < count; ++j) {
                           const double y = j == labels[r] ? 1.0 : 0.0;
                           gx.data()[r * width + begin + j] =
                               g.item() * weights[r] * (p.data()[r * count + j] - y);
                         }
                       t.accumulate(x, std::move(gx));
                     });
}

}  // namespace ad
}  // namespace ctta
