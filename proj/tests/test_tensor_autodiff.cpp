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

#include <gtest/gtest.h>

#include <random>

#include "ctta/ctta.hpp"
#include "support/toy.hpp"

namespace ctta {
namespace {

Tensor4 random_tensor(Shape4 s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(s);
  auto v = testing::uniform_vec(t.size(), lo, hi, rng);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor4(Shape4{1, 2, 2, 2}, std::vector<double>(7, 0.0)), InvalidInput);
  Tensor4 a(Shape4{1, 2, 1, 1});
  EXPECT_THROW(a += Tensor4(Shape4{2, 1, 1, 1}), InvalidInput);
  EXPECT_THROW(a.reshaped(Shape4{1, 3, 1, 1}), InvalidInput);
  EXPECT_THROW(a.item(), InvalidInput);
}

TEST(Tensor, IndexingIsNchw) {
  Tensor4 t(Shape4{2, 3, 4, 5});
  t.at(1, 2, 3, 4) = 7.0;
  EXPECT_EQ(t.data().back(), 7.0);
  EXPECT_EQ(t.index(1, 0, 0, 0), 60u);
  EXPECT_EQ(t.plane(1, 2).back(), 7.0);
}

TEST(Tape, SecondBackwardThrows) {
  Tape tape;
  Var p = tape.parameter("w", Tensor4::scalar(2.0), true);
  Var l = ad::scale(tape, p, 3.0);
  ParamGrad g = tape.backward(l);
  EXPECT_DOUBLE_EQ(g.at("w").item(), 3.0);
  EXPECT_THROW(tape.backward(l), StateError);
  EXPECT_THROW(tape.constant(Tensor4::scalar(1.0)), StateError);
}

TEST(Tape, SharedParameterGradientsMerge) {
  Tape tape;
  Var a = tape.parameter("w", Tensor4::scalar(2.0), true);
  Var b = tape.parameter("w", Tensor4::scalar(2.0), true);
  ParamGrad g = tape.backward(ad::add(tape, ad::scale(tape, a, 3.0), ad::scale(tape, b, 4.0)));
  EXPECT_DOUBLE_EQ(g.at("w").item(), 7.0);
}

TEST(Tape, FrozenParametersGetNoGradient) {
  Tape tape;
  Var a = tape.parameter("w", Tensor4::scalar(2.0), false);
  ParamGrad g = tape.backward(ad::scale(tape, a, 3.0));
  EXPECT_TRUE(g.empty());
}

// conv -> bn -> maxpool -> flatten -> fc -> quadratic, against central
// differences on every parameter element.
struct SmallNet {
  std::map<std::string, Tensor4> p;
  Tensor4 x;
  std::vector<double> mean{0.1, -0.2, 0.05}, var{0.8, 1.3, 0.6};
  std::vector<double> target, weight;

  double forward(Tape& tape, const std::map<std::string, Tensor4>& q, Var* out = nullptr) const {
    Var in = tape.constant(x);
    auto P = [&](const char* n) { return tape.parameter(n, q.at(n), true); };
    Var h = ad::conv2d(tape, in, P("conv.weight"), P("conv.bias"), {1, 1, {}, {}});
    h = ad::batch_norm(tape, h, P("bn.gamma"), P("bn.beta"), mean, var, 1e-5);
    h = ad::maxpool(tape, h, 2, 2);
    h = ad::fc(tape, ad::flatten(tape, h), P("fc.weight"), P("fc.bias"));
    Var l = ad::half_mahalanobis(tape, h, target, weight);
    if (out) *out = l;
    return tape.value(l).item();
  }
};

TEST(Autodiff, MatchesCentralDifferences) {
  std::mt19937_64 rng(17);
  SmallNet net;
  net.x = random_tensor(Shape4{2, 2, 4, 4}, rng);
  net.p["conv.weight"] = random_tensor(Shape4{3, 2, 3, 3}, rng, -0.5, 0.5);
  net.p["conv.bias"] = random_tensor(Shape4{1, 3, 1, 1}, rng, -0.1, 0.1);
  net.p["bn.gamma"] = random_tensor(Shape4{1, 3, 1, 1}, rng, 0.5, 1.5);
  net.p["bn.beta"] = random_tensor(Shape4{1, 3, 1, 1}, rng, -0.2, 0.2);
  net.p["fc.weight"] = random_tensor(Shape4{5, 12, 1, 1}, rng, -0.4, 0.4);
  net.p["fc.bias"] = random_tensor(Shape4{1, 5, 1, 1}, rng, -0.1, 0.1);
  net.target = testing::uniform_vec(10, -0.5, 0.5, rng);
  net.weight = testing::uniform_vec(10, 0.5, 2.0, rng);

  Tape tape;
  Var loss;
  net.forward(tape, net.p, &loss);
  const ParamGrad g = tape.backward(loss);
  ASSERT_EQ(g.size(), net.p.size());

  const double h = 1e-6;
  for (const auto& [name, t] : net.p) {
    std::vector<double> analytic(g.at(name).data().begin(), g.at(name).data().end()), numeric;
    for (std::size_t i = 0; i < t.size(); ++i) {
      auto plus = net.p, minus = net.p;
      plus[name].data()[i] += h;
      minus[name].data()[i] -= h;
      Tape a, b;
      numeric.push_back((net.forward(a, plus) - net.forward(b, minus)) / (2 * h));
    }
    EXPECT_LT(testing::relative_error(analytic, numeric), 1e-6) << name;
  }
}

TEST(Autodiff, ToyObjectiveGammaGradient) {
  const testing::ToyProblem p = testing::make_toy_problem(42);
  for (double rho : {0.0, 0.5}) {
    const auto analytic = testing::flat_gamma_grad(testing::toy_grad(p.st, p, rho), p.st.spec);
    const auto numeric = testing::toy_numeric_gamma_grad(p, rho, 1e-5);
    EXPECT_LT(testing::relative_error(analytic, numeric), 1e-5) << "rho " << rho;
  }
}

TEST(Autodiff, MaskedConvMatchesZeroedWeights) {
  std::mt19937_64 rng(5);
  const Tensor4 x = random_tensor(Shape4{1, 4, 5, 5}, rng);
  Tensor4 w = random_tensor(Shape4{3, 4, 3, 3}, rng);
  const ChannelFlags in_mask{1, 0, 1, 1}, out_mask{1, 1, 0};
  const Tensor4 masked = conv2d_forward(x, w, {}, 1, 1, in_mask, out_mask);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 4; ++i)
      if (!in_mask[i] || !out_mask[o])
        for (std::size_t k = 0; k < 9; ++k) w.data()[(o * 4 + i) * 9 + k] = 0.0;
  const Tensor4 dense = conv2d_forward(x, w, {}, 1, 1, {}, {});
  EXPECT_LT(max_abs_diff(masked, dense), 1e-12);
}

}  // namespace
}  // namespace ctta
