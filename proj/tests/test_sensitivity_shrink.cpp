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

#include <numeric>

#include "ctta/ctta.hpp"
#include "support/toy.hpp"

namespace ctta {
namespace {

TEST(Sensitivity, NormalizedScoresAverageOne) {
  const auto w = normalize_scores({1.0, 3.0, 0.0, 4.0});
  EXPECT_DOUBLE_EQ(w[0], 0.5);
  EXPECT_DOUBLE_EQ(w[1], 1.5);
  EXPECT_DOUBLE_EQ(w[2], 0.0);
  EXPECT_DOUBLE_EQ(std::accumulate(w.begin(), w.end(), 0.0), 4.0);
  EXPECT_EQ(normalize_scores({0.0, 0.0}), (std::vector<double>{1.0, 1.0}));
}

TEST(Sensitivity, DeviationScoresByHand) {
  // Two rows, two channels, 1x2 planes.
  const Tensor4 x(Shape4{2, 2, 1, 2}, std::vector<double>{1, 3, 0, 0, 2, 2, 1, -1});
  const Tensor4 ref(Shape4{1, 2, 1, 2}, std::vector<double>{1, 1, 0, 0});
  const auto s = deviation_scores(x, ref);
  EXPECT_DOUBLE_EQ(s[0], (0 + 2 + 1 + 1) / 4.0);
  EXPECT_DOUBLE_EQ(s[1], (0 + 0 + 1 + 1) / 4.0);
  EXPECT_THROW(deviation_scores(x, Tensor4(Shape4{1, 3, 1, 2})), InvalidInput);
}

TEST(Sensitivity, ScaleInvariant) {
  std::mt19937_64 rng(8);
  Tensor4 x(Shape4{3, 5, 2, 2}), ref(Shape4{1, 5, 2, 2});
  auto a = testing::uniform_vec(x.size(), -1, 1, rng), b = testing::uniform_vec(ref.size(), -1, 1, rng);
  std::copy(a.begin(), a.end(), x.data().begin());
  std::copy(b.begin(), b.end(), ref.data().begin());
  Tensor4 y = x;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = ref.data()[i % ref.size()];
    y.data()[i] = r + 3.0 * (x.data()[i] - r);
  }
  const auto w1 = normalize_scores(deviation_scores(x, ref)), w2 = normalize_scores(deviation_scores(y, ref));
  for (std::size_t c = 0; c < w1.size(); ++c) EXPECT_NEAR(w1[c], w2[c], 1e-12);
}

TEST(Sensitivity, CombineAndSmooth) {
  const LayerVectors img{{"bn1", {0.5, 1.5}}}, ins{{"bn1", {1.0, 1.0}}};
  const SensitivityWeights w = combine(img, ins);
  EXPECT_EQ(w.layers[0].omega, (std::vector<double>{1.5, 2.5}));
  SensitivitySmoother s(0.5);
  EXPECT_TRUE(s.update(w) == w);
  const SensitivityWeights w2 = combine({{"bn1", {1.5, 0.5}}}, ins);
  const SensitivityWeights m = s.update(w2);
  EXPECT_EQ(m.layers[0].image, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(m.layers[0].omega, (std::vector<double>{2.0, 2.0}));
  EXPECT_THROW(combine(img, {{"bn2", {1.0, 1.0}}}), InvalidInput);
  EXPECT_THROW(SensitivitySmoother(1.0), InvalidInput);
}

NetworkState randomized(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkState st = init_state(spec, seed);
  std::mt19937_64 rng(seed);
  for (const auto& name : spec.bn_layers()) {
    const std::size_t c = spec.layer(name).out_ch;
    auto g = testing::uniform_vec(c, 0.2, 1.5, rng), b = testing::uniform_vec(c, -0.3, 0.3, rng);
    std::copy(g.begin(), g.end(), st.gamma(name).begin());
    std::copy(b.begin(), b.end(), st.param(param_name(name, "beta")).data().begin());
  }
  return st;
}

TEST(Shrink, MatchesMaskedForward) {
  for (const NetworkSpec& spec : {default_detector_spec(3, 32, 3), toy_two_stage_spec(3, 6, 8)}) {
    const NetworkState st = randomized(spec, 5);
    std::mt19937_64 rng(12);
    const ChannelMask mask = testing::random_mask(spec, 0.5, rng);
    const ShrunkNetwork small = physically_shrunk(st, mask);
    EXPECT_FALSE(small.removed.empty());
    Tensor4 batch(Shape4{2, spec.input_channels, spec.input_size, spec.input_size});
    auto px = testing::uniform_vec(batch.size(), 0.0, 1.0, rng);
    std::copy(px.begin(), px.end(), batch.data().begin());
    Tape ta, tb;
    const BackboneTrace a = backbone_forward(ta, st, ta.constant(batch), mask, ParamMode::frozen);
    const BackboneTrace b = backbone_forward(tb, small.state, tb.constant(batch), small.mask, ParamMode::frozen);
    if (!spec.head) {
      EXPECT_LT(max_abs_diff(ta.value(a.output), tb.value(b.output)), 1e-9);
      continue;
    }
    // With a head the backbone output itself narrows; compare what reads it.
    EXPECT_LT(max_abs_diff(ta.value(proposal_layer(ta, st, a.output, mask, ParamMode::frozen)),
                           tb.value(proposal_layer(tb, small.state, b.output, small.mask, ParamMode::frozen))),
              1e-9);
  }
}

TEST(Shrink, RemovesWhereLegalOnly) {
  const NetworkSpec spec = default_detector_spec();
  const NetworkState st = randomized(spec, 6);
  ChannelMask mask = ChannelMask::all_alive(spec);
  for (auto& l : mask.layers) l.alive[0] = l.alive[1] = 0;
  const ShrunkNetwork small = physically_shrunk(st, mask);
  const std::set<std::string> removed(small.removed.begin(), small.removed.end());
  EXPECT_TRUE(removed.count("bn1"));
  EXPECT_TRUE(removed.count("bn3a"));
  EXPECT_TRUE(removed.count("bn4"));
  EXPECT_FALSE(removed.count("bn2"));   // feeds the residual block's first group
  EXPECT_FALSE(removed.count("bn3b"));  // feeds the residual sum
  EXPECT_EQ(small.state.spec.layer("conv1").out_ch, 14u);
  EXPECT_EQ(small.state.spec.layer("conv2").in_ch, 14u);
  // Cost ledgers agree between the two forms.
  EXPECT_EQ(forward_flops(spec, mask).fwd, forward_flops(small.state.spec, small.mask).fwd);
}

}  // namespace
}  // namespace ctta
