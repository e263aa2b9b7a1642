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

#include "ctta/ctta.hpp"

namespace ctta {
namespace {

Detection det(Box b, std::size_t label, double conf) { return {b, {}, label, conf}; }

TEST(Scene, DeterministicAndValid) {
  SceneSpec spec;
  const Sample a = generate_image(spec, 17), b = generate_image(spec, 17), c = generate_image(spec, 18);
  EXPECT_TRUE(a.image == b.image);
  EXPECT_EQ(a.objects, b.objects);
  EXPECT_FALSE(a.image == c.image);
  for (const Sample& s : {a, c}) {
    EXPECT_EQ(s.image.shape(), (Shape4{1, 3, 64, 64}));
    EXPECT_GE(s.objects.size(), spec.min_objects);
    EXPECT_LE(s.objects.size(), spec.max_objects);
    for (double v : s.image.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (const auto& o : s.objects) {
      EXPECT_LT(o.label, spec.num_classes);
      EXPECT_GE(o.box.x0, 0.0);
      EXPECT_LE(o.box.x1, 64.0);
    }
  }
  spec.seed = 2;
  EXPECT_FALSE(generate_image(spec, 17).image == a.image);
}

TEST(Scene, StackImages) {
  const Dataset d = generate_source(SceneSpec{}, 3, 5);
  const Tensor4 b = stack_images(d, 1, 3);
  EXPECT_EQ(b.shape().n, 2u);
  EXPECT_EQ(b.data()[0], d[1].image.data()[0]);
  EXPECT_THROW(stack_images(d, 2, 2), InvalidInput);
}

TEST(Corruption, DeterministicAndBounded) {
  const Tensor4 img = generate_image(SceneSpec{}, 1).image;
  for (Corruption k : {Corruption::motion, Corruption::noise, Corruption::defocus, Corruption::contrast}) {
    const Tensor4 x = corrupt(img, k, 3, 99);
    EXPECT_TRUE(x == corrupt(img, k, 3, 99)) << to_string(k);
    EXPECT_FALSE(x == img) << to_string(k);
    for (double v : x.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_TRUE(corrupt(img, k, 0, 99) == img);
  }
  EXPECT_FALSE(corrupt(img, Corruption::noise, 3, 1) == corrupt(img, Corruption::noise, 3, 2));
  EXPECT_THROW(corrupt(img, Corruption::noise, 6), InvalidInput);
}

TEST(Corruption, BlursPreserveConstantImages) {
  const Tensor4 flat(Shape4{1, 1, 9, 9}, 0.4);
  for (Corruption k : {Corruption::motion, Corruption::defocus, Corruption::contrast})
    for (int s = 1; s <= 5; ++s) EXPECT_LT(max_abs_diff(corrupt(flat, k, s), flat), 1e-12);
}

TEST(Corruption, DiskKernelIsNormalized) {
  int side = 0;
  const auto k = disk_kernel(2.0, side);
  EXPECT_EQ(side, 5);
  double s = 0.0;
  for (double v : k) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_EQ(k[0], 0.0);  // corner lies outside the disk
}

TEST(Boxes, IouAndNms) {
  const Box a{0, 0, 10, 10}, b{5, 0, 15, 10}, c{20, 20, 30, 30};
  EXPECT_DOUBLE_EQ(iou(a, b), 50.0 / 150.0);
  EXPECT_DOUBLE_EQ(iou(a, c), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  const std::vector<Box> boxes{a, Box{1, 0, 11, 10}, c};
  const std::vector<double> scores{0.5, 0.9, 0.7};
  EXPECT_EQ(nms(boxes, scores, 0.5), (std::vector<std::size_t>{1, 2}));
}

TEST(Boxes, DeltaRoundTrip) {
  const Box ref{10, 12, 30, 40}, target{14, 10, 28, 45};
  const Box back = decode(ref, encode(ref, target));
  EXPECT_NEAR(back.x0, target.x0, 1e-9);
  EXPECT_NEAR(back.y1, target.y1, 1e-9);
}

TEST(MeanAp, PerfectAndEmpty) {
  const std::vector<std::vector<GroundTruth>> truth{{{Box{0, 0, 10, 10}, 0}, {Box{20, 20, 30, 30}, 1}}};
  const MapResult perfect = evaluate_map50({{det({0, 0, 10, 10}, 0, 0.9), det({20, 20, 30, 30}, 1, 0.8)}}, truth, 3);
  EXPECT_DOUBLE_EQ(perfect.map, 1.0);  // class 2 has no ground truth and is skipped
  EXPECT_EQ(perfect.gt_count, (std::vector<std::size_t>{1, 1, 0}));
  EXPECT_DOUBLE_EQ(evaluate_map50({{}}, truth, 3).map, 0.0);
}

TEST(MeanAp, HandComputedCurve) {
  // Two ground truths of one class; detections ranked TP, FP, TP.
  const std::vector<std::vector<GroundTruth>> truth{{{Box{0, 0, 10, 10}, 0}, {Box{20, 0, 30, 10}, 0}}};
  const std::vector<ImageDetections> dets{
      {det({0, 0, 10, 10}, 0, 0.9), det({40, 40, 50, 50}, 0, 0.8), det({20, 0, 30, 10}, 0, 0.7)}};
  // recall 0.5 at precision 1, then recall 1 at precision 2/3.
  EXPECT_NEAR(evaluate_map50(dets, truth, 1).map, 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-12);
}

TEST(MeanAp, DuplicateDetectionIsFalsePositive) {
  const std::vector<std::vector<GroundTruth>> truth{{{Box{0, 0, 10, 10}, 0}}};
  const std::vector<ImageDetections> dets{{det({0, 0, 10, 10}, 0, 0.9), det({0, 0, 10, 9}, 0, 0.95)}};
  // The higher-confidence duplicate takes the match; the other is a FP.
  EXPECT_DOUBLE_EQ(evaluate_map50(dets, truth, 1).map, 1.0);
  const std::vector<ImageDetections> wrong_class{{det({0, 0, 10, 10}, 1, 0.9)}};
  EXPECT_DOUBLE_EQ(evaluate_map50(wrong_class, truth, 2).map, 0.0);
}

TEST(MeanAp, LowOverlapMisses) {
  const std::vector<std::vector<GroundTruth>> truth{{{Box{0, 0, 10, 10}, 0}}};
  EXPECT_DOUBLE_EQ(evaluate_map50({{det({5, 0, 15, 10}, 0, 0.9)}}, truth, 1).map, 0.0);
  EXPECT_THROW(evaluate_map50({}, truth, 1), InvalidInput);
}

}  // namespace
}  // namespace ctta
