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
#include <cstddef>
#include <numeric>
#include <vector>

#include "ctta/boxes.hpp"
#include "ctta/detector.hpp"
#include "ctta/errors.hpp"
#include "ctta/scene.hpp"

namespace ctta {

struct MapResult {
  double map = 0.0;                   // mean over classes with ground truth
  std::vector<double> ap;             // per class
  std::vector<std::size_t> gt_count;  // per class
};

/// Area under the precision/recall curve with all-points interpolation.
inline double average_precision(const std::vector<double>& recall, const std::vector<double>& precision) {
  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i-- > 0;) mpre[i] = std::max(mpre[i], mpre[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

/// mAP at IoU 0.5. Detections are matched greedily in descending confidence
/// order to the best-overlapping unmatched ground truth of the same class.
inline MapResult evaluate_map50(const std::vector<ImageDetections>& detections,
                                const std::vector<std::vector<GroundTruth>>& truth, std::size_t num_classes,
                                double iou_threshold = 0.5) {
  if (detections.size() != truth.size()) throw InvalidInput("evaluate_map50: image count mismatch");
  MapResult r;
  r.ap.assign(num_classes, 0.0);
  r.gt_count.assign(num_classes, 0);
  for (const auto& img : truth)
    for (const auto& g : img) {
      if (g.label >= num_classes) throw InvalidInput("evaluate_map50: label out of range");
      ++r.gt_count[g.label];
    }
  struct Entry {
    double conf;
    std::size_t image, index;
  };
  std::size_t classes_with_gt = 0;
  double total = 0.0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < detections.size(); ++i)
      for (std::size_t j = 0; j < detections[i].size(); ++j)
        if (detections[i][j].label == k) entries.push_back({detections[i][j].confidence, i, j});
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.conf > b.conf; });
    std::vector<std::vector<bool>> used(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) used[i].assign(truth[i].size(), false);
    std::vector<double> recall, precision;
    double tp = 0, fp = 0;
    for (const auto& e : entries) {
      const Box& b = detections[e.image][e.index].box;
      double best = 0.0;
      std::size_t arg = static_cast<std::size_t>(-1);
      for (std::size_t g = 0; g < truth[e.image].size(); ++g) {
        if (truth[e.image][g].label != k) continue;
        const double o = iou(b, truth[e.image][g].box);
        if (o > best) {
          best = o;
          arg = g;
        }
      }
      if (best >= iou_threshold && !used[e.image][arg]) {
        used[e.image][arg] = true;
        tp += 1;
      } else {
        fp += 1;
      }
      if (r.gt_count[k] > 0) {
        recall.push_back(tp / static_cast<double>(r.gt_count[k]));
        precision.push_back(tp / (tp + fp));
      }
    }
    if (r.gt_count[k] == 0) continue;
    r.ap[k] = entries.empty() ? 0.0 : average_precision(recall, precision);
    total += r.ap[k];
    ++classes_with_gt;
  }
  r.map = classes_with_gt ? total / static_cast<double>(classes_with_gt) : 0.0;
  return r;
}

/// Runs inference over `data` in batches and scores it.
inline MapResult evaluate_dataset(const NetworkState& st, const Dataset& data, const ChannelMask& mask,
                                  std::size_t batch_size = 8) {
  if (batch_size == 0) throw InvalidInput("evaluate_dataset: batch size must be >= 1");
  std::vector<ImageDetections> dets;
  std::vector<std::vector<GroundTruth>> truth;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const std::size_t e = std::min(data.size(), b + batch_size);
    InferenceResult r = infer(st, stack_images(data, b, e), mask);
    for (auto& d : r.detections) dets.push_back(std::move(d));
    for (std::size_t i = b; i < e; ++i) truth.push_back(data[i].objects);
  }
  return evaluate_map50(dets, truth, head_of(st.spec).num_classes);
}

}  // namespace ctta
