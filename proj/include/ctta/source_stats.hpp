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

// Source-domain statistics gathered in one pass over the source data:
// mean pre-BN feature maps and mean RoI features per considered BN layer,
// plus image-level and per-class feature means and diagonal variances.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctta/detector.hpp"
#include "ctta/errors.hpp"
#include "ctta/kernels.hpp"
#include "ctta/scene.hpp"

namespace ctta {

struct LayerSourceStats {
  std::string layer;
  Tensor4 feature_mean;  // 1 x C x H x W
  Tensor4 roi_mean;      // 1 x C x r x r
  friend bool operator==(const LayerSourceStats&, const LayerSourceStats&) = default;
};

struct ClassSourceStats {
  std::vector<double> mean, var;
  std::size_t count = 0;
  friend bool operator==(const ClassSourceStats&, const ClassSourceStats&) = default;
};

struct SourceStats {
  std::uint64_t spec_hash = 0;
  std::size_t roi_size = 4;
  std::vector<LayerSourceStats> layers;         // considered BN layers, network order
  std::vector<double> image_mean, image_var;    // pooled ReLU outputs
  std::map<std::size_t, ClassSourceStats> classes;  // pooled RoI features of the head input
  std::size_t images = 0;

  const LayerSourceStats& layer(const std::string& name) const {
    for (const auto& l : layers)
      if (l.layer == name) return l;
    throw InvalidInput("source stats have no layer '" + name + "'");
  }
  friend bool operator==(const SourceStats&, const SourceStats&) = default;
};

struct StatsConfig {
  double background_threshold = 0.5;
  double confidence_floor = 0.5;  // per-class statistics
  std::size_t min_class_samples = 10;
  bool confidence_weighted = true;  // roi_mean weighting
  std::size_t batch_size = 8;
};

/// Feature shapes every SourceStats for `spec` must have.
struct StatsLayout {
  std::vector<std::pair<std::string, Shape4>> feature, roi;
  std::size_t image_dim = 0, class_dim = 0;
};

inline StatsLayout stats_layout(const NetworkSpec& spec) {
  const auto plan = shape_plan(spec);
  const HeadSpec& h = head_of(spec);
  StatsLayout s;
  for (const auto& name : spec.considered_bn()) {
    const auto& fs = plan.at(spec.layer(name).inputs.front());
    s.feature.push_back({name, Shape4{1, fs.c, fs.h, fs.w}});
    s.roi.push_back({name, Shape4{1, fs.c, h.roi_size, h.roi_size}});
  }
  for (const auto& t : spec.taps()) s.image_dim += plan.at(t).c;
  s.class_dim = plan.at(spec.output()).c;
  return s;
}

/// Throws LayoutMismatch unless `stats` fits `spec`.
inline void check_layout(const SourceStats& stats, const NetworkSpec& spec) {
  const StatsLayout lay = stats_layout(spec);
  if (stats.layers.size() != lay.feature.size())
    throw LayoutMismatch(concat("stats cover ", stats.layers.size(), " layers, network has ", lay.feature.size()));
  for (std::size_t i = 0; i < lay.feature.size(); ++i) {
    const auto& l = stats.layers[i];
    if (l.layer != lay.feature[i].first) throw LayoutMismatch("stats layer '" + l.layer + "' not in network");
    if (l.feature_mean.shape() != lay.feature[i].second)
      throw LayoutMismatch(concat("stats feature map for '", l.layer, "' is ", l.feature_mean.shape().str(),
                                  ", network produces ", lay.feature[i].second.str()));
    if (l.roi_mean.shape() != lay.roi[i].second)
      throw LayoutMismatch(concat("stats RoI feature for '", l.layer, "' is ", l.roi_mean.shape().str(),
                                  ", expected ", lay.roi[i].second.str()));
  }
  if (stats.image_mean.size() != lay.image_dim || stats.image_var.size() != lay.image_dim)
    throw LayoutMismatch("stats image feature dimension mismatch");
  for (const auto& [k, c] : stats.classes)
    if (c.mean.size() != lay.class_dim || c.var.size() != lay.class_dim)
      throw LayoutMismatch(concat("stats class ", k, " feature dimension mismatch"));
}

/// RoI-Align of every considered layer's pre-BN feature map over the chosen
/// RoIs; boxes are in image pixels. Returns one M x C x r x r stack per layer.
inline std::vector<std::pair<std::string, Tensor4>> layer_roi_features(
    const std::vector<std::pair<std::string, Tensor4>>& features, const std::vector<RoiRecord>& rois,
    const std::vector<std::size_t>& selected, std::size_t input_size, std::size_t roi_size) {
  std::vector<std::pair<std::string, Tensor4>> out;
  for (const auto& [name, f] : features) {
    const double stride = static_cast<double>(input_size) / static_cast<double>(f.shape().h);
    std::vector<RoiBox> boxes;
    for (std::size_t i : selected) {
      const RoiRecord& r = rois[i];
      boxes.push_back({r.image, r.box.x0 / stride, r.box.y0 / stride, r.box.x1 / stride, r.box.y1 / stride});
    }
    RoiAlignResult ra = roi_align_forward(f, boxes, roi_size, roi_size);
    if (ra.kept.size() != selected.size()) throw InvalidInput("layer_roi_features: degenerate RoI box");
    out.emplace_back(name, std::move(ra.features));
  }
  return out;
}

/// What one batch contributes to the statistics.
struct StatsObservation {
  std::vector<std::pair<std::string, Tensor4>> features;  // N x C x H x W pre-BN maps
  Tensor4 pooled_taps;                                    // N x D
  std::vector<RoiRecord> rois;
  std::vector<std::pair<std::string, Tensor4>> roi_features;  // per layer, rows = `roi_rows`
  std::vector<std::size_t> roi_rows;                          // indices into `rois`
  Tensor4 roi_pooled;                                         // rows match `rois`
};

/// Streaming fold over observations.
class SourceStatsAccumulator {
 public:
  SourceStatsAccumulator(const NetworkSpec& spec, StatsConfig cfg) : spec_(spec), cfg_(cfg) {
    layout_ = stats_layout(spec);
    for (const auto& [name, s] : layout_.feature) fsum_.emplace_back(name, Tensor4(s));
    for (const auto& [name, s] : layout_.roi) rsum_.emplace_back(name, Tensor4(s));
    img_mean_.assign(layout_.image_dim, 0.0);
    img_m2_.assign(layout_.image_dim, 0.0);
  }

  void add(const StatsObservation& obs) {
    if (obs.features.size() != fsum_.size()) throw InvalidInput("stats: feature layer count mismatch");
    for (std::size_t l = 0; l < fsum_.size(); ++l) {
      const Tensor4& f = obs.features[l].second;
      Tensor4& acc = fsum_[l].second;
      if (f.shape().c != acc.shape().c || f.shape().h != acc.shape().h || f.shape().w != acc.shape().w)
        throw InvalidInput(concat("stats: feature map for '", fsum_[l].first, "' has shape ", f.shape().str()));
      for (std::size_t n = 0; n < f.shape().n; ++n) {
        auto src = f.sample(n);
        auto dst = acc.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
    const std::size_t N = obs.pooled_taps.shape().n;
    if (obs.pooled_taps.shape().c != layout_.image_dim) throw InvalidInput("stats: pooled feature dimension");
    for (std::size_t n = 0; n < N; ++n) {
      ++images_;
      const double inv = 1.0 / static_cast<double>(images_);
      for (std::size_t d = 0; d < layout_.image_dim; ++d) {
        const double v = obs.pooled_taps.at(n, d, 0, 0);
        const double delta = v - img_mean_[d];
        img_mean_[d] += delta * inv;
        img_m2_[d] += delta * (v - img_mean_[d]);
      }
    }
    // confidence-weighted RoI feature means
    for (std::size_t j = 0; j < obs.roi_rows.size(); ++j) {
      const RoiRecord& r = obs.rois[obs.roi_rows[j]];
      const double w = cfg_.confidence_weighted ? 1.0 - r.background : 1.0;
      roi_weight_ += w;
      for (std::size_t l = 0; l < rsum_.size(); ++l) {
        auto src = obs.roi_features[l].second.sample(j);
        auto dst = rsum_[l].second.data();
        if (src.size() != dst.size()) throw InvalidInput("stats: RoI feature shape mismatch");
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
      }
    }
    // per-class pooled RoI features
    for (std::size_t i = 0; i < obs.rois.size(); ++i) {
      const RoiRecord& r = obs.rois[i];
      if (!(r.background < cfg_.background_threshold) || r.confidence < cfg_.confidence_floor) continue;
      auto& c = classes_[r.label];
      if (c.mean.empty()) {
        c.mean.assign(layout_.class_dim, 0.0);
        c.m2.assign(layout_.class_dim, 0.0);
      }
      ++c.count;
      const double inv = 1.0 / static_cast<double>(c.count);
      for (std::size_t d = 0; d < layout_.class_dim; ++d) {
        const double v = obs.roi_pooled.at(i, d, 0, 0);
        const double delta = v - c.mean[d];
        c.mean[d] += delta * inv;
        c.m2[d] += delta * (v - c.mean[d]);
      }
    }
  }

  /// Final statistics, rounded to 32-bit float precision so they survive
  /// the archive unchanged.
  SourceStats finish() const {
    if (images_ == 0) throw InvalidInput("collect_source_stats: empty dataset");
    auto snap = [](double v) { return static_cast<double>(static_cast<float>(v)); };
    SourceStats s;
    s.spec_hash = spec_hash(spec_);
    s.roi_size = head_of(spec_).roi_size;
    s.images = images_;
    for (std::size_t l = 0; l < fsum_.size(); ++l) {
      LayerSourceStats ls{fsum_[l].first, fsum_[l].second, rsum_[l].second};
      for (double& v : ls.feature_mean.data()) v = snap(v / static_cast<double>(images_));
      for (double& v : ls.roi_mean.data()) v = roi_weight_ > 0 ? snap(v / roi_weight_) : 0.0;
      s.layers.push_back(std::move(ls));
    }
    if (roi_weight_ <= 0) log::warn("source stats: no foreground RoIs; RoI feature means are zero");
    for (std::size_t d = 0; d < layout_.image_dim; ++d) {
      s.image_mean.push_back(snap(img_mean_[d]));
      s.image_var.push_back(snap(std::max(img_m2_[d] / static_cast<double>(images_), 0.0)));
    }
    const std::size_t K = head_of(spec_).num_classes;
    for (std::size_t k = 0; k < K; ++k) {
      auto it = classes_.find(k);
      const std::size_t count = it == classes_.end() ? 0 : it->second.count;
      if (count < cfg_.min_class_samples) {
        log::warn(concat("source stats: class ", k, " has ", count, " qualifying RoIs (< ", cfg_.min_class_samples,
                         "), omitted"));
        continue;
      }
      ClassSourceStats c;
      c.count = count;
      for (std::size_t d = 0; d < layout_.class_dim; ++d) {
        c.mean.push_back(snap(it->second.mean[d]));
        c.var.push_back(snap(std::max(it->second.m2[d] / static_cast<double>(count), 0.0)));
      }
      s.classes[k] = std::move(c);
    }
    return s;
  }

 private:
  struct ClassAcc {
    std::vector<double> mean, m2;
    std::size_t count = 0;
  };
  NetworkSpec spec_;
  StatsConfig cfg_;
  StatsLayout layout_;
  std::vector<std::pair<std::string, Tensor4>> fsum_, rsum_;
  std::vector<double> img_mean_, img_m2_;
  std::map<std::size_t, ClassAcc> classes_;
  double roi_weight_ = 0.0;
  std::size_t images_ = 0;
};

/// Builds the observation for one inference result.
inline StatsObservation observe(const NetworkSpec& spec, InferenceResult r, const StatsConfig& cfg) {
  const HeadSpec& h = head_of(spec);
  StatsObservation o;
  o.roi_rows = select_foreground_rois(r.rois, cfg.background_threshold, h.max_rois_per_batch);
  o.roi_features = layer_roi_features(r.features, r.rois, o.roi_rows, spec.input_size, h.roi_size);
  o.features = std::move(r.features);
  o.pooled_taps = std::move(r.pooled_taps);
  o.rois = std::move(r.rois);
  o.roi_pooled = std::move(r.roi_pooled);
  return o;
}

/// One pass of the frozen source model over the source data.
inline SourceStats collect_source_stats(const NetworkState& st, const Dataset& data, const StatsConfig& cfg = {}) {
  if (data.empty()) throw InvalidInput("collect_source_stats: empty dataset");
  if (cfg.batch_size == 0) throw InvalidInput("collect_source_stats: batch size must be >= 1");
  SourceStatsAccumulator acc(st.spec, cfg);
  const ChannelMask all = ChannelMask::all_alive(st.spec);
  for (std::size_t b = 0; b < data.size(); b += cfg.batch_size) {
    const std::size_t e = std::min(data.size(), b + cfg.batch_size);
    acc.add(observe(st.spec, infer(st, stack_images(data, b, e), all), cfg));
  }
  return acc.finish();
}

}  // namespace ctta
