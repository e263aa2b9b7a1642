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

// Experiment configuration: one JSON tree per experiment. Missing keys take
// the library defaults, unknown keys are rejected, and the resolved tree is
// hashed into every log.

#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctta/adaptation.hpp"
#include "ctta/errors.hpp"
#include "ctta/network.hpp"
#include "ctta/pretrain.hpp"
#include "ctta/scene.hpp"
#include "ctta/source_stats.hpp"
#include "ctta/stream.hpp"

namespace ctta {

using Json = nlohmann::ordered_json;

struct AblationConfig {
  std::size_t in_images = 48;
  std::size_t cross_images = 48;
  ConditionSpec cross{Corruption::noise, 3};
  std::size_t first_index = 2'000'000;  // held-out scene indices
  std::size_t batch_size = 8;
};

struct ExperimentConfig {
  SceneSpec scene;
  std::size_t source_images = 600;
  NetworkSpec network = default_detector_spec();
  PretrainConfig pretrain;
  StatsConfig stats;
  AdaptConfig adapt;
  StreamConfig stream;
  AblationConfig ablation;
  std::string profile = "ci";

  void validate() const {
    ctta::validate(network);
    adapt.validate();
    stream.validate();
    if (source_images == 0) throw InvalidInput("source_images must be >= 1");
    if (scene.channels != network.input_channels || scene.image_size != network.input_size)
      throw InvalidInput("scene image shape does not match the network input");
    if (scene.num_classes != head_of(network).num_classes)
      throw InvalidInput("scene class count does not match the detection head");
    if (ablation.in_images == 0 || ablation.cross_images == 0) throw InvalidInput("ablation sets must be non-empty");
  }
};

namespace detail {

/// Reads fields of one JSON object and remembers which keys were used so
/// leftovers can be reported.
class Fields {
 public:
  Fields(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InvalidInput("config: '" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw InvalidInput("config: '" + path_ + "." + key + "' has the wrong type");
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw InvalidInput("config: unknown key '" + path_ + "." + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline LayerKind parse_layer_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::conv, LayerKind::bn, LayerKind::relu, LayerKind::maxpool, LayerKind::add,
                      LayerKind::fc})
    if (s == to_string(k)) return k;
  throw InvalidInput("config: unknown layer kind '" + s + "'");
}

inline Json condition_json(const ConditionSpec& c) { return {{"kind", to_string(c.kind)}, {"severity", c.severity}}; }

inline ConditionSpec parse_condition(const Json& j, const std::string& path) {
  Fields f(j, path);
  ConditionSpec c;
  std::string kind = to_string(c.kind);
  f.get("kind", kind);
  f.get("severity", c.severity);
  f.finish();
  c.kind = parse_corruption(kind);
  return c;
}

inline void read_head(const Json& j, HeadSpec& h) {
  Fields f(j, "network.head");
  f.get("num_classes", h.num_classes);
  f.get("roi_size", h.roi_size);
  f.get("fc_hidden", h.fc_hidden);
  f.get("anchor_size", h.anchor_size);
  f.get("proposal_score_threshold", h.proposal_score_threshold);
  f.get("pre_nms_top_k", h.pre_nms_top_k);
  f.get("top_k", h.top_k);
  f.get("proposal_nms_iou", h.proposal_nms_iou);
  f.get("detection_nms_iou", h.detection_nms_iou);
  f.get("detection_score_floor", h.detection_score_floor);
  f.get("max_rois_per_batch", h.max_rois_per_batch);
  f.finish();
}

inline LayerSpec read_layer(const Json& j, std::size_t i) {
  Fields f(j, concat("network.layers[", i, "]"));
  LayerSpec l;
  std::string kind;
  f.get("name", l.name);
  f.get("kind", kind);
  f.get("inputs", l.inputs);
  f.get("in_ch", l.in_ch);
  f.get("out_ch", l.out_ch);
  f.get("kernel", l.kernel);
  f.get("stride", l.stride);
  f.get("pad", l.pad);
  f.get("bias", l.bias);
  f.get("considered", l.considered);
  f.get("input_prunable", l.input_prunable);
  f.finish();
  l.kind = parse_layer_kind(kind);
  return l;
}

inline void read_network(const Json& j, NetworkSpec& n) {
  Fields f(j, "network");
  f.get("input_channels", n.input_channels);
  f.get("input_size", n.input_size);
  f.get("bn_eps", n.bn_eps);
  f.get("image_taps", n.image_taps);
  if (const Json* layers = f.child("layers")) {
    if (!layers->is_array()) throw InvalidInput("config: 'network.layers' must be an array");
    n.layers.clear();
    for (std::size_t i = 0; i < layers->size(); ++i) n.layers.push_back(read_layer((*layers)[i], i));
  }
  if (const Json* head = f.child("head")) {
    if (head->is_null()) {
      n.head.reset();
    } else {
      if (!n.head) n.head = HeadSpec{};
      read_head(*head, *n.head);
    }
  }
  f.finish();
}

inline Json network_json(const NetworkSpec& n) {
  Json layers = Json::array();
  for (const auto& l : n.layers)
    layers.push_back({{"name", l.name},
                      {"kind", to_string(l.kind)},
                      {"inputs", l.inputs},
                      {"in_ch", l.in_ch},
                      {"out_ch", l.out_ch},
                      {"kernel", l.kernel},
                      {"stride", l.stride},
                      {"pad", l.pad},
                      {"bias", l.bias},
                      {"considered", l.considered},
                      {"input_prunable", l.input_prunable}});
  Json head = nullptr;
  if (n.head) {
    const HeadSpec& h = *n.head;
    head = {{"num_classes", h.num_classes},
            {"roi_size", h.roi_size},
            {"fc_hidden", h.fc_hidden},
            {"anchor_size", h.anchor_size},
            {"proposal_score_threshold", h.proposal_score_threshold},
            {"pre_nms_top_k", h.pre_nms_top_k},
            {"top_k", h.top_k},
            {"proposal_nms_iou", h.proposal_nms_iou},
            {"detection_nms_iou", h.detection_nms_iou},
            {"detection_score_floor", h.detection_score_floor},
            {"max_rois_per_batch", h.max_rois_per_batch}};
  }
  return {{"input_channels", n.input_channels}, {"input_size", n.input_size}, {"bn_eps", n.bn_eps},
          {"image_taps", n.image_taps},         {"layers", layers},           {"head", head}};
}

}  // namespace detail

/// Patch applied on top of the config for a named profile.
inline Json profile_patch(const std::string& profile) {
  if (profile == "ci") return {{"stream", {{"images_per_condition", 100}}}};
  if (profile == "full") return {{"stream", {{"images_per_condition", 500}}}};
  throw InvalidInput("unknown profile '" + profile + "' (expected ci or full)");
}

/// Builds a config from a JSON tree. The "profile" key (ci or full) supplies
/// defaults that explicit keys in the tree override; a non-empty
/// `profile_override` is applied last and wins over both.
inline ExperimentConfig config_from_json(const Json& tree, const std::string& profile_override = "") {
  if (!tree.is_object()) throw InvalidInput("config: top level must be an object");
  const std::string file_profile = tree.contains("profile") && tree["profile"].is_string()
                                       ? tree["profile"].get<std::string>()
                                       : std::string("ci");
  Json j = profile_patch(file_profile);
  j.merge_patch(tree);
  if (!profile_override.empty()) {
    j.merge_patch(profile_patch(profile_override));
    j["profile"] = profile_override;
  } else {
    j["profile"] = file_profile;
  }

  ExperimentConfig c;
  detail::Fields top(j, "config");
  top.get("profile", c.profile);
  top.get("source_images", c.source_images);
  if (const Json* s = top.child("scene")) {
    detail::Fields f(*s, "scene");
    f.get("image_size", c.scene.image_size);
    f.get("channels", c.scene.channels);
    f.get("num_classes", c.scene.num_classes);
    f.get("min_objects", c.scene.min_objects);
    f.get("max_objects", c.scene.max_objects);
    f.get("min_size", c.scene.min_size);
    f.get("max_size", c.scene.max_size);
    f.get("texture_amplitude", c.scene.texture_amplitude);
    f.get("texture_min_freq", c.scene.texture_min_freq);
    f.get("texture_max_freq", c.scene.texture_max_freq);
    f.get("min_contrast", c.scene.min_contrast);
    f.get("max_overlap_iou", c.scene.max_overlap_iou);
    f.get("seed", c.scene.seed);
    f.finish();
  }
  if (const Json* n = top.child("network")) detail::read_network(*n, c.network);
  if (const Json* p = top.child("pretrain")) {
    detail::Fields f(*p, "pretrain");
    f.get("epochs", c.pretrain.epochs);
    f.get("batch_size", c.pretrain.batch_size);
    f.get("lr", c.pretrain.lr);
    f.get("final_lr_fraction", c.pretrain.final_lr_fraction);
    f.get("l1_gamma", c.pretrain.l1_gamma);
    f.get("box_weight", c.pretrain.box_weight);
    f.get("positive_weight", c.pretrain.positive_weight);
    f.get("calibration_images", c.pretrain.calibration_images);
    f.get("jitter_per_object", c.pretrain.jitter_per_object);
    f.get("random_rois_per_image", c.pretrain.random_rois_per_image);
    f.get("rois_per_image", c.pretrain.rois_per_image);
    f.get("max_grad_norm", c.pretrain.max_grad_norm);
    f.get("snap_to_float", c.pretrain.snap_to_float);
    f.get("seed", c.pretrain.seed);
    f.finish();
  }
  if (const Json* s = top.child("stats")) {
    detail::Fields f(*s, "stats");
    f.get("background_threshold", c.stats.background_threshold);
    f.get("confidence_floor", c.stats.confidence_floor);
    f.get("min_class_samples", c.stats.min_class_samples);
    f.get("confidence_weighted", c.stats.confidence_weighted);
    f.get("batch_size", c.stats.batch_size);
    f.finish();
  }
  if (const Json* a = top.child("adapt")) {
    detail::Fields f(*a, "adapt");
    f.get("t", c.adapt.prune.t);
    f.get("p", c.adapt.prune.p);
    f.get("r", c.adapt.prune.r);
    f.get("lambda", c.adapt.prune.lambda);
    f.get("seed", c.adapt.prune.seed);
    f.get("lr", c.adapt.adam.lr);
    f.get("beta1", c.adapt.adam.beta1);
    f.get("beta2", c.adapt.adam.beta2);
    f.get("eps", c.adapt.adam.eps);
    f.get("ema_momentum", c.adapt.ema_momentum);
    f.get("variance_floor", c.adapt.variance_floor);
    f.get("background_threshold", c.adapt.background_threshold);
    f.get("confidence_floor", c.adapt.confidence_floor);
    f.get("sensitivity_momentum", c.adapt.sensitivity_momentum);
    f.get("verbose_sensitivity", c.adapt.verbose_sensitivity);
    f.finish();
  }
  if (const Json* s = top.child("stream")) {
    detail::Fields f(*s, "stream");
    if (const Json* conds = f.child("conditions")) {
      if (!conds->is_array()) throw InvalidInput("config: 'stream.conditions' must be an array");
      c.stream.conditions.clear();
      for (std::size_t i = 0; i < conds->size(); ++i)
        c.stream.conditions.push_back(detail::parse_condition((*conds)[i], concat("stream.conditions[", i, "]")));
    }
    f.get("rounds", c.stream.rounds);
    f.get("batch_size", c.stream.batch_size);
    f.get("images_per_condition", c.stream.images_per_condition);
    f.get("seed", c.stream.seed);
    f.get("first_index", c.stream.first_index);
    f.finish();
  }
  if (const Json* a = top.child("ablation")) {
    detail::Fields f(*a, "ablation");
    f.get("in_images", c.ablation.in_images);
    f.get("cross_images", c.ablation.cross_images);
    if (const Json* cross = f.child("cross")) c.ablation.cross = detail::parse_condition(*cross, "ablation.cross");
    f.get("first_index", c.ablation.first_index);
    f.get("batch_size", c.ablation.batch_size);
    f.finish();
  }
  top.finish();
  c.validate();
  return c;
}

/// The fully resolved tree; parsing it back gives the same config.
inline Json config_to_json(const ExperimentConfig& c) {
  Json conds = Json::array();
  for (const auto& x : c.stream.conditions) conds.push_back(detail::condition_json(x));
  const SceneSpec& s = c.scene;
  const PretrainConfig& p = c.pretrain;
  const AdaptConfig& a = c.adapt;
  return {
      {"profile", c.profile},
      {"source_images", c.source_images},
      {"scene",
       {{"image_size", s.image_size},
        {"channels", s.channels},
        {"num_classes", s.num_classes},
        {"min_objects", s.min_objects},
        {"max_objects", s.max_objects},
        {"min_size", s.min_size},
        {"max_size", s.max_size},
        {"texture_amplitude", s.texture_amplitude},
        {"texture_min_freq", s.texture_min_freq},
        {"texture_max_freq", s.texture_max_freq},
        {"min_contrast", s.min_contrast},
        {"max_overlap_iou", s.max_overlap_iou},
        {"seed", s.seed}}},
      {"network", detail::network_json(c.network)},
      {"pretrain",
       {{"epochs", p.epochs},
        {"batch_size", p.batch_size},
        {"lr", p.lr},
        {"final_lr_fraction", p.final_lr_fraction},
        {"l1_gamma", p.l1_gamma},
        {"box_weight", p.box_weight},
        {"positive_weight", p.positive_weight},
        {"calibration_images", p.calibration_images},
        {"jitter_per_object", p.jitter_per_object},
        {"random_rois_per_image", p.random_rois_per_image},
        {"rois_per_image", p.rois_per_image},
        {"max_grad_norm", p.max_grad_norm},
        {"snap_to_float", p.snap_to_float},
        {"seed", p.seed}}},
      {"stats",
       {{"background_threshold", c.stats.background_threshold},
        {"confidence_floor", c.stats.confidence_floor},
        {"min_class_samples", c.stats.min_class_samples},
        {"confidence_weighted", c.stats.confidence_weighted},
        {"batch_size", c.stats.batch_size}}},
      {"adapt",
       {{"t", a.prune.t},
        {"p", a.prune.p},
        {"r", a.prune.r},
        {"lambda", a.prune.lambda},
        {"seed", a.prune.seed},
        {"lr", a.adam.lr},
        {"beta1", a.adam.beta1},
        {"beta2", a.adam.beta2},
        {"eps", a.adam.eps},
        {"ema_momentum", a.ema_momentum},
        {"variance_floor", a.variance_floor},
        {"background_threshold", a.background_threshold},
        {"confidence_floor", a.confidence_floor},
        {"sensitivity_momentum", a.sensitivity_momentum},
        {"verbose_sensitivity", a.verbose_sensitivity}}},
      {"stream",
       {{"conditions", conds},
        {"rounds", c.stream.rounds},
        {"batch_size", c.stream.batch_size},
        {"images_per_condition", c.stream.images_per_condition},
        {"seed", c.stream.seed},
        {"first_index", c.stream.first_index}}},
      {"ablation",
       {{"in_images", c.ablation.in_images},
        {"cross_images", c.ablation.cross_images},
        {"cross", detail::condition_json(c.ablation.cross)},
        {"first_index", c.ablation.first_index},
        {"batch_size", c.ablation.batch_size}}},
  };
}

inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a(config_to_json(c).dump()); }

inline ExperimentConfig load_config(const std::string& path, const std::string& profile_override = "") {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j, profile_override);
}

}  // namespace ctta
