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

#include <filesystem>
#include <random>

#include "ctta/ctta.hpp"

namespace fs = std::filesystem;

namespace ctta {
namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ctta_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Config, ShippedDefaultLoads) {
  const ExperimentConfig c = load_config(std::string(CTTA_SOURCE_DIR) + "/configs/default.json");
  EXPECT_EQ(c.profile, "ci");
  EXPECT_EQ(c.stream.images_per_condition, 100u);
  EXPECT_EQ(c.stream.conditions.size(), 4u);
  EXPECT_DOUBLE_EQ(c.adapt.prune.t, 0.05);
  EXPECT_DOUBLE_EQ(c.adapt.prune.p, 0.1);
  EXPECT_DOUBLE_EQ(c.adapt.prune.r, 0.01);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ProfilesAndOverrides) {
  EXPECT_EQ(config_from_json(Json::object()).stream.images_per_condition, 100u);
  EXPECT_EQ(config_from_json(Json{{"profile", "full"}}).stream.images_per_condition, 500u);
  EXPECT_EQ(config_from_json(Json::object(), "full").stream.images_per_condition, 500u);
  const Json explicit_count = {{"stream", {{"images_per_condition", 12}}}};
  EXPECT_EQ(config_from_json(explicit_count).stream.images_per_condition, 12u);
  EXPECT_EQ(config_from_json(explicit_count, "full").stream.images_per_condition, 500u);
  EXPECT_THROW(config_from_json(Json{{"profile", "huge"}}), InvalidInput);
}

TEST(Config, UnknownKeysAreRejected) {
  try {
    config_from_json(Json{{"adapt", {{"bogus", 1}}}});
    FAIL() << "expected rejection";
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find("adapt.bogus"), std::string::npos);
  }
  EXPECT_THROW(config_from_json(Json{{"nope", true}}), InvalidInput);
  EXPECT_THROW(config_from_json(Json{{"adapt", {{"p", "high"}}}}), InvalidInput);
  EXPECT_THROW(config_from_json(Json{{"adapt", {{"p", 1.5}}}}), InvalidInput);
}

TEST(Config, RoundTripPreservesHash) {
  ExperimentConfig c = config_from_json(Json{{"adapt", {{"lambda", 0.2}}}, {"stream", {{"rounds", 3}}}});
  const ExperimentConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_DOUBLE_EQ(back.adapt.prune.lambda, 0.2);
  c.adapt.prune.lambda = 0.3;
  EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(MaskText, RoundTrip) {
  const NetworkSpec spec = default_detector_spec();
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.4);
  ChannelMask m = ChannelMask::all_alive(spec);
  for (auto& l : m.layers)
    for (auto& a : l.alive) a = coin(rng);
  const std::string hex = encode_mask(m);
  EXPECT_TRUE(decode_mask(hex, spec) == m);
  EXPECT_EQ(encode_mask(ChannelMask::all_alive(spec)), "ffff.ffffffff.ffffffffffffffff.ffffffffffffffff.ffffffffffffffff");
  EXPECT_THROW(decode_mask("ff", spec), InvalidInput);
}

TEST(CsvLog, MetadataRowsAndPartialLine) {
  const fs::path dir = scratch("csv");
  const std::string path = (dir / "log.csv").string();
  {
    CsvLog log(path, {{"config_hash", "abc"}}, {"a", "b"});
    log.append({"1", "x"});
    log.append({"2", ""});
    EXPECT_THROW(log.append({"3"}), InvalidInput);
    EXPECT_THROW(log.append({"3", "y,z"}), InvalidInput);
  }
  {
    std::ofstream f(path, std::ios::app);
    f << "3,partial";  // no newline: a write cut short
  }
  const CsvTable t = read_csv_log(path);
  EXPECT_EQ(t.metadata.at("config_hash"), "abc");
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.at(1, "a"), "2");
  EXPECT_EQ(t.at(1, "b"), "");
  EXPECT_THROW(t.column("c"), InvalidInput);
}

TEST(Summary, Arithmetic) {
  const SummaryTable t = summarize({"a", "b"}, {{0.5, 0.7}, {0.6, 0.9}}, {10, 20});
  EXPECT_DOUBLE_EQ(t.round_avg[0], 0.6);
  EXPECT_DOUBLE_EQ(t.round_avg[1], 0.75);
  EXPECT_DOUBLE_EQ(t.condition_avg[0], 0.55);
  EXPECT_DOUBLE_EQ(t.condition_avg[1], 0.8);
  EXPECT_DOUBLE_EQ(t.overall, 0.675);
  const std::string csv = summary_csv(t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "round,a,b,avg");
  EXPECT_NE(csv.find("flops_total=30"), std::string::npos);
  EXPECT_NE(summary_text(t).find("67.50"), std::string::npos);
  EXPECT_THROW(summarize({"a"}, {{0.1, 0.2}}, {}), InvalidInput);
}

TEST(Metrics, Formatting) {
  EXPECT_EQ(std::stod(fmt_double(0.1)), 0.1);
  EXPECT_EQ(hex64(255), "00000000000000ff");
}

TEST(Experiment, MissingArtifactsListsEveryPath) {
  const fs::path dir = scratch("missing");
  const ArtifactPaths paths{dir};
  try {
    require_files({paths.checkpoint(), paths.stats()});
    FAIL() << "expected an error";
  } catch (const InvalidInput& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find(paths.checkpoint().string()), std::string::npos);
    EXPECT_NE(what.find(paths.stats().string()), std::string::npos);
  }
}

}  // namespace
}  // namespace ctta
