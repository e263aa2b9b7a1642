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

// Pipeline tests on a small, briefly trained detector.

#include <gtest/gtest.h>

#include <filesystem>

#include "ctta/ctta.hpp"

namespace fs = std::filesystem;

namespace ctta {
namespace {

class StreamTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    log::level() = log::Level::quiet;
    cfg_ = new ExperimentConfig(config_from_json(Json::object()));
    cfg_->source_images = 24;
    cfg_->pretrain.epochs = 2;
    cfg_->stats.min_class_samples = 2;
    cfg_->stream.conditions = {{Corruption::noise, 3}, {Corruption::defocus, 2}};
    cfg_->stream.images_per_condition = 8;
    cfg_->stream.rounds = 2;
    cfg_->stream.batch_size = 4;
    cfg_->adapt.prune.p = 0.3;
    source_ = new NetworkState(pretrain_from_config(*cfg_));
    stats_ = new SourceStats(stats_from_config(*source_, *cfg_));
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete source_;
    delete stats_;
  }

  static fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ctta_stream_" + name);
    fs::remove_all(p);
    return p;
  }

  static ExperimentConfig* cfg_;
  static NetworkState* source_;
  static SourceStats* stats_;
};

ExperimentConfig* StreamTest::cfg_ = nullptr;
NetworkState* StreamTest::source_ = nullptr;
SourceStats* StreamTest::stats_ = nullptr;

TEST_F(StreamTest, TargetStreamSharesCleanImages) {
  const auto domains = make_target_stream(cfg_->scene, cfg_->stream);
  ASSERT_EQ(domains.size(), 2u);
  EXPECT_EQ(domains[0].name, "noise-3");
  EXPECT_EQ(domains[1].name, "defocus-2");
  std::size_t objects[2] = {0, 0};
  for (std::size_t d = 0; d < 2; ++d) {
    ASSERT_EQ(domains[d].data.size(), 8u);
    for (const auto& s : domains[d].data) objects[d] += s.objects.size();
  }
  EXPECT_EQ(objects[0], objects[1]);
  const auto again = make_target_stream(cfg_->scene, cfg_->stream);
  EXPECT_TRUE(again[0].data[3].image == domains[0].data[3].image);
}

TEST_F(StreamTest, DryRunIsFrozen) {
  const auto domains = make_target_stream(cfg_->scene, cfg_->stream);
  const ContinualResult r = run_continual(*source_, *stats_, domains, cfg_->stream, cfg_->adapt, true);
  EXPECT_EQ(r.steps, 0u);
  EXPECT_EQ(r.ledger.overall.bwd, 0u);
  EXPECT_TRUE(r.final_state == *source_);
  ASSERT_EQ(r.summary.map.size(), 2u);
  EXPECT_EQ(r.summary.map[0], r.summary.map[1]);  // the same frozen model sees the same images
}

TEST_F(StreamTest, SingleBatchIsOneStep) {
  StreamConfig s = cfg_->stream;
  s.rounds = 1;
  s.conditions = {{Corruption::motion, 3}};
  s.images_per_condition = 4;
  const auto domains = make_target_stream(cfg_->scene, s);
  const ContinualResult r = run_continual(*source_, *stats_, domains, s, cfg_->adapt);
  EXPECT_EQ(r.steps + r.skipped, 1u);
  ASSERT_EQ(r.telemetry.size(), 1u);
  EXPECT_EQ(r.telemetry[0].images, 4u);
  EXPECT_GT(r.ledger.overall.bwd, 0u);
}

TEST_F(StreamTest, PredictionsPrecedeTheUpdate) {
  const auto domains = make_target_stream(cfg_->scene, cfg_->stream);
  StreamConfig one = cfg_->stream;
  one.rounds = 1;
  // The first batch is predicted by the unmodified source model.
  NetworkState st = *source_;
  AdaptState a = init_adapt_state(*stats_, cfg_->adapt);
  const Tensor4 batch = stack_images(domains[0].data, 0, 4);
  const AdaptStepResult step = adapt_batch(st, a, *stats_, batch, cfg_->adapt);
  const InferenceResult ref = infer(*source_, batch, derive_mask(*source_, cfg_->adapt.prune.t));
  ASSERT_EQ(step.detections.size(), ref.detections.size());
  for (std::size_t i = 0; i < ref.detections.size(); ++i) {
    ASSERT_EQ(step.detections[i].size(), ref.detections[i].size());
    for (std::size_t j = 0; j < ref.detections[i].size(); ++j) {
      EXPECT_EQ(step.detections[i][j].box, ref.detections[i][j].box);
      EXPECT_EQ(step.detections[i][j].confidence, ref.detections[i][j].confidence);
    }
  }
  // Results for a domain do not depend on what comes after it.
  const ContinualResult both = run_continual(*source_, *stats_, domains, one, cfg_->adapt);
  const ContinualResult first = run_continual(*source_, *stats_, {domains[0]}, one, cfg_->adapt);
  EXPECT_EQ(both.maps[0].map.map, first.maps[0].map.map);
  for (std::size_t i = 0; i < first.rho.size(); ++i) EXPECT_EQ(both.rho[i], first.rho[i]);
}

TEST_F(StreamTest, LogsRebuildTheSummaryAndTrackState) {
  const fs::path dir = scratch("logs");
  const ContinualResult r = run_experiment(*cfg_, *source_, *stats_, dir, false);
  const RunFiles files = run_files(dir, false);
  const CsvTable batches = read_csv_log(files.batches.string());
  const CsvTable rounds = read_csv_log(files.rounds.string());
  EXPECT_EQ(batches.metadata.at("config_hash"), hex64(config_hash(*cfg_)));
  EXPECT_EQ(batches.metadata.count("timestamp"), 0u);
  ASSERT_EQ(batches.rows.size(), r.telemetry.size());
  EXPECT_EQ(batches.at(0, "state_checksum"), hex64(gamma_checksum(*source_)));
  EXPECT_NE(batches.at(1, "state_checksum"), batches.at(0, "state_checksum"));
  for (std::size_t i = 0; i < batches.rows.size(); ++i)
    EXPECT_TRUE(decode_mask(batches.at(i, "mask"), cfg_->network) == r.telemetry[i].mask);
  const SummaryTable t = summary_from_logs(rounds, batches);
  EXPECT_EQ(t.overall, r.summary.overall);
  EXPECT_EQ(t.flops, r.summary.flops);
  EXPECT_TRUE(fs::exists(files.checkpoint));
  EXPECT_TRUE(load_checkpoint(files.checkpoint.string(), cfg_->network) == r.final_state);
}

TEST_F(StreamTest, RerunIsByteIdentical) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  run_experiment(*cfg_, *source_, *stats_, a, false);
  run_experiment(*cfg_, *source_, *stats_, b, false);
  for (const char* f : {"metrics.csv", "rounds.csv", "summary.csv", "summary.txt", "adapted.ckpt"})
    EXPECT_EQ(read_file((a / f).string()), read_file((b / f).string())) << f;
}

TEST_F(StreamTest, PretrainIsDeterministic) {
  ExperimentConfig c = *cfg_;
  c.source_images = 8;
  c.pretrain.epochs = 1;
  EXPECT_EQ(encode_checkpoint(pretrain_from_config(c)), encode_checkpoint(pretrain_from_config(c)));
}

}  // namespace
}  // namespace ctta
