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

NetworkState sample_state() {
  NetworkState st = init_state(default_detector_spec(), 21);
  st.gamma("bn2")[3] = -0.125;
  st.capture_source_gamma();
  st.gamma("bn2")[3] = 0.0;  // adapted value differs from the snapshot
  return st;
}

TEST(Archive, CheckpointRoundTripIsExact) {
  const NetworkState st = sample_state();
  const std::string bytes = encode_checkpoint(st);
  const NetworkState back = decode_checkpoint(bytes, st.spec);
  EXPECT_TRUE(back == st);
  EXPECT_EQ(back.source_gamma("bn2")[3], -0.125);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Archive, StatsRoundTripIsExact) {
  const NetworkSpec spec = default_detector_spec();
  const NetworkState st = init_state(spec, 3);
  SceneSpec scene;
  StatsConfig cfg;
  cfg.min_class_samples = 1;
  const SourceStats s = collect_source_stats(st, generate_source(scene, 4), cfg);
  const SourceStats back = decode_stats(encode_stats(s), spec);
  EXPECT_TRUE(back == s);
}

TEST(Archive, TruncationIsReported) {
  const std::string bytes = encode_checkpoint(sample_state());
  for (std::size_t keep : {std::size_t{0}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, keep), default_detector_spec()), ParseError) << keep;
}

TEST(Archive, BadMagicAndVersion) {
  std::string bytes = encode_checkpoint(sample_state());
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_archive(magic), ParseError);

  RawArchive a;
  a.tensors["t"] = Tensor4::scalar(1.0);
  std::string v = encode_archive(a);
  v[4] = 9;  // version field, checked before the checksum
  try {
    decode_archive(v);
    FAIL() << "expected UnsupportedVersion";
  } catch (const UnsupportedVersion& e) {
    EXPECT_EQ(e.found(), 9u);
  }
}

TEST(Archive, FlippedPayloadByteFailsChecksum) {
  std::string bytes = encode_checkpoint(sample_state());
  bytes[bytes.size() - 20] ^= 0x01;
  EXPECT_THROW(decode_archive(bytes), ParseError);
}

TEST(Archive, WrongNetworkOrKind) {
  const NetworkState st = sample_state();
  const std::string bytes = encode_checkpoint(st);
  EXPECT_THROW(decode_checkpoint(bytes, default_detector_spec(3, 64, 2)), LayoutMismatch);
  EXPECT_THROW(decode_stats(bytes, st.spec), LayoutMismatch);
}

TEST(Archive, MissingFileNamesThePath) {
  try {
    load_checkpoint("/nonexistent/dir/source.ckpt", default_detector_spec());
    FAIL() << "expected an error";
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/source.ckpt"), std::string::npos);
  }
}

}  // namespace
}  // namespace ctta
