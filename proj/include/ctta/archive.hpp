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

// Versioned binary container shared by checkpoints and source statistics.
//
// Layout, all integers and floats little-endian:
//   "CTTA" | u32 version | u32 kind | u64 spec hash | u32 entry count
//   entries: u32 name length | name | u8 dtype | payload
//     dtype 0 (tensor): u64 n, c, h, w | f64 values
//     dtype 1 (count):  u64 value
//   u64 FNV-1a checksum of every preceding byte

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ctta/detector.hpp"
#include "ctta/errors.hpp"
#include "ctta/source_stats.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

inline constexpr std::uint32_t kArchiveVersion = 1;
inline constexpr char kArchiveMagic[4] = {'C', 'T', 'T', 'A'};

enum class ArchiveKind : std::uint32_t { checkpoint = 1, source_stats = 2 };

/// Decoded archive contents before interpretation.
struct RawArchive {
  ArchiveKind kind = ArchiveKind::checkpoint;
  std::uint64_t spec_hash = 0;
  std::map<std::string, Tensor4> tensors;
  std::map<std::string, std::uint64_t> counts;
};

namespace detail {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  std::size_t offset() const { return pos_; }
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw ParseError("archive truncated", pos_);
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_archive(const RawArchive& a) {
  detail::Writer w;
  w.bytes(kArchiveMagic, 4);
  w.u32(kArchiveVersion);
  w.u32(static_cast<std::uint32_t>(a.kind));
  w.u64(a.spec_hash);
  w.u32(static_cast<std::uint32_t>(a.tensors.size() + a.counts.size()));
  auto name = [&](const std::string& n) {
    w.u32(static_cast<std::uint32_t>(n.size()));
    w.bytes(n.data(), n.size());
  };
  for (const auto& [n, t] : a.tensors) {
    name(n);
    w.u8(0);
    const Shape4 s = t.shape();
    w.u64(s.n);
    w.u64(s.c);
    w.u64(s.h);
    w.u64(s.w);
    for (double v : t.data()) w.f64(v);
  }
  for (const auto& [n, v] : a.counts) {
    name(n);
    w.u8(1);
    w.u64(v);
  }
  std::string out = w.buffer();
  detail::Writer tail;
  tail.u64(fnv1a(out));
  return out + tail.buffer();
}

inline RawArchive decode_archive(const std::string& buf) {
  constexpr std::size_t kHeader = 4 + 4 + 4 + 8 + 4;
  if (buf.size() < kHeader + 8) throw ParseError("archive truncated", buf.size());
  detail::Reader r(buf, buf.size() - 8);
  if (r.str(4) != std::string(kArchiveMagic, 4)) throw ParseError("bad archive magic", 0);
  const std::uint32_t version = r.u32();
  if (version != kArchiveVersion) throw UnsupportedVersion(version, kArchiveVersion);
  RawArchive a;
  const std::uint32_t kind = r.u32();
  if (kind != 1 && kind != 2) throw ParseError(concat("unknown archive kind ", kind), 8);
  a.kind = static_cast<ArchiveKind>(kind);
  a.spec_hash = r.u64();
  const std::uint32_t entries = r.u32();
  for (std::uint32_t e = 0; e < entries; ++e) {
    const std::size_t at = r.offset();
    const std::uint32_t len = r.u32();
    std::string n = r.str(len);
    const std::uint8_t dtype = r.u8();
    if (dtype == 0) {
      Shape4 s{r.u64(), r.u64(), r.u64(), r.u64()};
      const std::uint64_t count = s.n * s.c * s.h * s.w;
      if (s.c > (1u << 30) || s.h > (1u << 30) || s.w > (1u << 30) || count > (std::uint64_t{1} << 56) ||
          (s.c * s.h * s.w != 0 && count / (s.c * s.h * s.w) != s.n))
        throw ParseError("tensor shape overflow", at);
      r.need(count * 8);
      Tensor4 t(s);
      for (double& v : t.data()) v = r.f64();
      a.tensors.emplace(std::move(n), std::move(t));
    } else if (dtype == 1) {
      a.counts.emplace(std::move(n), r.u64());
    } else {
      throw ParseError(concat("unknown entry type ", static_cast<int>(dtype)), at);
    }
  }
  if (r.offset() != buf.size() - 8) throw ParseError("trailing bytes before checksum", r.offset());
  std::uint64_t stored = 0;
  for (std::size_t i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[buf.size() - 8 + i])) << (8 * i);
  if (stored != fnv1a(std::string_view(buf.data(), buf.size() - 8)))
    throw ParseError("archive checksum mismatch", buf.size() - 8);
  return a;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InvalidInput("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InvalidInput("write to '" + path + "' failed");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InvalidInput("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

namespace detail {
inline Tensor4 vec_tensor(const std::vector<double>& v) {
  Tensor4 t(Shape4{1, v.size(), 1, 1});
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}
inline std::vector<double> tensor_vec(const Tensor4& t) { return {t.data().begin(), t.data().end()}; }

template <typename Map>
const auto& entry(const Map& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw LayoutMismatch("archive has no entry '" + key + "'");
  return it->second;
}

inline void expect(const RawArchive& a, ArchiveKind kind, const NetworkSpec& spec) {
  if (a.kind != kind)
    throw LayoutMismatch(kind == ArchiveKind::checkpoint ? "archive is not a checkpoint"
                                                         : "archive is not a statistics file");
  if (a.spec_hash != spec_hash(spec)) throw LayoutMismatch("archive was written for a different network");
}
}  // namespace detail

// --- checkpoints -------------------------------------------------------------

inline std::string encode_checkpoint(const NetworkState& st) {
  RawArchive a;
  a.kind = ArchiveKind::checkpoint;
  a.spec_hash = spec_hash(st.spec);
  for (const auto& [n, t] : st.params) a.tensors["param/" + n] = t;
  for (const auto& [n, s] : st.running) {
    a.tensors["running/" + n + "/mean"] = detail::vec_tensor(s.mean);
    a.tensors["running/" + n + "/var"] = detail::vec_tensor(s.var);
  }
  for (const auto& [n, g] : st.source_gamma()) a.tensors["gamma0/" + n] = detail::vec_tensor(g);
  return encode_archive(a);
}

/// Rebuilds a state for `spec`; every parameter must be present with the
/// shape the network expects.
inline NetworkState decode_checkpoint(const std::string& bytes, const NetworkSpec& spec) {
  const RawArchive a = decode_archive(bytes);
  detail::expect(a, ArchiveKind::checkpoint, spec);
  NetworkState st = init_state(spec, 0);
  for (auto& [n, t] : st.params) {
    const Tensor4& src = detail::entry(a.tensors, "param/" + n);
    if (src.shape() != t.shape())
      throw LayoutMismatch(concat("parameter '", n, "' has shape ", src.shape().str(), ", expected ", t.shape().str()));
    t = src;
  }
  for (auto& [n, s] : st.running) {
    s.mean = detail::tensor_vec(detail::entry(a.tensors, "running/" + n + "/mean"));
    s.var = detail::tensor_vec(detail::entry(a.tensors, "running/" + n + "/var"));
    if (s.mean.size() != spec.layer(n).out_ch || s.var.size() != s.mean.size())
      throw LayoutMismatch("running statistics for '" + n + "' have the wrong length");
  }
  std::map<std::string, std::vector<double>> g0;
  for (const auto& n : spec.considered_bn()) {
    auto it = a.tensors.find("gamma0/" + n);
    if (it == a.tensors.end()) continue;
    g0[n] = detail::tensor_vec(it->second);
    if (g0[n].size() != spec.layer(n).out_ch) throw LayoutMismatch("source gamma for '" + n + "' has the wrong length");
  }
  if (!g0.empty()) {
    if (g0.size() != spec.considered_bn().size()) throw LayoutMismatch("incomplete source gamma snapshot");
    st.restore_source_gamma(std::move(g0));
  }
  return st;
}

inline void save_checkpoint(const std::string& path, const NetworkState& st) {
  write_file(path, encode_checkpoint(st));
}
inline NetworkState load_checkpoint(const std::string& path, const NetworkSpec& spec) {
  return decode_checkpoint(read_file(path), spec);
}

// --- source statistics ---------------------------------------------------------

inline std::string encode_stats(const SourceStats& s) {
  RawArchive a;
  a.kind = ArchiveKind::source_stats;
  a.spec_hash = s.spec_hash;
  a.counts["images"] = s.images;
  a.counts["roi_size"] = s.roi_size;
  for (const auto& l : s.layers) {
    a.tensors["layer/" + l.layer + "/feature_mean"] = l.feature_mean;
    a.tensors["layer/" + l.layer + "/roi_mean"] = l.roi_mean;
  }
  a.tensors["image/mean"] = detail::vec_tensor(s.image_mean);
  a.tensors["image/var"] = detail::vec_tensor(s.image_var);
  for (const auto& [k, c] : s.classes) {
    const std::string p = concat("class/", k, "/");
    a.tensors[p + "mean"] = detail::vec_tensor(c.mean);
    a.tensors[p + "var"] = detail::vec_tensor(c.var);
    a.counts[p + "count"] = c.count;
  }
  return encode_archive(a);
}

inline SourceStats decode_stats(const std::string& bytes, const NetworkSpec& spec) {
  const RawArchive a = decode_archive(bytes);
  detail::expect(a, ArchiveKind::source_stats, spec);
  SourceStats s;
  s.spec_hash = a.spec_hash;
  s.images = detail::entry(a.counts, "images");
  s.roi_size = detail::entry(a.counts, "roi_size");
  for (const auto& n : spec.considered_bn())
    s.layers.push_back({n, detail::entry(a.tensors, "layer/" + n + "/feature_mean"),
                        detail::entry(a.tensors, "layer/" + n + "/roi_mean")});
  s.image_mean = detail::tensor_vec(detail::entry(a.tensors, "image/mean"));
  s.image_var = detail::tensor_vec(detail::entry(a.tensors, "image/var"));
  for (std::size_t k = 0; k < head_of(spec).num_classes; ++k) {
    const std::string p = concat("class/", k, "/");
    if (!a.counts.count(p + "count")) continue;
    ClassSourceStats c;
    c.count = a.counts.at(p + "count");
    c.mean = detail::tensor_vec(detail::entry(a.tensors, p + "mean"));
    c.var = detail::tensor_vec(detail::entry(a.tensors, p + "var"));
    s.classes[k] = std::move(c);
  }
  check_layout(s, spec);
  return s;
}

inline void save_stats(const std::string& path, const SourceStats& s) { write_file(path, encode_stats(s)); }
inline SourceStats load_stats(const std::string& path, const NetworkSpec& spec) {
  return decode_stats(read_file(path), spec);
}

}  // namespace ctta
