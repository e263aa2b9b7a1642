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

// Append-only CSV logs. Metadata lines start with '#'; every row is flushed
// as soon as it is written, so any prefix of the file is a valid log.

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/network.hpp"

namespace ctta {

inline constexpr const char* kCodeVersion = "0.1.0";

/// Shortest round-trip text for a double.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Considered-channel flags as hex, four channels per digit, layers in
/// network order.
inline std::string encode_mask(const ChannelMask& m) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (const auto& l : m.layers) {
    if (!out.empty()) out += '.';
    for (std::size_t i = 0; i < l.alive.size(); i += 4) {
      unsigned v = 0;
      for (std::size_t b = 0; b < 4 && i + b < l.alive.size(); ++b) v |= (l.alive[i + b] ? 1u : 0u) << b;
      out += digits[v];
    }
  }
  return out;
}

inline ChannelMask decode_mask(const std::string& text, const NetworkSpec& spec) {
  ChannelMask m;
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  const auto names = spec.considered_bn();
  if (parts.size() != names.size()) throw InvalidInput("mask text does not match the network's layer count");
  for (std::size_t l = 0; l < names.size(); ++l) {
    const std::size_t c = spec.layer(names[l]).out_ch;
    if (parts[l].size() != (c + 3) / 4) throw InvalidInput("mask text for '" + names[l] + "' has the wrong length");
    ChannelFlags f(c);
    for (std::size_t i = 0; i < c; ++i) {
      const char ch = parts[l][i / 4];
      const unsigned v = ch >= 'a' ? static_cast<unsigned>(ch - 'a' + 10) : static_cast<unsigned>(ch - '0');
      if (v > 15) throw InvalidInput("mask text has an invalid digit");
      f[i] = (v >> (i % 4)) & 1u;
    }
    m.layers.push_back({names[l], std::move(f)});
  }
  return m;
}

/// CSV writer with a fixed header and '# key=value' metadata lines.
class CsvLog {
 public:
  CsvLog(const std::string& path, const std::vector<std::pair<std::string, std::string>>& metadata,
         std::vector<std::string> columns)
      : out_(path, std::ios::trunc), columns_(std::move(columns)) {
    if (!out_) throw InvalidInput("cannot open log '" + path + "'");
    for (const auto& [k, v] : metadata) out_ << "# " << k << '=' << v << '\n';
    for (std::size_t i = 0; i < columns_.size(); ++i) out_ << (i ? "," : "") << columns_[i];
    out_ << '\n';
    out_.flush();
  }

  void append(const std::vector<std::string>& fields) {
    if (fields.size() != columns_.size())
      throw InvalidInput(concat("log row has ", fields.size(), " fields, header has ", columns_.size()));
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (fields[i].find_first_of(",\n") != std::string::npos) throw InvalidInput("log field contains a separator");
      out_ << (i ? "," : "") << fields[i];
    }
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::vector<std::string> columns_;
};

struct CsvTable {
  std::map<std::string, std::string> metadata;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw InvalidInput("log has no column '" + name + "'");
  }
  const std::string& at(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }
};

/// Reads a log written by CsvLog. A trailing partial line (crash mid-write)
/// is ignored.
inline CsvTable read_csv_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open log '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  CsvTable t;
  std::size_t pos = 0;
  auto split = [](const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    return f;
  };
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) break;  // incomplete last line
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) t.metadata[line.substr(2, eq - 2)] = line.substr(eq + 1);
    } else if (t.columns.empty()) {
      t.columns = split(line);
    } else {
      auto f = split(line);
      if (f.size() != t.columns.size()) throw InvalidInput(concat("log row ", t.rows.size() + 1, " is malformed"));
      t.rows.push_back(std::move(f));
    }
  }
  return t;
}

}  // namespace ctta
