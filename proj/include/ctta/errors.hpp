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

#include <cstddef>
#include <cstdint>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ctta {

/// Raised when an operation receives arguments that violate its contract
/// (shape mismatch, bad mask length, out-of-range hyperparameter).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an object is used in a state that forbids the call,
/// e.g. reversing a tape twice.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Corrupt or truncated archive. `offset` is the byte position where
/// decoding stopped.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class UnsupportedVersion : public std::runtime_error {
 public:
  UnsupportedVersion(std::uint32_t found, std::uint32_t expected)
      : std::runtime_error("unsupported archive version " + std::to_string(found) +
                           " (expected " + std::to_string(expected) + ")"),
        found_(found) {}
  std::uint32_t found() const noexcept { return found_; }

 private:
  std::uint32_t found_;
};

/// Archive written for a different network layout.
class LayoutMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

namespace log {

enum class Level { quiet = 0, warn = 1, info = 2 };

inline Level& level() {
  static Level lvl = Level::warn;
  return lvl;
}

inline void warn(const std::string& msg) {
  if (level() >= Level::warn) std::clog << "[warn] " << msg << '\n';
}

inline void info(const std::string& msg) {
  if (level() >= Level::info) std::clog << "[info] " << msg << '\n';
}

}  // namespace log

template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace ctta
