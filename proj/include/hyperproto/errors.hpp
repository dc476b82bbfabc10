/* Copyright 2026 The hyperproto Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License. */

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hyperproto {

/// Precondition violated by a caller (bad dimension, unknown id, ...).
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Hierarchy file could not be turned into a valid tree.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Binary payload is malformed. Carries the byte offset where decoding failed.
struct FormatError : std::runtime_error {
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
  std::size_t byte_offset;
};

/// A file on disk (manifest, template, checkpoint) failed validation.
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Optimization produced a non-finite loss.
struct TrainingError : std::runtime_error {
  TrainingError(const std::string& what, int at_epoch)
      : std::runtime_error(what), epoch(at_epoch) {}
  int epoch;
};

/// Model or run configuration is internally inconsistent.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace hyperproto
