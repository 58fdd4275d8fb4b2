// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace histrec {

// Bad shapes, bad config values, incompatible module wiring.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or out-of-range input data (named field + row where possible).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File / serialization problems.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Diverged or otherwise unrecoverable training state.
struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace histrec
