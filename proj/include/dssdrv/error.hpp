// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace dssdrv {

// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or argument contracts violated.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or a numerically undefined request (e.g. silent SNR target).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable input files (WAV, manifest, checkpoint).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Configuration/usage errors.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing or unusable data: empty corpus, manifest without records.
class DataError : public Error {
 public:
  using Error::Error;
};

// Scene sampling failed inside its rejection budget.
class PlacementError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

#define DSSDRV_CHECK(cond, ErrorType, ...)                         \
  do {                                                             \
    if (!(cond)) throw ErrorType(::dssdrv::detail::concat(__VA_ARGS__)); \
  } while (0)

}  // namespace dssdrv
