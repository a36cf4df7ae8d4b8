// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef TAPEPROP_ERRORS_HPP
#define TAPEPROP_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace tapeprop {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not line up.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension error: " + what) {}
};

/// Invalid option, bit width, network topology or schedule.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("configuration error: " + what) {}
};

/// Tapes, parameters or engine state used out of order.
class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error("state error: " + what) {}
};

class EncodingError : public Error {
 public:
  explicit EncodingError(const std::string& what) : Error("encoding error: " + what) {}
};

class DecodingError : public Error {
 public:
  explicit DecodingError(const std::string& what) : Error("decoding error: " + what) {}
};

/// Malformed dataset file.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("I/O error: " + what) {}
};

/// Labels or samples outside their declared domain.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error: " + what) {}
};

}  // namespace tapeprop

#endif  // TAPEPROP_ERRORS_HPP
