// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or violated configuration invariant.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Configuration text that failed to parse; carries the 1-based line number.
class ParseError : public ConfigError {
 public:
  ParseError(std::size_t line, const std::string& message)
      : ConfigError("line " + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// NaN/Inf values, negative probabilities, diverged losses.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Routing could not be decided (missing labels, unknown language, missing router).
class RoutingError : public Error {
 public:
  using Error::Error;
};

/// Malformed, unreadable, or too small data files and shards.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint is truncated, corrupt, or does not match the configuration.
class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace moelab
