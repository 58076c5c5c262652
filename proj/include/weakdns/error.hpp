// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <stdexcept>
#include <string>

namespace weakdns {

/// Violated precondition on a value: bad shape, non-finite sample, empty input.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent run configuration.
class ConfigError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Problem with data on disk: missing file, unsupported WAV, duplicate id.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Audio at a rate other than 16 kHz.
class SampleRateMismatch : public DataError {
 public:
  using DataError::DataError;
};

/// A training stage was requested before its prerequisites exist.
class SequencingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A finite data stream ran out before a protocol cycle could be assembled.
class StreamExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require(bool cond, const std::string& what) {
  if (!cond) throw DomainError(what);
}
}  // namespace detail

}  // namespace weakdns
