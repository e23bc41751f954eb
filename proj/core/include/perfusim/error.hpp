// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace perfusim {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. Carries the 1-based line number when known (0 otherwise).
class FormatError : public Error {
public:
  FormatError(const std::string &what, int line = 0)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  int line() const noexcept { return line_; }

private:
  int line_;
};

/// Input that parses but violates a geometric invariant (inverted cell, cyclic tree, ...).
class GeometryError : public Error {
public:
  using Error::Error;
};

/// Caller broke a size or shape precondition.
class ContractError : public Error {
public:
  using Error::Error;
};

/// Invalid configuration value. `field()` names the offending key.
class ConfigError : public Error {
public:
  ConfigError(const std::string &field, const std::string &what)
      : Error(field + ": " + what), field_(field) {}
  const std::string &field() const noexcept { return field_; }

private:
  std::string field_;
};

/// Numerical failure: non-convergence, singular systems, broken invariants at runtime.
class SolverError : public Error {
public:
  using Error::Error;
};

} // namespace perfusim
