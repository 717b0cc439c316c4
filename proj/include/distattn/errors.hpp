// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0

#ifndef DISTATTN_ERRORS_HPP
#define DISTATTN_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace distattn {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Operand dimensions do not match the operation's contract.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

/// Invalid configuration value (zero workers, non-divisible split, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

/// A schedule failed validation or does not fit the shards.
class ScheduleError : public Error {
 public:
  explicit ScheduleError(const std::string& what) : Error(what) {}
};

/// An operation was invoked before its required state exists
/// (e.g. backward before forward).
class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error(what) {}
};

/// A softmax row absorbed no keys; finalizing it would divide by zero.
/// Schedules guarantee every query sees at least its own chunk's diagonal,
/// so hitting this indicates a schedule bug, not an input problem.
class DegenerateRowError : public Error {
 public:
  explicit DegenerateRowError(const std::string& what) : Error(what) {}
};

}  // namespace distattn

#endif  // DISTATTN_ERRORS_HPP
