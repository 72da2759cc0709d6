#pragma once

#include <stdexcept>
#include <string>

namespace rlcore {

// Base class for all library errors. Subclasses pick the failure domain so
// callers can map them to exit codes (config -> 2, everything else -> 1).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement (dimension mismatch, invalid axis, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Numeric domain violation (log of non-positive input, division by zero).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (lo > hi, beta outside [0,1], ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Illegal object state (tape already consumed, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

// A required observation group is missing.
class RoutingError : public Error {
 public:
  using Error::Error;
};

// Run configuration is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Environment-level fault (NaN action, ...).
class EnvFault : public Error {
 public:
  using Error::Error;
};

// Training-time fault (NaN loss, diverged stats).
class TrainFault : public Error {
 public:
  using Error::Error;
};

// Malformed checkpoint / export / metrics file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Wire protocol violation or peer failure.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Numerical procedure failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace rlcore
