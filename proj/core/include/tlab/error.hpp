#pragma once

#include <stdexcept>
#include <string>

namespace tlab {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument lies outside the mathematical domain of an operation (log/sqrt of a negative, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A scalar was required but a higher-rank value was supplied.
class RankError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument value.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (bad magic, truncated file, version mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure at runtime (divergence, undefined quantity).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace tlab
