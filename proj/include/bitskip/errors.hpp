#pragma once

#include <stdexcept>
#include <string>

namespace bitskip {

// Root of every error the library throws. The CLI maps the subclasses onto
// process exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not agree for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Hadamard transform requested on a length that is not a power of two.
class TransformSizeError : public DimensionError {
 public:
  using DimensionError::DimensionError;
};

// Misuse of the autodiff tape: consumed graph, non-scalar loss, ...
class GraphError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf found by a debug-mode finiteness check.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Argument outside its documented domain (layer index, bit width, ...).
class RangeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: unknown key, type mismatch, violated invariant.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Checkpoint or CSV content that cannot be decoded.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Checkpoint written for a different variant or model shape.
class VariantMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

// File system failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace bitskip
