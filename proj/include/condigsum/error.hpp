#pragma once

#include <stdexcept>
#include <string>

namespace condigsum {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed external input (corpus lines, config files, checkpoints).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A precondition on a value was violated.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Operand shapes are incompatible for a tensor op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace condigsum
