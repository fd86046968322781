#pragma once

#include <stdexcept>
#include <string>

namespace fobor {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unreadable binary file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Data or configuration that violates a documented invariant.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Numerical failure (non-finite values, degenerate normalization, divergence).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace fobor
