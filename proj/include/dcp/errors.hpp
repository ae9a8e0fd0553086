#pragma once

#include <stdexcept>
#include <string>

namespace dcp {

// All library failures derive from Error so callers can catch one type; the
// CLI maps the concrete kind onto an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not conform for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a forward or backward computation, or a diverging solve.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or architecture description.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition (missing tape record, inconsistent masks, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or version-mismatched checkpoint/dataset file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad user-supplied data values such as out-of-range labels.
class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace dcp
