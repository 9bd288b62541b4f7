#pragma once

#include <stdexcept>
#include <string>

namespace mltr {

/// Base class for all library failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not line up (matmul inner dims, broadcast, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: window does not divide the grid, bad variant, ...
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Mathematical domain violation: log of non-positive, division by zero.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// API contract violation: backward on a consumed tape, non-scalar loss.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Dataset / file-format problems.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// A verification run (gradcheck, flops --verify) found a mismatch.
class VerifyError : public Error {
 public:
  using Error::Error;
};

}  // namespace mltr
