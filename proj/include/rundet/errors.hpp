#pragma once

#include <stdexcept>
#include <string>

namespace rundet {

/// Tensor extents that do not fit the operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Index outside its valid range (e.g. a class target).
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A caller broke an API contract (non-scalar backward root, wrong stage...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Inconsistent or invalid experiment/model configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stored data failed an integrity check.
class CorruptionError : public IoError {
 public:
  using IoError::IoError;
};

/// Training produced a non-finite loss.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rundet
