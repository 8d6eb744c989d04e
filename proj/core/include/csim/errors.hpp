#pragma once

#include <stdexcept>
#include <string>

namespace csim {

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An index (class label, row, position) is outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A caller violated a documented precondition that is not a pure shape
/// mismatch, e.g. mixing abstraction levels or feeding a mislabeled pair.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration values or combinations.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A function under evaluation produced a non-finite result.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be read, written or parsed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace csim
