#pragma once

#include <stdexcept>
#include <string>

namespace clipo {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf input, zero-norm embedding and similar numeric failures.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Violated precondition of an operation (wrong argument, misuse).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Configuration file or override problems.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or incompatible checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace clipo
