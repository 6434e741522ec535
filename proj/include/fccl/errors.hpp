#pragma once

#include <stdexcept>
#include <string>

namespace fccl {

/// Operand dimensions do not fit together.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar argument or label is outside its legal range.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Object used in a state it does not support (e.g. a stale forward cache).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Experiment configuration is invalid or inconsistent.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss or parameter became non-finite during training.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::string diagnostic)
      : std::runtime_error(what), diagnostic_(std::move(diagnostic)) {}

  const std::string& diagnostic() const noexcept { return diagnostic_; }

 private:
  std::string diagnostic_;
};

}  // namespace fccl
