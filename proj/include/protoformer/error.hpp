#pragma once

#include <stdexcept>
#include <string>

namespace protoformer {

/// Base class for every error raised by the library. The CLI maps each
/// subclass to its own nonzero exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Unknown scheme, invalid hyperparameter, incompatible checkpoint, bad file.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Non-finite costs, losses or activations.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

/// More targets than queries in a set matching problem.
class CapacityError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 5; }
};

class IncompletePredictionError : public Error {
 public:
  explicit IncompletePredictionError(int unified_id)
      : Error("prediction is missing unified landmark id " + std::to_string(unified_id)),
        missing_id_(unified_id) {}
  int missing_id() const noexcept { return missing_id_; }
  int exit_code() const noexcept override { return 6; }

 private:
  int missing_id_;
};

/// Zero normalizer, zero gating vector and similar degenerate inputs.
class DegenerateError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 7; }
};

/// A statistic requested over an empty sample.
class UndefinedStatisticError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 8; }
};

}  // namespace protoformer
