#pragma once

#include <stdexcept>
#include <string>

namespace mflow {

// Caller broke a documented precondition (shapes, dimensions, ranges).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid parameter data handed to a primitive (e.g. non-monotone spline knots).
class ParameterValidationError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

// Numerics went bad: non-finite values, degenerate Jacobians, solver failure.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GramDegenerateError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class OffManifoldError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class SolverError : public NumericalError {
 public:
  SolverError(const std::string& what, double residual)
      : NumericalError(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

class UnsupportedConfiguration : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace mflow
