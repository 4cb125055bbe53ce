#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cvthead {

// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or array dimensions that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value (unknown activation, odd encoding width, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file or wire payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Data parsed fine but violates a domain invariant.
class InvariantError : public Error {
 public:
  using Error::Error;
};

// API used out of contract (e.g. backward on a non-scalar).
class UsageError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf caught at an op boundary in checked mode.
class NumericError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(std::size_t step, const std::string& what)
      : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace cvthead
