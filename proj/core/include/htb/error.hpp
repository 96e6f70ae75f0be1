#pragma once

#include <stdexcept>
#include <string>

namespace htb {

// Root of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments or configuration. The CLI maps these to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class SizeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class PlacementError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LayerError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Malformed on-disk data.
class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptRecordError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IncompatibilityError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Non-finite values during optimization; `step` is the iteration index.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, long step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

// Divergence during training; `step` is the epoch index.
class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Missing or tampered run artifacts.
class ManifestError : public Error {
 public:
  using Error::Error;
};

}  // namespace htb
