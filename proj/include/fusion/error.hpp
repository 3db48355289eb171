#pragma once

#include <stdexcept>
#include <string>

namespace fusion {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input/configuration problems. The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class EmptySetError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// File format problems.
class FormatError : public Error {
 public:
  using Error::Error;
};
class CorruptionError : public FormatError {
 public:
  using FormatError::FormatError;
};
class IoError : public Error {
 public:
  using Error::Error;
};

// Runtime state problems.
class TaskError : public Error {
 public:
  using Error::Error;
};
class StateError : public Error {
 public:
  using Error::Error;
};
class MetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace fusion
