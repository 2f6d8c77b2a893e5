#pragma once

#include <stdexcept>
#include <string>

namespace refocus {

/** Base class of every error raised by the library. */
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/** Invalid configuration or argument (CLI exit code 2). */
class ParameterError : public Error {
 public:
  using Error::Error;
};

/** Malformed, missing or inconsistent input data (CLI exit code 3). */
class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

class DecodeError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

/** A required named tensor is absent from a checkpoint. */
class MissingTensorError : public DataError {
 public:
  MissingTensorError(const std::string& logical, const std::string& key)
      : DataError("tensor '" + logical + "' (" + key + ") absent from checkpoint"),
        logical_name(logical) {}
  std::string logical_name;
};

/** Numerical failure (CLI exit code 4). */
class NumericError : public Error {
 public:
  using Error::Error;
};

/** A function precondition or postcondition was violated (CLI exit code 4). */
class ContractError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace refocus
