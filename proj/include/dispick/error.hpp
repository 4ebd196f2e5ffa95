#pragma once

#include <stdexcept>
#include <string>

namespace dispick {

/// Base for every error raised by the library. `exit_code()` follows the
/// CLI convention: 1 usage/configuration, 2 data, 3 numerical failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not fit together; raised before any arithmetic.
class StructuralError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

}  // namespace dispick
