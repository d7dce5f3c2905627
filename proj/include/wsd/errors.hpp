#pragma once

#include <stdexcept>
#include <string>

namespace wsd {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed arguments: invalid boxes, shape mismatches.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration: unknown keys, out-of-range values, infeasible settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset or checkpoint files that fail validation.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values during training or a failed gradient check.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Process exit codes used by the command-line driver.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumerical = 4,
};

}  // namespace wsd
