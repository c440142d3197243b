#pragma once

#include <stdexcept>
#include <string>

namespace wtal {

// Error taxonomy mapped to CLI exit codes: config/usage -> 2, I/O -> 3,
// numeric failures -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace wtal
