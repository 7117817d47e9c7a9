#pragma once

#include <stdexcept>
#include <string>

namespace phononcounts {

/// Invalid configuration or arguments supplied by the caller (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, corrupt or physically inconsistent input data (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A fit or iterative procedure failed to converge (CLI exit code 4).
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace phononcounts
