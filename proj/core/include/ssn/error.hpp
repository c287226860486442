#pragma once

#include <stdexcept>
#include <string>

namespace ssn {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes disagree. The message names the offending axis.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid network, training or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation is not valid in the object's current state (e.g. double FSM insertion).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range argument to an analysis or query routine.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or incompatible file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssn
