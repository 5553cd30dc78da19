#pragma once

#include <stdexcept>
#include <string>

namespace sage {

// Base for every error raised by the library. The CLI maps each subclass to a
// distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing or unreadable input file.
class FileError : public Error {
 public:
  using Error::Error;
};

// Malformed data row or invalid dataset content.
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (priors, settings, model kind, grid).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Linear algebra failure that jitter could not repair.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// The sampler could not find or keep a state with finite likelihood.
class InferenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace sage
