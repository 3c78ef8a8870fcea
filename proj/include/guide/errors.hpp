#pragma once

#include <stdexcept>
#include <string>

namespace guide {

// Base for every error raised by the library. Subclasses map one-to-one onto
// the failure classes callers are expected to distinguish (the CLI turns them
// into exit codes).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericalFailure : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};

class ConfigMismatch : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public NumericalFailure {
 public:
  DivergenceError(const std::string& what, long step) : NumericalFailure(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

}  // namespace guide
