#pragma once

#include <stdexcept>
#include <string>

namespace latte {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument or violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A value went NaN/Inf somewhere it must not.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or file whose contents do not match what the caller expects.
class IncompatibleCheckpoint : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace latte
