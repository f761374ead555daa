#pragma once

#include <stdexcept>
#include <string>

namespace bugloc {

/// Base error for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: malformed files, invalid configs, violated preconditions.
/// The CLI maps these to exit code 1, everything else to 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace bugloc
