#pragma once

#include <stdexcept>
#include <string>

namespace cbs {

// Runtime failure (I/O, numerical breakdown). CLI exit code 1.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Invalid input, config, or violated invariant. CLI exit code 2.
class ValidationError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

} // namespace cbs
