#pragma once

#include <stdexcept>
#include <string>

namespace mcr {

// Base class for every failure raised by the library. Malformed inputs are
// rejected with one of these, never repaired.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mcr
