#pragma once

#include <stdexcept>
#include <string>

namespace geomask {

// Base for every failure raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Malformed or missing user input (files, config values).
class InputError : public Error {
public:
  using Error::Error;
};

// A numerical routine could not produce a valid result.
class NumericalError : public Error {
public:
  using Error::Error;
};

}  // namespace geomask
