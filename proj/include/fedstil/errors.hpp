#pragma once

#include <stdexcept>
#include <string>

namespace fedstil {

// Base type for everything thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

class InvalidLabelError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class EmptyTaskError : public Error {
 public:
  using Error::Error;
};

class OrderingError : public Error {
 public:
  using Error::Error;
};

class MissingFeatureError : public Error {
 public:
  using Error::Error;
};

class MissingParamsError : public Error {
 public:
  using Error::Error;
};

class EmptyEvalError : public Error {
 public:
  using Error::Error;
};

class UndefinedForgettingError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedstil
