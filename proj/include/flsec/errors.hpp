#pragma once

#include <stdexcept>
#include <string>

namespace flsec {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument: dimension mismatch, out-of-range scalar, empty input.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A value does not fit the fixed-point field encoding.
class RangeError : public Error {
 public:
  RangeError(const std::string& what, std::size_t coordinate)
      : Error(what), coordinate_(coordinate) {}
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t coordinate_;
};

// Fewer Shamir shares than the reconstruction threshold.
class ThresholdError : public Error {
 public:
  using Error::Error;
};

// Malformed or out-of-order protocol input.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Scenario / config validation failure. `field()` is the dotted key path.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

}  // namespace flsec
