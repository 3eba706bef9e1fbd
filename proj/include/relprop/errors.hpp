#pragma once

#include <stdexcept>
#include <string>

namespace relprop {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents do not line up (conv channel mismatch, binary op on
// different shapes, ...). When thrown from graph execution the message
// names the offending node.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Bad user-supplied configuration: unknown rule name, K > N, q out of
// range, malformed target spec. CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Problems with data at runtime: unreadable file, empty target region,
// weight blob too short. CLI maps this to exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace relprop
