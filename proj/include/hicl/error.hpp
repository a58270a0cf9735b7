#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hicl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised when an operation produces NaN or Inf. Carries the graph node that
// produced it (or npos when raised outside a graph).
class NonFiniteError : public Error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  NonFiniteError(const std::string& what, std::size_t node = npos)
      : Error(what), node_(node) {}

  std::size_t node() const noexcept { return node_; }

 private:
  std::size_t node_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace hicl
