#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mshed {

// Root of every error raised by the library. Callers that only need a
// diagnostic can catch this; the subclasses carry the failure category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite value encountered. `index` is the token position (or step)
// where it first appeared.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::int64_t index)
      : Error(what + " (at index " + std::to_string(index) + ")"), index_(index) {}
  std::int64_t index() const noexcept { return index_; }

 private:
  std::int64_t index_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Token id out of vocabulary range; `position` is the offending index.
class InputError : public Error {
 public:
  InputError(const std::string& what, std::int64_t position)
      : Error(what), position_(position) {}
  std::int64_t position() const noexcept { return position_; }

 private:
  std::int64_t position_;
};

// Structure already removed, or otherwise in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

// Not enough MLP channels left to slice the requested group.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mshed
