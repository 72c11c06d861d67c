#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sslecho {

// Root of every error the library throws. The CLI maps subclasses of
// ConfigError to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A call that violates a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// An object used in a state that does not permit the call (e.g. a tape that
// has already been differentiated).
class StateError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf reached a training step boundary.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Checkpoint or CSV content that cannot be decoded. `offset` is the byte
// offset (checkpoints) or line number (CSV) where decoding stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

// Dataset files that disagree with each other (missing labels, unknown ids).
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class TransferError : public Error {
 public:
  using Error::Error;
};

class SplitError : public Error {
 public:
  using Error::Error;
};

class SamplerError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sslecho
