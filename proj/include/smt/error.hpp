#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace smt {

enum class ErrorKind {
  config,
  input,
  usage,
  parse,
  dataset,
  corruption,
  unsupported_version,
  divergence,
  internal,
};

/// Base of every error raised by the library. `kind()` lets front ends map
/// failures to exit codes without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Invalid architecture or layer configuration (divisibility, shapes).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

/// Runtime input that does not fit the layer or model.
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorKind::input, what) {}
};

/// API misuse, e.g. backward on a non-scalar.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(ErrorKind::parse, what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class DatasetError : public Error {
 public:
  explicit DatasetError(const std::string& what) : Error(ErrorKind::dataset, what) {}
};

class CorruptionError : public Error {
 public:
  explicit CorruptionError(const std::string& what) : Error(ErrorKind::corruption, what) {}
};

class UnsupportedVersionError : public Error {
 public:
  explicit UnsupportedVersionError(const std::string& what)
      : Error(ErrorKind::unsupported_version, what) {}
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::int64_t step)
      : Error(ErrorKind::divergence, what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace smt
