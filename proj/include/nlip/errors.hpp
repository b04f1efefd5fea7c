#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nlip {

/// Base of every error raised by the library. `kind()` is a stable tag used
/// by the CLI to choose an exit code.
class Error : public std::runtime_error {
 public:
  enum class Kind { range, shape, contract, parse, insufficient_data, config, numerical, io };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct RangeError : Error {
  explicit RangeError(const std::string& what) : Error(Kind::range, what) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(Kind::shape, what) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error(Kind::contract, what) {}
};

struct InsufficientDataError : Error {
  explicit InsufficientDataError(const std::string& what) : Error(Kind::insufficient_data, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(Kind::config, what) {}
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& what) : Error(Kind::numerical, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(Kind::io, what) {}
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(Kind::parse, "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace nlip
