#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sketchcl {

// Base of every error raised by the library. The CLI maps subclasses onto
// exit codes: usage/config/parse/validation -> 2, everything else -> 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  ValidationError(std::string rule, const std::string& what)
      : Error("validation failed [" + rule + "]: " + what), rule_(std::move(rule)) {}

  const std::string& rule() const noexcept { return rule_; }

 private:
  std::string rule_;
};

}  // namespace sketchcl
