#pragma once

#include <stdexcept>
#include <string>

namespace customtext {

// Base of every error raised by the pipeline. `code` is a short machine
// readable tag (contract, format, coverage, domain, parse, layout_overflow,
// not_found, io); `stage` is filled in by the gateway when errors cross a
// pipeline boundary.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message, std::string stage = {})
      : std::runtime_error(message), code_(std::move(code)), stage_(std::move(stage)) {}

  const std::string& code() const noexcept { return code_; }
  const std::string& stage() const noexcept { return stage_; }
  void set_stage(std::string stage) { stage_ = std::move(stage); }

 private:
  std::string code_;
  std::string stage_;
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& message) : Error("contract", message) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& message) : Error("format", message) {}
};

class CoverageError : public Error {
 public:
  explicit CoverageError(const std::string& message) : Error("coverage", message) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& message) : Error("domain", message) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::size_t position)
      : Error("parse", message), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

// Text does not fit. `required` is the extent (pixels) the offending element
// needs along the overflowing axis, `available` what the canvas/box offers.
class LayoutError : public Error {
 public:
  LayoutError(const std::string& message, int required, int available, int span_index = -1)
      : Error("layout_overflow", message),
        required_(required),
        available_(available),
        span_index_(span_index) {}
  int required() const noexcept { return required_; }
  int available() const noexcept { return available_; }
  int span_index() const noexcept { return span_index_; }

 private:
  int required_;
  int available_;
  int span_index_;
};

class NotFoundError : public Error {
 public:
  explicit NotFoundError(const std::string& message) : Error("not_found", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace customtext
