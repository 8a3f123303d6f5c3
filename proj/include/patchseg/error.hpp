#pragma once

#include <stdexcept>
#include <string>

namespace patchseg {

/// Failure categories surfaced by the command line as exit codes.
enum class ErrorCategory {
  invalid_argument,
  io,
  format,
  dims_mismatch,
  divergence,
};

const char* to_string(ErrorCategory category);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorCategory::invalid_argument, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::io, what) {}
};

/// Malformed or unsupported file contents.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what)
      : Error(ErrorCategory::format, what) {}
};

class DimsMismatch : public Error {
 public:
  explicit DimsMismatch(const std::string& what)
      : Error(ErrorCategory::dims_mismatch, what) {}
};

/// Non-finite loss, gradient or parameter during training.
class Divergence : public Error {
 public:
  explicit Divergence(const std::string& what)
      : Error(ErrorCategory::divergence, what) {}
};

}  // namespace patchseg
