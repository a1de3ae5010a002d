#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qe {

/// Base class for all toolkit failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch, out-of-range argument, non-finite data.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Cholesky breakdown; carries the pivot that failed.
class SingularMatrix : public Error {
 public:
  SingularMatrix(const std::string& what, std::size_t pivot)
      : Error(what), pivot_(pivot) {}
  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

/// Configuration that makes an operation undefined (e.g. routing loss with one expert).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. `offset` is the byte position where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t offset, const std::string& msg)
      : Error(file + " @" + std::to_string(offset) + ": " + msg), file_(file), offset_(offset) {}
  const std::string& file() const noexcept { return file_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string file_;
  std::size_t offset_;
};

/// A package lacks a member the requested computation needs.
class MissingMember : public Error {
 public:
  using Error::Error;
};

}  // namespace qe
