#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gamreid {

/// Coarse failure categories. The CLI prints the category name as the first
/// token of its single-line error report.
enum class ErrorKind {
  config,     // invalid hyper-parameter or divisibility violation
  shape,      // tensor extents disagree
  usage,      // API called outside its contract
  format,     // malformed or truncated file
  integrity,  // well-formed data that contradicts the model/config
  parse,      // malformed text input (file names, config lines)
  io,         // filesystem failure
  numeric,    // NaN/Inf where finite values are required
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::shape: return "shape";
    case ErrorKind::usage: return "usage";
    case ErrorKind::format: return "format";
    case ErrorKind::integrity: return "integrity";
    case ErrorKind::parse: return "parse";
    case ErrorKind::io: return "io";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace gamreid
