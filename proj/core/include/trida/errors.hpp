#pragma once

#include <stdexcept>
#include <string>

namespace trida {

/// Bad arguments or inconsistent inputs detected before any compute.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Missing or unreadable files and directories.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input; carries the offending line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, int line = 0)
      : std::runtime_error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// An identifier that does not resolve (taxonomy node, class name).
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Failures during training (non-finite loss, missing checkpoint at startup).
class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace trida
