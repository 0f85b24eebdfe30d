#pragma once

#include <stdexcept>
#include <string>

namespace caetswin {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Operand shapes are incompatible with the requested operation.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// A value-level precondition was violated (bad axis, empty mask, ...).
struct ValueError : Error {
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

/// Filesystem-level failure (open/read/write).
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

/// A container file is malformed (bad magic, version, truncated payload).
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

}  // namespace caetswin
