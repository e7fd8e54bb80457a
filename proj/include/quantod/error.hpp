#pragma once

#include <stdexcept>
#include <string>

namespace quantod {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kInput = 2,
  kShape = 3,
  kDivergence = 4,
};

/// Base class for every error raised by the library. Each error carries the
/// exit code the CLI reports for it.
class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ExitCode exit_code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Unreadable, missing or malformed input.
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ExitCode::kInput, what) {}
};

/// Dimension mismatch or an invalid configuration value.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ExitCode::kShape, what) {}
};

/// A non-finite value appeared in a computation.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ExitCode::kDivergence, what) {}
};

/// Distinct failure kinds reported by the binary readers.
enum class FormatErrc {
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kNonFinite,
  kOddDimension,
  kTrailingBytes,
};

inline const char* to_string(FormatErrc e) {
  switch (e) {
    case FormatErrc::kBadMagic: return "bad magic";
    case FormatErrc::kVersionMismatch: return "version mismatch";
    case FormatErrc::kTruncated: return "truncated payload";
    case FormatErrc::kNonFinite: return "non-finite value";
    case FormatErrc::kOddDimension: return "odd feature dimension";
    case FormatErrc::kTrailingBytes: return "trailing bytes after payload";
  }
  return "unknown format error";
}

class FormatError : public InputError {
 public:
  FormatError(FormatErrc errc, const std::string& detail)
      : InputError(std::string(to_string(errc)) + ": " + detail), errc_(errc) {}

  FormatErrc errc() const noexcept { return errc_; }

 private:
  FormatErrc errc_;
};

}  // namespace quantod
