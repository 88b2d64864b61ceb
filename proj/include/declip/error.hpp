#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace declip {

enum class ErrorKind {
  Dimension,     // operand extents do not line up
  Parameter,     // scalar argument out of its valid range
  Degenerate,    // zero-norm rows, empty masks, collapsed boxes
  Distribution,  // input expected to be row-stochastic is not
  Evaluation,    // non-finite value produced or consumed
  Mode,          // operation not allowed for this model role
  Range,         // index out of range
  Config,        // invalid configuration or manifest
  Io,            // filesystem failure
  BadMagic,
  BadVersion,
  OffsetOverflow,
  Truncated,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library. The kind drives CLI exit codes and
/// the message prefix, e.g. "dimension error: matmul 3x4 * 5x2".
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);

  ErrorKind kind() const noexcept { return kind_; }
  bool is_io() const noexcept;

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

}  // namespace declip
