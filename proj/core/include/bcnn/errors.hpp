#pragma once

#include <cstdarg>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace bcnn {

// Shape / dimension mismatches between tensors or layer specs.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Bad configuration files or mode-inconsistent experiment fields.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// File parsing / serialization failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: non-scalar backward, sampling a deterministic network, ...
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Degenerate numerics (e.g. batch-norm variance over a single element).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string strfmt(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  va_list copy;
  va_copy(copy, args);
  int n = std::vsnprintf(nullptr, 0, fmt, copy);
  va_end(copy);
  std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
  if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args);
  va_end(args);
  return out;
}

}  // namespace bcnn
