#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gattn {

using Shape = std::vector<std::int64_t>;

/// Dimension/shape mismatches between tensors or against an op's contract.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numeric or contract violations (non-finite inputs, unnormalized rows, ...).
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed files (IDX, CIFAR batches, checkpoints, dataset caches).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad configuration (unknown keys, out-of-range values).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem-level failures (missing file, short read/write).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

}  // namespace gattn
