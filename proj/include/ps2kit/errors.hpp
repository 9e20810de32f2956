#pragma once

#include <stdexcept>
#include <string>

namespace ps2kit {

/// Malformed or inconsistent input files (dataset dirs, checkpoints).
struct format_error : std::runtime_error {
  explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Rank-deficient or otherwise unsolvable light configuration.
struct singular_error : std::runtime_error {
  explicit singular_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor shape disagreement.
struct shape_error : std::runtime_error {
  explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad command-line flags or flag combinations; maps to exit code 2.
struct usage_error : std::runtime_error {
  explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ps2kit
