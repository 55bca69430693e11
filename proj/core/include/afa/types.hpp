#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace afa {

/// Row-major dense matrix. Batches are stored one sample per row; image
/// samples are flattened in channel-major (C, H, W) order.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

struct ImageShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  [[nodiscard]] int pixels() const { return height * width; }
  [[nodiscard]] int size() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

using TaskId = int;

// Error taxonomy shared by every module.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptArchiveError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace afa
