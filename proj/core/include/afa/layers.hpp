#pragma once

#include <vector>

#include "afa/rng.hpp"
#include "afa/types.hpp"

namespace afa {

/// Stride-1 convolution with "same" zero padding. Weights are laid out as
/// (out_channels, in_channels * kernel * kernel) so that a forward pass is a
/// single GEMM against the im2col matrix of the whole batch.
struct Conv2d {
  ImageShape input;
  int out_channels = 0;
  int kernel = 3;
  Matrix weight;  // out x (in * k * k)
  Matrix bias;    // 1 x out

  struct Cache {
    Matrix columns;  // (in * k * k) x (batch * H * W)
  };

  Conv2d() = default;
  Conv2d(ImageShape input, int out_channels, int kernel);

  [[nodiscard]] ImageShape output_shape() const { return {out_channels, input.height, input.width}; }
  Matrix forward(const Matrix& x, Cache* cache) const;
  /// Accumulates into `dweight`/`dbias` and returns the gradient w.r.t. the input.
  Matrix backward(const Matrix& dy, const Cache& cache, Matrix& dweight, Matrix& dbias,
                  bool need_input_grad = true) const;
};

/// Fully connected layer, y = x W^T + b.
struct Linear {
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out

  Linear() = default;
  Linear(int in_features, int out_features);

  [[nodiscard]] int in_features() const { return static_cast<int>(weight.cols()); }
  [[nodiscard]] int out_features() const { return static_cast<int>(weight.rows()); }
  Matrix forward(const Matrix& x) const;
  Matrix backward(const Matrix& x, const Matrix& dy, Matrix& dweight, Matrix& dbias,
                  bool need_input_grad = true) const;
};

/// Non-overlapping 2x2 max pooling. Odd trailing rows/columns are dropped.
struct MaxPool2x2 {
  struct Cache {
    std::vector<int> argmax;  // flat input index per output element
    Eigen::Index input_cols = 0;
  };
  static ImageShape output_shape(ImageShape in) { return {in.channels, in.height / 2, in.width / 2}; }
  static Matrix forward(const Matrix& x, ImageShape in, Cache* cache);
  static Matrix backward(const Matrix& dy, const Cache& cache);
};

Matrix relu(const Matrix& x);
/// Gradient of ReLU given its *output*.
Matrix relu_backward(const Matrix& y, const Matrix& dy);

/// Inverted dropout. `mask` is filled with 0 or 1/(1-p).
Matrix dropout(const Matrix& x, double p, Rng& rng, Matrix& mask);

void xavier_uniform(Matrix& w, double gain, Rng& rng);
void kaiming_uniform(Matrix& w, int fan_in, Rng& rng);

}  // namespace afa
