#include "afa/layers.hpp"

#include <cmath>
#include <limits>

namespace afa {

Conv2d::Conv2d(ImageShape in, int out, int k)
    : input(in), out_channels(out), kernel(k),
      weight(Matrix::Zero(out, in.channels * k * k)), bias(Matrix::Zero(1, out)) {
  if (k % 2 == 0) throw ConfigError("conv kernel size must be odd");
}

namespace {

void im2col(const Matrix& x, ImageShape in, int k, Matrix& cols) {
  const int n = static_cast<int>(x.rows());
  const int hw = in.pixels();
  const int pad = k / 2;
  cols.resize(static_cast<Eigen::Index>(in.channels) * k * k, static_cast<Eigen::Index>(n) * hw);
  for (int s = 0; s < n; ++s) {
    const double* src = x.row(s).data();
    for (int c = 0; c < in.channels; ++c) {
      const double* plane = src + c * hw;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double* dst = cols.row((c * k + ky) * k + kx).data() + static_cast<Eigen::Index>(s) * hw;
          for (int y = 0; y < in.height; ++y) {
            const int iy = y + ky - pad;
            if (iy < 0 || iy >= in.height) {
              for (int xx = 0; xx < in.width; ++xx) dst[y * in.width + xx] = 0.0;
              continue;
            }
            for (int xx = 0; xx < in.width; ++xx) {
              const int ix = xx + kx - pad;
              dst[y * in.width + xx] = (ix < 0 || ix >= in.width) ? 0.0 : plane[iy * in.width + ix];
            }
          }
        }
      }
    }
  }
}

void col2im(const Matrix& cols, ImageShape in, int k, int n, Matrix& dx) {
  const int hw = in.pixels();
  const int pad = k / 2;
  dx.setZero(n, in.size());
  for (int s = 0; s < n; ++s) {
    double* dst = dx.row(s).data();
    for (int c = 0; c < in.channels; ++c) {
      double* plane = dst + c * hw;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double* src = cols.row((c * k + ky) * k + kx).data() + static_cast<Eigen::Index>(s) * hw;
          for (int y = 0; y < in.height; ++y) {
            const int iy = y + ky - pad;
            if (iy < 0 || iy >= in.height) continue;
            for (int xx = 0; xx < in.width; ++xx) {
              const int ix = xx + kx - pad;
              if (ix >= 0 && ix < in.width) plane[iy * in.width + ix] += src[y * in.width + xx];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Matrix Conv2d::forward(const Matrix& x, Cache* cache) const {
  if (x.cols() != input.size()) throw ValidationError("conv input has wrong sample size");
  const int n = static_cast<int>(x.rows());
  const int hw = input.pixels();
  Matrix local;
  Matrix& cols = cache ? cache->columns : local;
  im2col(x, input, kernel, cols);
  const Matrix out = weight * cols;  // out_channels x (n * hw)
  Matrix y(n, static_cast<Eigen::Index>(out_channels) * hw);
  for (int s = 0; s < n; ++s) {
    for (int c = 0; c < out_channels; ++c) {
      y.row(s).segment(static_cast<Eigen::Index>(c) * hw, hw) =
          out.row(c).segment(static_cast<Eigen::Index>(s) * hw, hw).array() + bias(0, c);
    }
  }
  return y;
}

Matrix Conv2d::backward(const Matrix& dy, const Cache& cache, Matrix& dweight, Matrix& dbias,
                        bool need_input_grad) const {
  const int n = static_cast<int>(dy.rows());
  const int hw = input.pixels();
  Matrix dout(out_channels, static_cast<Eigen::Index>(n) * hw);
  for (int s = 0; s < n; ++s) {
    for (int c = 0; c < out_channels; ++c) {
      dout.row(c).segment(static_cast<Eigen::Index>(s) * hw, hw) =
          dy.row(s).segment(static_cast<Eigen::Index>(c) * hw, hw);
    }
  }
  dweight.noalias() += dout * cache.columns.transpose();
  dbias += dout.rowwise().sum().transpose();
  Matrix dx;
  if (need_input_grad) {
    const Matrix dcols = weight.transpose() * dout;
    col2im(dcols, input, kernel, n, dx);
  }
  return dx;
}

Linear::Linear(int in, int out) : weight(Matrix::Zero(out, in)), bias(Matrix::Zero(1, out)) {}

Matrix Linear::forward(const Matrix& x) const {
  if (x.cols() != weight.cols()) throw ValidationError("linear input has wrong width");
  Matrix y = x * weight.transpose();
  y.rowwise() += bias.row(0);
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy, Matrix& dweight, Matrix& dbias,
                        bool need_input_grad) const {
  dweight.noalias() += dy.transpose() * x;
  dbias += dy.colwise().sum();
  if (!need_input_grad) return {};
  return dy * weight;
}

Matrix MaxPool2x2::forward(const Matrix& x, ImageShape in, Cache* cache) {
  const ImageShape out = output_shape(in);
  const int n = static_cast<int>(x.rows());
  Matrix y(n, out.size());
  if (cache) {
    cache->argmax.assign(static_cast<std::size_t>(n) * out.size(), 0);
    cache->input_cols = x.cols();
  }
  for (int s = 0; s < n; ++s) {
    for (int c = 0; c < in.channels; ++c) {
      for (int oy = 0; oy < out.height; ++oy) {
        for (int ox = 0; ox < out.width; ++ox) {
          int best = (c * in.height + 2 * oy) * in.width + 2 * ox;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = (c * in.height + 2 * oy + dy) * in.width + 2 * ox + dx;
              if (x(s, idx) > x(s, best)) best = idx;
            }
          }
          const int o = (c * out.height + oy) * out.width + ox;
          y(s, o) = x(s, best);
          if (cache) cache->argmax[static_cast<std::size_t>(s) * out.size() + o] = best;
        }
      }
    }
  }
  return y;
}

Matrix MaxPool2x2::backward(const Matrix& dy, const Cache& cache) {
  const Eigen::Index n = dy.rows();
  const Eigen::Index out_cols = dy.cols();
  Matrix dx = Matrix::Zero(n, cache.input_cols);
  for (Eigen::Index s = 0; s < n; ++s) {
    for (Eigen::Index o = 0; o < out_cols; ++o) {
      dx(s, cache.argmax[static_cast<std::size_t>(s * out_cols + o)]) += dy(s, o);
    }
  }
  return dx;
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_backward(const Matrix& y, const Matrix& dy) {
  return (y.array() > 0.0).select(dy, 0.0);
}

Matrix dropout(const Matrix& x, double p, Rng& rng, Matrix& mask) {
  mask.resize(x.rows(), x.cols());
  const double keep = 1.0 - p;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = uniform01(rng) < keep ? 1.0 / keep : 0.0;
  }
  return x.cwiseProduct(mask);
}

void xavier_uniform(Matrix& w, double gain, Rng& rng) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng, -bound, bound);
}

void kaiming_uniform(Matrix& w, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng, -bound, bound);
}

}  // namespace afa
