#pragma once

#include <span>
#include <vector>

#include "afa/model.hpp"
#include "afa/types.hpp"

namespace afa {

/// SGD with classical momentum: v <- mu * v + g; p <- p - lr * v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

  /// Updates every parameter whose `trainable` flag is set (all when empty).
  void step(std::span<Matrix* const> params, const Gradients& grads, double lr,
            std::span<const bool> trainable = {});
  void reset() { velocity_.clear(); }
  [[nodiscard]] double momentum() const { return momentum_; }

 private:
  double momentum_;
  std::vector<Matrix> velocity_;
};

}  // namespace afa
