#include "afa/optimizer.hpp"

namespace afa {

void SgdMomentum::step(std::span<Matrix* const> params, const Gradients& grads, double lr,
                       std::span<const bool> trainable) {
  if (grads.tensors.size() != params.size()) throw ValidationError("gradient count does not match parameters");
  if (!trainable.empty() && trainable.size() != params.size())
    throw ValidationError("trainable mask does not match parameters");
  for (std::size_t i = velocity_.size(); i < params.size(); ++i) {
    velocity_.push_back(Matrix::Zero(params[i]->rows(), params[i]->cols()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    velocity_[i] = momentum_ * velocity_[i] + grads.tensors[i];
    *params[i] -= lr * velocity_[i];
  }
}

}  // namespace afa
