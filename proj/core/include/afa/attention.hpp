#pragma once

#include <cstdint>
#include <vector>

#include "afa/layers.hpp"
#include "afa/model.hpp"
#include "afa/optimizer.hpp"
#include "afa/types.hpp"

namespace afa {

/// Lower/upper clamp applied to discriminator outputs so every log stays finite.
inline constexpr double kDiscriminatorEps = 1e-7;

/// Spatial attention of a conv activation: per-pixel sum over channels of the
/// squared activation. `activation` is batch x (C*H*W); result is batch x (H*W).
Matrix attention_map(const Matrix& activation, ImageShape shape);
/// Gradient of attention_map w.r.t. the activation: 2 * A_ch * dZ for every channel.
Matrix attention_map_backward(const Matrix& activation, ImageShape shape, const Matrix& d_map);

/// Row-wise L2 normalization; all-zero rows pass through unchanged.
Matrix normalize_attention(const Matrix& maps);
Matrix normalize_attention_backward(const Matrix& maps, const Matrix& d_normalized);

/// Three-layer perceptron: input H*W -> hidden (ReLU) -> logistic scalar.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(int input_dim, int hidden_units, std::uint64_t seed);

  [[nodiscard]] int input_dim() const { return hidden_.in_features(); }
  [[nodiscard]] int hidden_units() const { return hidden_.out_features(); }

  /// Clamped probabilities in [eps, 1 - eps], batch x 1.
  [[nodiscard]] Matrix forward(const Matrix& z) const;

  struct Tape {
    Matrix input;
    Matrix hidden;
    Matrix prob;     // unclamped sigmoid
    Matrix clamped;  // prob clamped to [eps, 1 - eps]
  };
  [[nodiscard]] Tape forward_tape(const Matrix& z) const;
  /// Backprop d(loss)/d(logit) through the network. Param grads go to `grads`
  /// when non-null; returns d(loss)/d(input) when `need_input_grad`.
  Matrix backward(const Tape& tape, const Matrix& dlogit, Gradients* grads, bool need_input_grad) const;

  std::vector<Matrix*> parameters();
  [[nodiscard]] std::vector<const Matrix*> parameters() const;
  [[nodiscard]] Gradients zero_gradients() const;

 private:
  Linear hidden_;
  Linear output_;
};

/// Value of max_D E[log D(z*)] + E[log(1 - D(z))] at the current D, with
/// old-model maps as "real" and new-model maps as "fake". Both batches are
/// constants; when `grads` is non-null it receives the gradient of the value
/// w.r.t. D's parameters (ascent direction).
double discriminator_loss(const Discriminator& d, const Matrix& z_old, const Matrix& z_new,
                          Gradients* grads = nullptr);

/// Inverted-label loss for the feature extractor, -E[log D(z)]. D is held
/// fixed; `d_z_new` receives the gradient w.r.t. the maps when non-null.
double feature_adv_loss(const Discriminator& d, const Matrix& z_new, Matrix* d_z_new = nullptr);

struct AdvLossPair {
  double d_loss = 0.0;
  double f_loss = 0.0;
};

/// Discriminator plus its private optimizer state.
struct AdversarialAligner {
  Discriminator discriminator;
  SgdMomentum optimizer{0.9};
  double learning_rate = 0.01;
};

/// One ascent step on the discriminator objective followed by the feature
/// loss at the updated D. Each returned value is measured before the update
/// it drives; `d_z_new` receives d(f_loss)/d(z_new) when non-null.
AdvLossPair adv_step(AdversarialAligner& aligner, const Matrix& z_old, const Matrix& z_new,
                     Matrix* d_z_new = nullptr);

/// Fraction of maps classified correctly (old -> D >= 0.5, new -> D < 0.5).
double discriminator_accuracy(const Discriminator& d, const Matrix& z_old, const Matrix& z_new);

}  // namespace afa
