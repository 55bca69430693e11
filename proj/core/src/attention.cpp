#include "afa/attention.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace afa {

Matrix attention_map(const Matrix& activation, ImageShape shape) {
  if (shape.channels < 1 || shape.pixels() < 1 || activation.size() == 0)
    throw ValidationError("attention_map needs a non-empty activation with at least one channel");
  if (activation.cols() != shape.size()) throw ValidationError("activation width does not match its shape");
  const int hw = shape.pixels();
  Matrix maps(activation.rows(), hw);
  std::vector<double> squares(static_cast<std::size_t>(shape.channels));
  // Summing in ascending order makes the result independent of channel order.
  for (Eigen::Index n = 0; n < activation.rows(); ++n) {
    for (int p = 0; p < hw; ++p) {
      for (int c = 0; c < shape.channels; ++c) {
        const double a = activation(n, static_cast<Eigen::Index>(c) * hw + p);
        squares[static_cast<std::size_t>(c)] = a * a;
      }
      std::sort(squares.begin(), squares.end());
      double sum = 0.0;
      for (double v : squares) sum += v;
      maps(n, p) = sum;
    }
  }
  return maps;
}

Matrix attention_map_backward(const Matrix& activation, ImageShape shape, const Matrix& d_map) {
  const int hw = shape.pixels();
  Matrix d_act(activation.rows(), activation.cols());
  for (int c = 0; c < shape.channels; ++c) {
    const auto cols = static_cast<Eigen::Index>(c) * hw;
    d_act.middleCols(cols, hw) = 2.0 * activation.middleCols(cols, hw).cwiseProduct(d_map);
  }
  return d_act;
}

Matrix normalize_attention(const Matrix& maps) {
  Matrix out = maps;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double norm = out.row(i).norm();
    if (norm > 0.0) out.row(i) /= norm;
  }
  return out;
}

Matrix normalize_attention_backward(const Matrix& maps, const Matrix& d_normalized) {
  Matrix d = d_normalized;
  for (Eigen::Index i = 0; i < maps.rows(); ++i) {
    const double norm = maps.row(i).norm();
    if (norm == 0.0) continue;
    const RowVector u = maps.row(i) / norm;
    d.row(i) = (d_normalized.row(i) - d_normalized.row(i).dot(u) * u) / norm;
  }
  return d;
}

Discriminator::Discriminator(int input_dim, int hidden_units, std::uint64_t seed)
    : hidden_(input_dim, hidden_units), output_(hidden_units, 1) {
  if (input_dim < 1 || hidden_units < 1) throw ConfigError("discriminator dimensions must be positive");
  Rng rng(seed);
  kaiming_uniform(hidden_.weight, input_dim, rng);
  xavier_uniform(output_.weight, 1.0, rng);
}

Discriminator::Tape Discriminator::forward_tape(const Matrix& z) const {
  Tape tape;
  tape.input = z;
  tape.hidden = relu(hidden_.forward(z));
  const Matrix logit = output_.forward(tape.hidden);
  tape.prob = logit.unaryExpr([](double s) { return 1.0 / (1.0 + std::exp(-s)); });
  tape.clamped = tape.prob.cwiseMax(kDiscriminatorEps).cwiseMin(1.0 - kDiscriminatorEps);
  return tape;
}

Matrix Discriminator::forward(const Matrix& z) const { return forward_tape(z).clamped; }

Matrix Discriminator::backward(const Tape& tape, const Matrix& dlogit, Gradients* grads, bool need_input_grad) const {
  Matrix scratch_w = Matrix::Zero(output_.weight.rows(), output_.weight.cols());
  Matrix scratch_b = Matrix::Zero(1, 1);
  Matrix& dw2 = grads ? grads->tensors[2] : scratch_w;
  Matrix& db2 = grads ? grads->tensors[3] : scratch_b;
  const Matrix dh = output_.backward(tape.hidden, dlogit, dw2, db2, true);
  const Matrix dpre = relu_backward(tape.hidden, dh);
  if (grads) {
    return hidden_.backward(tape.input, dpre, grads->tensors[0], grads->tensors[1], need_input_grad);
  }
  if (!need_input_grad) return {};
  return dpre * hidden_.weight;
}

std::vector<Matrix*> Discriminator::parameters() {
  return {&hidden_.weight, &hidden_.bias, &output_.weight, &output_.bias};
}

std::vector<const Matrix*> Discriminator::parameters() const {
  return {&hidden_.weight, &hidden_.bias, &output_.weight, &output_.bias};
}

Gradients Discriminator::zero_gradients() const {
  Gradients g;
  for (const Matrix* p : parameters()) g.tensors.push_back(Matrix::Zero(p->rows(), p->cols()));
  return g;
}

namespace {

bool clamped_low(double p) { return p <= kDiscriminatorEps; }
bool clamped_high(double p) { return p >= 1.0 - kDiscriminatorEps; }

void check_batch(const Discriminator& d, const Matrix& z, const char* what) {
  if (z.rows() == 0) throw ValidationError(std::string(what) + " batch is empty");
  if (z.cols() != d.input_dim()) throw ValidationError(std::string(what) + " map dimension does not match discriminator");
}

}  // namespace

double discriminator_loss(const Discriminator& d, const Matrix& z_old, const Matrix& z_new, Gradients* grads) {
  check_batch(d, z_old, "old");
  check_batch(d, z_new, "new");
  const auto t_old = d.forward_tape(z_old);
  const auto t_new = d.forward_tape(z_new);
  const double n_old = static_cast<double>(z_old.rows());
  const double n_new = static_cast<double>(z_new.rows());
  const double value = t_old.clamped.array().log().sum() / n_old +
                       (1.0 - t_new.clamped.array()).log().sum() / n_new;
  if (grads) {
    // d log(sigmoid(s)) / ds = 1 - p ; d log(1 - sigmoid(s)) / ds = -p ; zero where clamped.
    Matrix g_old(t_old.prob.rows(), 1);
    for (Eigen::Index i = 0; i < g_old.rows(); ++i) {
      const double p = t_old.prob(i, 0);
      g_old(i, 0) = (clamped_low(p) || clamped_high(p)) ? 0.0 : (1.0 - p) / n_old;
    }
    Matrix g_new(t_new.prob.rows(), 1);
    for (Eigen::Index i = 0; i < g_new.rows(); ++i) {
      const double p = t_new.prob(i, 0);
      g_new(i, 0) = (clamped_low(p) || clamped_high(p)) ? 0.0 : -p / n_new;
    }
    d.backward(t_old, g_old, grads, false);
    d.backward(t_new, g_new, grads, false);
  }
  return value;
}

double feature_adv_loss(const Discriminator& d, const Matrix& z_new, Matrix* d_z_new) {
  check_batch(d, z_new, "new");
  const auto tape = d.forward_tape(z_new);
  const double n = static_cast<double>(z_new.rows());
  const double value = -tape.clamped.array().log().sum() / n;
  if (d_z_new) {
    Matrix g(tape.prob.rows(), 1);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double p = tape.prob(i, 0);
      g(i, 0) = (clamped_low(p) || clamped_high(p)) ? 0.0 : -(1.0 - p) / n;
    }
    *d_z_new = d.backward(tape, g, nullptr, true);
  }
  return value;
}

AdvLossPair adv_step(AdversarialAligner& aligner, const Matrix& z_old, const Matrix& z_new, Matrix* d_z_new) {
  AdvLossPair out;
  Gradients ascent = aligner.discriminator.zero_gradients();
  out.d_loss = discriminator_loss(aligner.discriminator, z_old, z_new, &ascent);
  ascent *= -1.0;  // descend on the negated objective
  auto params = aligner.discriminator.parameters();
  aligner.optimizer.step(params, ascent, aligner.learning_rate);
  out.f_loss = feature_adv_loss(aligner.discriminator, z_new, d_z_new);
  return out;
}

double discriminator_accuracy(const Discriminator& d, const Matrix& z_old, const Matrix& z_new) {
  const Matrix p_old = d.forward(z_old);
  const Matrix p_new = d.forward(z_new);
  const auto correct = (p_old.array() >= 0.5).count() + (p_new.array() < 0.5).count();
  return static_cast<double>(correct) / static_cast<double>(p_old.rows() + p_new.rows());
}

}  // namespace afa
