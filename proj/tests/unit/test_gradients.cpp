#include <gtest/gtest.h>

#include "afa/attention.hpp"
#include "afa/engine.hpp"
#include "afa/semantic.hpp"
#include "test_util.hpp"

using namespace afa;
using afa::testing::central_difference;
using afa::testing::random_matrix;
using afa::testing::relative_error;

namespace {

constexpr int kProbes = 24;
constexpr double kTol = 1e-4;

void probe_matrix(Matrix& x, const Matrix& analytic, const std::function<double()>& f, Rng& rng) {
  ASSERT_EQ(x.rows(), analytic.rows());
  ASSERT_EQ(x.cols(), analytic.cols());
  for (int p = 0; p < kProbes; ++p) {
    const auto i = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(x.size())));
    const double numeric = central_difference(f, x.data()[i]);
    EXPECT_LT(relative_error(analytic.data()[i], numeric), kTol) << "entry " << i;
  }
}

ArchConfig tiny_arch() {
  ArchConfig a;
  a.input = {3, 8, 8};
  a.layers = {{LayerKind::conv, 4, 3, true, 0.0},
              {LayerKind::conv, 6, 3, false, 0.0},
              {LayerKind::fc, 10, 0, false, 0.5},
              {LayerKind::fc, 8, 0, false, 0.5}};
  return a;
}

}  // namespace

TEST(GradientCheck, MmdLossAgainstFiniteDifferences) {
  Rng rng(11);
  const KernelSpec spec{{0.5, 1.0, 2.0}};
  for (int trial = 0; trial < 4; ++trial) {
    Matrix h_new = random_matrix(5 + trial, 4, rng);
    const Matrix h_old = random_matrix(5 + trial, 4, rng);
    Matrix grad;
    mmd_loss(h_new, h_old, spec, &grad);
    probe_matrix(h_new, grad, [&] { return mmd_loss(h_new, h_old, spec).value; }, rng);
  }
}

TEST(GradientCheck, KdLossAgainstFiniteDifferences) {
  Rng rng(12);
  for (double t : {1.0, 2.0, 4.0}) {
    Matrix logits = random_matrix(6, 5, rng, -3, 3);
    const Matrix recorded = random_matrix(6, 5, rng, -3, 3);
    Matrix grad;
    kd_loss(logits, recorded, t, &grad);
    probe_matrix(logits, grad, [&] { return kd_loss(logits, recorded, t); }, rng);
  }
}

TEST(GradientCheck, L2LossesAgainstFiniteDifferences) {
  Rng rng(13);
  Matrix a = random_matrix(4, 6, rng);
  const Matrix b = random_matrix(4, 6, rng);
  Matrix grad;
  l2_logit_loss(a, b, &grad);
  probe_matrix(a, grad, [&] { return l2_logit_loss(a, b); }, rng);
  l2_feature_loss(a, b, &grad);
  probe_matrix(a, grad, [&] { return l2_feature_loss(a, b); }, rng);
}

TEST(GradientCheck, AdversarialFeatureLossThroughAttention) {
  Rng rng(14);
  const ImageShape shape{5, 3, 4};
  const Discriminator d(shape.pixels(), 20, 99);
  for (int trial = 0; trial < 3; ++trial) {
    Matrix act = random_matrix(4, shape.size(), rng, 0.0, 1.5);
    auto f = [&] { return feature_adv_loss(d, normalize_attention(attention_map(act, shape))); };
    const Matrix raw = attention_map(act, shape);
    Matrix dz;
    feature_adv_loss(d, normalize_attention(raw), &dz);
    const Matrix grad = attention_map_backward(act, shape, normalize_attention_backward(raw, dz));
    probe_matrix(act, grad, f, rng);
  }
}

TEST(GradientCheck, DiscriminatorObjectiveWrtParameters) {
  Rng rng(15);
  Discriminator d(6, 12, 5);
  const Matrix z_old = random_matrix(5, 6, rng, 0, 1);
  const Matrix z_new = random_matrix(7, 6, rng, 0, 1);
  Gradients g = d.zero_gradients();
  discriminator_loss(d, z_old, z_new, &g);
  auto params = d.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    probe_matrix(*params[k], g.tensors[k], [&] { return discriminator_loss(d, z_old, z_new); }, rng);
  }
}

TEST(GradientCheck, CombinedLossWrtEveryParameterGroup) {
  const ArchConfig arch = tiny_arch();
  const int counts[] = {3};
  ModelDecomposition old_model = build_backbone(arch, counts, 21);
  ModelDecomposition model = old_model;
  const TaskId head = model.add_head(4, HeadInit{0.25, 22});
  Rng rng(23);
  for (Matrix* p : model.parameters()) *p += 0.05 * random_matrix(p->rows(), p->cols(), rng);
  const FrozenSnapshot snap(old_model);
  const Discriminator d(model.attention_shape().pixels(), 16, 24);
  LabeledBatch batch{random_matrix(6, arch.input.size(), rng), {0, 1, 2, 3, 1, 0}};
  const KernelSpec kernel{{1.0, 2.0, 4.0}};
  CombinedLossOptions options;
  options.kernel = &kernel;

  std::vector<LossWeights> variants;
  variants.push_back(LossWeights{});
  LossWeights l2_all;
  l2_all.logit_variant = LogitVariant::l2;
  l2_all.conv_variant = ConvVariant::l2;
  l2_all.fc_variant = FcVariant::l2;
  l2_all.lambda1 = 0.7;
  l2_all.lambda2 = 0.3;
  l2_all.lambda3 = 1.5;
  variants.push_back(l2_all);

  for (const LossWeights& w : variants) {
    Gradients g = model.zero_gradients();
    combined_loss(model, &snap, &d, batch, w, head, &g, options);
    auto f = [&] { return combined_loss(model, &snap, &d, batch, w, head, nullptr, options).total; };
    auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) probe_matrix(*params[k], g.tensors[k], f, rng);
  }
}
