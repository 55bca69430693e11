#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "afa/layers.hpp"
#include "afa/rng.hpp"
#include "afa/types.hpp"

namespace afa {

enum class LayerKind { conv, fc };

/// One entry of the backbone layer-spec list. Conv layers form the feature
/// extractor F; fc layers form the shared classifier C.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int width = 0;         // output channels (conv) or units (fc)
  int kernel = 3;        // conv only
  bool pool = false;     // conv only: 2x2 max pool after the activation
  double dropout = 0.0;  // fc only: dropout applied to the layer input while training
};

struct ArchConfig {
  ImageShape input;
  std::vector<LayerSpec> layers;
  int attention_capture = -1;  // index among conv layers, -1 = last
  int semantic_capture = -1;   // index among fc layers, -1 = last

  /// Desk-scale default: three conv layers (only the first pooled) and two shared
  /// fc layers with dropout on their inputs.
  static ArchConfig desk_default(ImageShape input, double dropout = 0.5);
  void validate() const;
  [[nodiscard]] int conv_count() const;
  [[nodiscard]] int fc_count() const;
};

enum class ParamGroup { feature_extractor, shared_classifier, task_head };

struct ParamInfo {
  std::string name;
  ParamGroup group = ParamGroup::feature_extractor;
  TaskId head = -1;
};

/// Gradient buffers aligned with ModelDecomposition::parameters().
struct Gradients {
  std::vector<Matrix> tensors;

  Gradients& operator+=(const Gradients& other);
  Gradients& operator*=(double s);
  [[nodiscard]] bool all_finite() const;
};

struct HeadInit {
  double gain = 0.25;  // Xavier-uniform gain
  std::uint64_t seed = 0;
};

struct ActivationBundle {
  Matrix conv_activation;  // batch x (C*H*W) at the attention capture point
  ImageShape conv_shape;
  Matrix attention_map;    // batch x (H*W); left empty by the model
  Matrix semantic_feature; // batch x d_fc
  std::map<TaskId, Matrix> logits;
};

struct ForwardOptions {
  bool dropout = false;     // training-mode stochastic layers
  Rng* rng = nullptr;       // required when dropout is on
  bool keep_tape = false;   // keep intermediates for backward()
};

/// Intermediate values of a forward pass needed by backward().
struct ForwardPass {
  ActivationBundle bundle;
  std::vector<TaskId> heads;
  std::vector<Conv2d::Cache> conv_caches;
  std::vector<MaxPool2x2::Cache> pool_caches;
  std::vector<Matrix> conv_activations;  // post-ReLU, pre-pool
  std::vector<Matrix> dense_inputs;      // after dropout
  std::vector<Matrix> dense_masks;
  std::vector<Matrix> dense_outputs;
};

/// Upstream gradients w.r.t. the captured activations. Empty matrices mean zero.
struct BundleGrad {
  Matrix conv_activation;
  Matrix semantic_feature;
  std::map<TaskId, Matrix> logits;
};

/// Backbone split into feature extractor F (conv stack), shared classifier C
/// (fc stack) and per-task linear heads C_t. Heads are indexed from 0.
class ModelDecomposition {
 public:
  struct ConvBlock {
    Conv2d conv;
    bool pool = false;
    ImageShape output;
  };
  struct DenseBlock {
    Linear linear;
    double dropout = 0.0;
  };

  ModelDecomposition() = default;

  [[nodiscard]] const ArchConfig& arch() const { return arch_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] int head_count() const { return static_cast<int>(heads_.size()); }
  [[nodiscard]] int head_classes(TaskId t) const;
  [[nodiscard]] ImageShape attention_shape() const;
  [[nodiscard]] int semantic_dim() const;
  [[nodiscard]] int attention_capture_index() const;
  [[nodiscard]] int semantic_capture_index() const;

  [[nodiscard]] const std::vector<ConvBlock>& feature_extractor() const { return features_; }
  [[nodiscard]] const std::vector<DenseBlock>& shared_classifier() const { return shared_; }
  [[nodiscard]] const std::vector<Linear>& task_heads() const { return heads_; }

  TaskId add_head(int class_count, const HeadInit& init);

  [[nodiscard]] std::vector<ParamInfo> parameter_info() const;
  std::vector<Matrix*> parameters();
  [[nodiscard]] std::vector<const Matrix*> parameters() const;
  [[nodiscard]] Gradients zero_gradients() const;
  [[nodiscard]] std::size_t parameter_count() const;

  /// FNV-1a digest over the raw bytes of every parameter in the given groups.
  [[nodiscard]] std::uint64_t parameter_hash(std::span<const ParamGroup> groups) const;
  [[nodiscard]] std::uint64_t head_hash(TaskId t) const;

  [[nodiscard]] ForwardPass forward(const Matrix& x, std::span<const TaskId> heads,
                                    const ForwardOptions& options = {}) const;
  /// Accumulates parameter gradients. When `trunk` is false only heads receive gradients.
  void backward(const ForwardPass& pass, const BundleGrad& grad, Gradients& out, bool trunk = true) const;

  // Used by the checkpoint reader.
  static ModelDecomposition assemble(ArchConfig arch, std::uint64_t seed, std::span<const int> head_classes);

 private:
  friend ModelDecomposition build_backbone(const ArchConfig&, std::span<const int>, std::uint64_t);

  ArchConfig arch_;
  std::uint64_t seed_ = 0;
  std::vector<ConvBlock> features_;
  std::vector<DenseBlock> shared_;
  std::vector<Linear> heads_;
};

/// Builds and initializes a backbone with one head per class count.
/// Trunk layers use Kaiming-uniform; heads use Xavier-uniform with gain 0.25.
ModelDecomposition build_backbone(const ArchConfig& arch, std::span<const int> task_class_counts,
                                  std::uint64_t seed);

/// Inference-mode forward (dropout off, no tape) for the requested heads.
ActivationBundle forward_capture(const ModelDecomposition& model, const Matrix& batch,
                                 std::span<const TaskId> heads);

/// Immutable deep copy of a model. All evaluations run in inference mode.
class FrozenSnapshot {
 public:
  explicit FrozenSnapshot(const ModelDecomposition& model)
      : model_(std::make_shared<const ModelDecomposition>(model)) {}

  [[nodiscard]] const ModelDecomposition& model() const { return *model_; }
  [[nodiscard]] static constexpr bool frozen() { return true; }
  [[nodiscard]] ActivationBundle forward(const Matrix& batch, std::span<const TaskId> heads) const {
    return forward_capture(*model_, batch, heads);
  }

 private:
  std::shared_ptr<const ModelDecomposition> model_;
};

inline FrozenSnapshot snapshot(const ModelDecomposition& model) { return FrozenSnapshot(model); }

/// Returns the ids 0..n-1.
std::vector<TaskId> head_range(int n);

}  // namespace afa
