#include "afa/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace afa {

ArchConfig ArchConfig::desk_default(ImageShape input, double dropout) {
  ArchConfig arch;
  arch.input = input;
  arch.layers = {
      {LayerKind::conv, 8, 3, true, 0.0},
      {LayerKind::conv, 16, 3, false, 0.0},
      {LayerKind::conv, 32, 3, false, 0.0},
      {LayerKind::fc, 64, 0, false, dropout},
      {LayerKind::fc, 32, 0, false, dropout},
  };
  return arch;
}

int ArchConfig::conv_count() const {
  return static_cast<int>(std::count_if(layers.begin(), layers.end(),
                                        [](const LayerSpec& l) { return l.kind == LayerKind::conv; }));
}

int ArchConfig::fc_count() const { return static_cast<int>(layers.size()) - conv_count(); }

void ArchConfig::validate() const {
  if (layers.empty()) throw ConfigError("arch_config is empty");
  if (input.channels <= 0 || input.height <= 0 || input.width <= 0)
    throw ConfigError("arch_config input shape must be positive");
  bool seen_fc = false;
  ImageShape shape = input;
  for (const auto& l : layers) {
    if (l.width <= 0) throw ConfigError("layer width must be positive");
    if (l.kind == LayerKind::fc) {
      seen_fc = true;
      if (l.dropout < 0.0 || l.dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    } else {
      if (seen_fc) throw ConfigError("conv layers must precede fc layers");
      if (l.kernel <= 0 || l.kernel % 2 == 0) throw ConfigError("conv kernel must be odd and positive");
      shape = {l.width, shape.height, shape.width};
      if (l.pool) shape = MaxPool2x2::output_shape(shape);
      if (shape.height <= 0 || shape.width <= 0) throw ConfigError("pooling reduces spatial size to zero");
    }
  }
  const int nconv = conv_count();
  const int nfc = fc_count();
  if (nconv == 0) throw ConfigError("arch_config needs at least one conv layer");
  if (nfc == 0) throw ConfigError("arch_config needs at least one shared fc layer");
  if (attention_capture < -1 || attention_capture >= nconv) throw ConfigError("attention capture index out of range");
  if (semantic_capture < -1 || semantic_capture >= nfc) throw ConfigError("semantic capture index out of range");
}

Gradients& Gradients::operator+=(const Gradients& other) {
  for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i] += other.tensors[i];
  return *this;
}

Gradients& Gradients::operator*=(double s) {
  for (auto& t : tensors) t *= s;
  return *this;
}

bool Gradients::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const Matrix& m) { return m.allFinite(); });
}

int ModelDecomposition::head_classes(TaskId t) const {
  if (t < 0 || t >= head_count()) throw LookupError("unknown head id " + std::to_string(t));
  return heads_[static_cast<std::size_t>(t)].out_features();
}

int ModelDecomposition::attention_capture_index() const {
  return arch_.attention_capture < 0 ? static_cast<int>(features_.size()) - 1 : arch_.attention_capture;
}

int ModelDecomposition::semantic_capture_index() const {
  return arch_.semantic_capture < 0 ? static_cast<int>(shared_.size()) - 1 : arch_.semantic_capture;
}

ImageShape ModelDecomposition::attention_shape() const {
  return features_[static_cast<std::size_t>(attention_capture_index())].output;
}

int ModelDecomposition::semantic_dim() const {
  return shared_[static_cast<std::size_t>(semantic_capture_index())].linear.out_features();
}

ModelDecomposition ModelDecomposition::assemble(ArchConfig arch, std::uint64_t seed,
                                                std::span<const int> head_classes) {
  arch.validate();
  ModelDecomposition m;
  m.arch_ = std::move(arch);
  m.seed_ = seed;
  ImageShape shape = m.arch_.input;
  int flat = 0;
  for (const auto& l : m.arch_.layers) {
    if (l.kind == LayerKind::conv) {
      ConvBlock block{Conv2d(shape, l.width, l.kernel), l.pool, {}};
      shape = block.conv.output_shape();
      if (l.pool) shape = MaxPool2x2::output_shape(shape);
      block.output = shape;
      m.features_.push_back(std::move(block));
      flat = shape.size();
    } else {
      m.shared_.push_back(DenseBlock{Linear(flat, l.width), l.dropout});
      flat = l.width;
    }
  }
  for (int c : head_classes) {
    if (c < 1) throw ValidationError("class count must be positive");
    m.heads_.emplace_back(flat, c);
  }
  return m;
}

ModelDecomposition build_backbone(const ArchConfig& arch, std::span<const int> task_class_counts,
                                  std::uint64_t seed) {
  if (arch.layers.empty()) throw ConfigError("arch_config is empty");
  if (task_class_counts.empty()) throw ValidationError("at least one task class count is required");
  for (int c : task_class_counts) {
    if (c < 1) throw ValidationError("class count must be positive, got " + std::to_string(c));
  }
  ModelDecomposition m = ModelDecomposition::assemble(arch, seed, {});
  Rng rng = make_rng(seed, "backbone-init");
  for (auto& block : m.features_) {
    kaiming_uniform(block.conv.weight, static_cast<int>(block.conv.weight.cols()), rng);
  }
  for (auto& block : m.shared_) {
    kaiming_uniform(block.linear.weight, block.linear.in_features(), rng);
  }
  for (int c : task_class_counts) {
    m.add_head(c, HeadInit{0.25, derive_seed(seed, "head-init", static_cast<std::uint64_t>(m.head_count()))});
  }
  return m;
}

TaskId ModelDecomposition::add_head(int class_count, const HeadInit& init) {
  if (class_count < 1) throw ValidationError("class count must be >= 1");
  Linear head(shared_.back().linear.out_features(), class_count);
  Rng rng(init.seed);
  xavier_uniform(head.weight, init.gain, rng);
  heads_.push_back(std::move(head));
  return head_count() - 1;
}

std::vector<ParamInfo> ModelDecomposition::parameter_info() const {
  std::vector<ParamInfo> info;
  for (std::size_t i = 0; i < features_.size(); ++i) {
    info.push_back({"features." + std::to_string(i) + ".weight", ParamGroup::feature_extractor, -1});
    info.push_back({"features." + std::to_string(i) + ".bias", ParamGroup::feature_extractor, -1});
  }
  for (std::size_t i = 0; i < shared_.size(); ++i) {
    info.push_back({"shared." + std::to_string(i) + ".weight", ParamGroup::shared_classifier, -1});
    info.push_back({"shared." + std::to_string(i) + ".bias", ParamGroup::shared_classifier, -1});
  }
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    const auto t = static_cast<TaskId>(i);
    info.push_back({"heads." + std::to_string(i) + ".weight", ParamGroup::task_head, t});
    info.push_back({"heads." + std::to_string(i) + ".bias", ParamGroup::task_head, t});
  }
  return info;
}

std::vector<Matrix*> ModelDecomposition::parameters() {
  std::vector<Matrix*> out;
  for (auto& b : features_) { out.push_back(&b.conv.weight); out.push_back(&b.conv.bias); }
  for (auto& b : shared_) { out.push_back(&b.linear.weight); out.push_back(&b.linear.bias); }
  for (auto& h : heads_) { out.push_back(&h.weight); out.push_back(&h.bias); }
  return out;
}

std::vector<const Matrix*> ModelDecomposition::parameters() const {
  std::vector<const Matrix*> out;
  for (const auto& b : features_) { out.push_back(&b.conv.weight); out.push_back(&b.conv.bias); }
  for (const auto& b : shared_) { out.push_back(&b.linear.weight); out.push_back(&b.linear.bias); }
  for (const auto& h : heads_) { out.push_back(&h.weight); out.push_back(&h.bias); }
  return out;
}

Gradients ModelDecomposition::zero_gradients() const {
  Gradients g;
  for (const Matrix* p : parameters()) g.tensors.push_back(Matrix::Zero(p->rows(), p->cols()));
  return g;
}

std::size_t ModelDecomposition::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix* p : parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

namespace {

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

}  // namespace

std::uint64_t ModelDecomposition::parameter_hash(std::span<const ParamGroup> groups) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto info = parameter_info();
  const auto params = parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (std::find(groups.begin(), groups.end(), info[i].group) == groups.end()) continue;
    fnv_bytes(h, params[i]->data(), static_cast<std::size_t>(params[i]->size()) * sizeof(double));
  }
  return h;
}

std::uint64_t ModelDecomposition::head_hash(TaskId t) const {
  if (t < 0 || t >= head_count()) throw LookupError("unknown head id " + std::to_string(t));
  const Linear& head = heads_[static_cast<std::size_t>(t)];
  std::uint64_t h = 0xcbf29ce484222325ULL;
  fnv_bytes(h, head.weight.data(), static_cast<std::size_t>(head.weight.size()) * sizeof(double));
  fnv_bytes(h, head.bias.data(), static_cast<std::size_t>(head.bias.size()) * sizeof(double));
  return h;
}

ForwardPass ModelDecomposition::forward(const Matrix& x, std::span<const TaskId> heads,
                                        const ForwardOptions& options) const {
  if (x.cols() != arch_.input.size()) {
    throw ValidationError("batch sample size " + std::to_string(x.cols()) + " does not match input shape " +
                          std::to_string(arch_.input.size()));
  }
  for (TaskId t : heads) {
    if (t < 0 || t >= head_count()) throw LookupError("unknown head id " + std::to_string(t));
  }
  if (options.dropout && options.rng == nullptr) throw ValidationError("dropout requires an rng");

  ForwardPass pass;
  pass.heads.assign(heads.begin(), heads.end());
  const bool tape = options.keep_tape;
  const int attn_idx = attention_capture_index();
  const int sem_idx = semantic_capture_index();
  if (tape) {
    pass.conv_caches.resize(features_.size());
    pass.pool_caches.resize(features_.size());
  }

  Matrix act = x;
  for (std::size_t i = 0; i < features_.size(); ++i) {
    const auto& block = features_[i];
    Matrix pre = block.conv.forward(act, tape ? &pass.conv_caches[i] : nullptr);
    Matrix post = relu(pre);
    if (block.pool) {
      act = MaxPool2x2::forward(post, block.conv.output_shape(), tape ? &pass.pool_caches[i] : nullptr);
    } else {
      act = post;
    }
    if (tape) pass.conv_activations.push_back(std::move(post));
    if (static_cast<int>(i) == attn_idx) {
      pass.bundle.conv_activation = act;
      pass.bundle.conv_shape = block.output;
    }
  }

  for (std::size_t j = 0; j < shared_.size(); ++j) {
    const auto& block = shared_[j];
    Matrix in;
    Matrix mask;
    if (options.dropout && block.dropout > 0.0) {
      in = dropout(act, block.dropout, *options.rng, mask);
    } else {
      in = std::move(act);
    }
    act = relu(block.linear.forward(in));
    if (tape) {
      pass.dense_inputs.push_back(std::move(in));
      pass.dense_masks.push_back(std::move(mask));
      pass.dense_outputs.push_back(act);
    }
    if (static_cast<int>(j) == sem_idx) pass.bundle.semantic_feature = act;
  }

  for (TaskId t : heads) {
    pass.bundle.logits[t] = heads_[static_cast<std::size_t>(t)].forward(act);
  }
  if (tape && pass.dense_outputs.empty()) throw ConfigError("model has no shared layers");
  return pass;
}

void ModelDecomposition::backward(const ForwardPass& pass, const BundleGrad& grad, Gradients& out,
                                  bool trunk) const {
  if (pass.dense_outputs.size() != shared_.size()) throw ValidationError("backward requires a taped forward pass");
  if (out.tensors.size() != parameters().size()) throw ValidationError("gradient buffer does not match model");

  const std::size_t head_base = 2 * (features_.size() + shared_.size());
  const Matrix& h = pass.dense_outputs.back();
  Matrix dh = Matrix::Zero(h.rows(), h.cols());
  bool any = false;
  for (const auto& [t, dlogits] : grad.logits) {
    if (dlogits.size() == 0) continue;
    if (std::find(pass.heads.begin(), pass.heads.end(), t) == pass.heads.end())
      throw LookupError("gradient supplied for head absent from the forward pass");
    const std::size_t slot = head_base + 2 * static_cast<std::size_t>(t);
    Matrix dx = heads_[static_cast<std::size_t>(t)].backward(h, dlogits, out.tensors[slot], out.tensors[slot + 1], trunk);
    if (trunk) {
      dh += dx;
      any = true;
    }
  }
  if (!trunk) return;

  const int sem_idx = semantic_capture_index();
  const int attn_idx = attention_capture_index();
  Matrix dy = std::move(dh);
  for (int j = static_cast<int>(shared_.size()) - 1; j >= 0; --j) {
    const auto ju = static_cast<std::size_t>(j);
    if (j == sem_idx && grad.semantic_feature.size() != 0) {
      dy += grad.semantic_feature;
      any = true;
    }
    const Matrix dpre = relu_backward(pass.dense_outputs[ju], dy);
    const std::size_t slot = 2 * (features_.size() + ju);
    Matrix din = shared_[ju].linear.backward(pass.dense_inputs[ju], dpre, out.tensors[slot], out.tensors[slot + 1]);
    if (pass.dense_masks[ju].size() != 0) din = din.cwiseProduct(pass.dense_masks[ju]);
    dy = std::move(din);
  }
  for (int i = static_cast<int>(features_.size()) - 1; i >= 0; --i) {
    const auto iu = static_cast<std::size_t>(i);
    if (i == attn_idx && grad.conv_activation.size() != 0) {
      dy += grad.conv_activation;
      any = true;
    }
    if (!any) return;
    const auto& block = features_[iu];
    Matrix dact = block.pool ? MaxPool2x2::backward(dy, pass.pool_caches[iu]) : dy;
    const Matrix dpre = relu_backward(pass.conv_activations[iu], dact);
    dy = block.conv.backward(dpre, pass.conv_caches[iu], out.tensors[2 * iu], out.tensors[2 * iu + 1], i > 0);
  }
}

ActivationBundle forward_capture(const ModelDecomposition& model, const Matrix& batch,
                                 std::span<const TaskId> heads) {
  return model.forward(batch, heads, ForwardOptions{}).bundle;
}

std::vector<TaskId> head_range(int n) {
  std::vector<TaskId> ids(static_cast<std::size_t>(std::max(n, 0)));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

}  // namespace afa
