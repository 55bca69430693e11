#include "afa/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <tuple>

namespace afa {

void LossWeights::validate() const {
  for (double l : {lambda1, lambda2, lambda3}) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("loss weights must be finite and non-negative");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be positive");
}

bool LossWeights::uses_snapshot() const {
  return lambda1 > 0.0 || (lambda2 > 0.0 && conv_variant != ConvVariant::off) ||
         (lambda3 > 0.0 && fc_variant != FcVariant::off);
}

std::string to_string(MethodName m) {
  switch (m) {
    case MethodName::finetune: return "finetune";
    case MethodName::joint: return "joint";
    case MethodName::lwf: return "lwf";
    case MethodName::afa: return "afa";
    case MethodName::afa_adv: return "afa_adv";
    case MethodName::afa_mmd: return "afa_mmd";
  }
  return "unknown";
}

MethodName parse_method(const std::string& name) {
  for (MethodName m : {MethodName::finetune, MethodName::joint, MethodName::lwf, MethodName::afa,
                       MethodName::afa_adv, MethodName::afa_mmd}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "'");
}

MethodSpec MethodSpec::make(MethodName name, int n_tasks, const LossWeights& base,
                            std::optional<double> lambda2_override) {
  MethodSpec m{name, base};
  LossWeights& w = m.weights;
  const double lambda2 = lambda2_override.value_or(n_tasks <= 2 ? 1.0 : 0.1);
  switch (name) {
    case MethodName::finetune:
    case MethodName::joint:
      w.lambda1 = w.lambda2 = w.lambda3 = 0.0;
      w.conv_variant = ConvVariant::off;
      w.fc_variant = FcVariant::off;
      break;
    case MethodName::lwf:
      w.lambda2 = w.lambda3 = 0.0;
      w.conv_variant = ConvVariant::off;
      w.fc_variant = FcVariant::off;
      break;
    case MethodName::afa:
      w.lambda2 = lambda2;
      break;
    case MethodName::afa_adv:
      w.lambda2 = lambda2;
      w.lambda3 = 0.0;
      w.fc_variant = FcVariant::off;
      break;
    case MethodName::afa_mmd:
      w.lambda2 = 0.0;
      w.conv_variant = ConvVariant::off;
      break;
  }
  return m;
}

void MethodSpec::validate() const {
  weights.validate();
  const auto& w = weights;
  switch (name) {
    case MethodName::finetune:
    case MethodName::joint:
      if (w.lambda1 != 0.0 || w.lambda2 != 0.0 || w.lambda3 != 0.0)
        throw ConfigError(to_string(name) + " must not carry auxiliary weights");
      break;
    case MethodName::lwf:
      if (w.lambda2 != 0.0 || w.lambda3 != 0.0) throw ConfigError("lwf uses only the distillation weight");
      break;
    case MethodName::afa_adv:
      if (w.lambda3 != 0.0) throw ConfigError("afa_adv must have lambda3 = 0");
      break;
    case MethodName::afa_mmd:
      if (w.lambda2 != 0.0) throw ConfigError("afa_mmd must have lambda2 = 0");
      break;
    case MethodName::afa:
      break;
  }
}

TrainSchedule TrainSchedule::full_scale() {
  TrainSchedule s;
  s.warmup_epochs = 70;
  return s;
}

void TrainSchedule::validate() const {
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be non-negative");
  if (!(base_lr > 0.0) || !(warmup_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (plateau_patience < 1) throw ConfigError("plateau_patience must be positive");
  if (post_plateau_epochs < 0) throw ConfigError("post_plateau_epochs must be non-negative");
  if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
  if (!(lr_decay > 0.0) || lr_decay > 1.0) throw ConfigError("lr_decay must lie in (0, 1]");
  if (discriminator_hidden < 1 || !(discriminator_lr > 0.0)) throw ConfigError("invalid discriminator settings");
}

double softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* grad) {
  if (logits.rows() != static_cast<Eigen::Index>(labels.size()) || labels.empty())
    throw ValidationError("logits and labels disagree in batch size");
  const double n = static_cast<double>(labels.size());
  double loss = 0.0;
  if (grad) grad->resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw ValidationError("label " + std::to_string(y) + " out of range");
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    loss += lse - logits(i, y);
    if (grad) {
      grad->row(i) = (logits.row(i).array() - lse).exp() / n;
      (*grad)(i, y) -= 1.0 / n;
    }
  }
  return loss / n;
}

double classification_loss(const ModelDecomposition& model, const LabeledBatch& batch, TaskId head) {
  const TaskId heads[] = {head};
  const ActivationBundle b = forward_capture(model, batch.inputs, heads);
  return softmax_cross_entropy(b.logits.at(head), batch.labels);
}

AlignmentTargets snapshot_targets(const FrozenSnapshot& snapshot, const Matrix& inputs) {
  const auto heads = head_range(snapshot.model().head_count());
  ActivationBundle b = snapshot.forward(inputs, heads);
  AlignmentTargets t;
  t.logits = std::move(b.logits);
  t.attention = normalize_attention(attention_map(b.conv_activation, b.conv_shape));
  t.conv_activation = std::move(b.conv_activation);
  t.semantic = std::move(b.semantic_feature);
  return t;
}

namespace {

std::vector<TaskId> old_heads_of(const AlignmentTargets* targets, TaskId new_head) {
  std::vector<TaskId> out;
  if (!targets) return out;
  for (const auto& [t, _] : targets->logits)
    if (t != new_head) out.push_back(t);
  return out;
}

// Evaluates the objective on an existing live forward pass.
LossBreakdown evaluate_combined(const ModelDecomposition& model, const ForwardPass& pass,
                                const AlignmentTargets* targets, const Discriminator* discriminator,
                                std::span<const int> labels, const LossWeights& w, TaskId new_head,
                                Gradients* grads, const KernelSpec* kernel) {
  LossBreakdown out;
  BundleGrad bg;
  const ActivationBundle& live = pass.bundle;
  Matrix g;
  out.cls = softmax_cross_entropy(live.logits.at(new_head), labels, grads ? &g : nullptr);
  if (grads) bg.logits[new_head] = std::move(g);

  if (w.uses_snapshot() && targets == nullptr) {
    throw ConfigError("a snapshot is required when auxiliary loss weights are non-zero");
  }

  if (w.lambda1 > 0.0) {
    for (TaskId t : old_heads_of(targets, new_head)) {
      const Matrix& mine = live.logits.at(t);
      const Matrix& theirs = targets->logits.at(t);
      Matrix gt;
      out.dist += w.logit_variant == LogitVariant::kd ? kd_loss(mine, theirs, w.temperature, grads ? &gt : nullptr)
                                                      : l2_logit_loss(mine, theirs, grads ? &gt : nullptr);
      if (grads) bg.logits[t] = w.lambda1 * gt;
    }
  }

  if (w.lambda2 > 0.0 && w.conv_variant != ConvVariant::off) {
    Matrix d_act;
    if (w.conv_variant == ConvVariant::adversarial) {
      if (discriminator == nullptr) throw ConfigError("adversarial alignment requires a discriminator");
      const Matrix raw = attention_map(live.conv_activation, live.conv_shape);
      const Matrix z = normalize_attention(raw);
      Matrix dz;
      out.adv_f = feature_adv_loss(*discriminator, z, grads ? &dz : nullptr);
      if (grads) d_act = attention_map_backward(live.conv_activation, live.conv_shape, normalize_attention_backward(raw, dz));
    } else {
      out.adv_f = l2_feature_loss(live.conv_activation, targets->conv_activation, grads ? &d_act : nullptr);
    }
    if (grads) bg.conv_activation = w.lambda2 * d_act;
  }

  if (w.lambda3 > 0.0 && w.fc_variant != FcVariant::off) {
    Matrix d_h;
    if (w.fc_variant == FcVariant::mmd) {
      const KernelSpec spec = kernel ? *kernel : KernelSpec::median_heuristic(live.semantic_feature, targets->semantic);
      out.fc = mmd_loss(live.semantic_feature, targets->semantic, spec, grads ? &d_h : nullptr).value;
    } else {
      out.fc = l2_feature_loss(live.semantic_feature, targets->semantic, grads ? &d_h : nullptr);
    }
    if (grads) bg.semantic_feature = w.lambda3 * d_h;
  }

  out.total = out.cls + w.lambda1 * out.dist + w.lambda2 * out.adv_f + w.lambda3 * out.fc;
  if (grads) model.backward(pass, bg, *grads);
  return out;
}

std::vector<TaskId> live_heads(const ModelDecomposition& model, const AlignmentTargets* targets, TaskId new_head) {
  std::vector<TaskId> heads{new_head};
  for (TaskId t : old_heads_of(targets, new_head)) {
    if (t >= model.head_count()) throw LookupError("snapshot head missing from live model");
    heads.push_back(t);
  }
  return heads;
}

}  // namespace

LossBreakdown combined_loss(const ModelDecomposition& model, const FrozenSnapshot* snapshot,
                            const Discriminator* discriminator, const LabeledBatch& batch, const LossWeights& weights,
                            TaskId new_head, Gradients* grads, const CombinedLossOptions& options) {
  weights.validate();
  AlignmentTargets computed;
  const AlignmentTargets* targets = options.targets;
  if (weights.uses_snapshot() && targets == nullptr) {
    if (snapshot == nullptr) throw ConfigError("a snapshot is required when auxiliary loss weights are non-zero");
    computed = snapshot_targets(*snapshot, batch.inputs);
    targets = &computed;
  }
  if (!weights.uses_snapshot()) targets = nullptr;
  const auto heads = live_heads(model, targets, new_head);
  ForwardOptions fo = options.forward;
  fo.keep_tape = grads != nullptr;
  const ForwardPass pass = model.forward(batch.inputs, heads, fo);
  return evaluate_combined(model, pass, targets, discriminator, batch.labels, weights, new_head, grads, options.kernel);
}

namespace {

template <typename T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

// Endless shuffled stream of row indices over one task's training split.
class Loader {
 public:
  Loader(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }
  std::vector<std::size_t> next(std::size_t batch) {
    if (cursor_ >= order_.size()) reshuffle();
    const std::size_t end = std::min(order_.size(), cursor_ + batch);
    std::vector<std::size_t> rows(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                  order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return rows;
  }
  [[nodiscard]] std::size_t batches_per_pass(std::size_t batch) const { return (order_.size() + batch - 1) / batch; }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), 0);
    seeded_shuffle(order_, rng_);
    cursor_ = 0;
  }
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

std::vector<int> labels_of(const Split& s, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(s.labels[r]);
  return out;
}

double split_accuracy(const ModelDecomposition& model, const TaskDataset& task, const Split& split, TaskId head) {
  const TaskId heads[] = {head};
  std::size_t correct = 0;
  const std::size_t n = split.size();
  for (std::size_t start = 0; start < n; start += 256) {
    const std::size_t len = std::min<std::size_t>(256, n - start);
    std::vector<std::size_t> rows(len);
    std::iota(rows.begin(), rows.end(), start);
    const Matrix x = eval_batch(task, split, rows, model.arch().input);
    const ActivationBundle b = forward_capture(model, x, heads);
    correct += static_cast<std::size_t>(
        std::lround(accuracy_from_logits(b.logits.at(head), labels_of(split, rows)) * static_cast<double>(len)));
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double validation_accuracy(const ModelDecomposition& model, const TaskDataset& task, TaskId head) {
  return split_accuracy(model, task, task.val.size() > 0 ? task.val : task.train, head);
}

struct Slot {
  const TaskDataset* task;
  TaskId head;
};

void accumulate(LossBreakdown& sum, const LossBreakdown& x) {
  sum.cls += x.cls;
  sum.dist += x.dist;
  sum.adv_f += x.adv_f;
  sum.fc += x.fc;
  sum.adv_d += x.adv_d;
  sum.total += x.total;
}

LossBreakdown scaled(LossBreakdown x, double s) {
  x.cls *= s;
  x.dist *= s;
  x.adv_f *= s;
  x.fc *= s;
  x.adv_d *= s;
  x.total *= s;
  return x;
}

// Shared training loop: one slot trains the new task with the method's
// objective; several slots train jointly with summed cross-entropies.
TrainLog run_training(ModelDecomposition& model, const FrozenSnapshot* snapshot, const MethodSpec& method,
                      std::span<const Slot> slots, const TrainSchedule& schedule, const SoftTargets* cached,
                      const std::string& phase, int task_number, const EpochCallback& on_epoch) {
  schedule.validate();
  method.validate();
  const LossWeights& w = method.weights;
  if (slots.empty()) throw ConfigError("no task data to train on");
  if (w.uses_snapshot() && snapshot == nullptr) throw ConfigError("a snapshot is required for " + to_string(method.name));
  const bool single = slots.size() == 1;
  if (!single && w.uses_snapshot()) throw ConfigError("joint training does not use alignment terms");

  std::vector<Loader> loaders;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    loaders.emplace_back(slots[k].task->train.size(), derive_seed(schedule.seed, "shuffle", k));
  }
  Rng augment_rng = make_rng(schedule.seed, "augment");
  Rng dropout_rng = make_rng(schedule.seed, "dropout");
  const bool use_cache = cached != nullptr && !schedule.augment && w.conv_variant != ConvVariant::l2;

  std::optional<AdversarialAligner> aligner;
  if (single && w.adversarial_active()) {
    aligner.emplace();
    aligner->discriminator = Discriminator(model.attention_shape().pixels(), schedule.discriminator_hidden,
                                           derive_seed(schedule.seed, "discriminator"));
    aligner->optimizer = SgdMomentum(schedule.momentum);
    aligner->learning_rate = schedule.discriminator_lr;
  }

  const auto batch = static_cast<std::size_t>(schedule.batch_size);
  std::size_t steps = 0;
  const bool pooled = !single && schedule.joint_balance == JointBalance::pooled;
  std::optional<Loader> pooled_loader;
  std::vector<std::size_t> pooled_offset;
  if (pooled) {
    std::size_t total = 0;
    for (const auto& s : slots) {
      pooled_offset.push_back(total);
      total += s.task->train.size();
    }
    pooled_loader.emplace(total, derive_seed(schedule.seed, "shuffle-pooled"));
    steps = pooled_loader->batches_per_pass(batch);
  } else {
    for (const auto& l : loaders) steps = std::max(steps, l.batches_per_pass(batch));
  }

  SgdMomentum optimizer(schedule.momentum);
  TrainLog log;
  double lr = schedule.base_lr;
  double best = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  bool decayed = false;

  for (int epoch = 1;; ++epoch) {
    LossBreakdown epoch_sum;
    double gap_sum = 0.0;
    double disc_sum = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      Gradients grads = model.zero_gradients();
      LossBreakdown step_loss;
      // (slot index, rows, weight of this sub-batch in the step loss)
      std::vector<std::tuple<std::size_t, std::vector<std::size_t>, double>> parts;
      if (pooled) {
        const auto rows = pooled_loader->next(batch);
        std::vector<std::vector<std::size_t>> by_slot(slots.size());
        for (std::size_t r : rows) {
          std::size_t k = slots.size() - 1;
          while (r < pooled_offset[k]) --k;
          by_slot[k].push_back(r - pooled_offset[k]);
        }
        for (std::size_t k = 0; k < slots.size(); ++k) {
          if (by_slot[k].empty()) continue;
          const double share = static_cast<double>(by_slot[k].size()) / static_cast<double>(rows.size());
          parts.emplace_back(k, std::move(by_slot[k]), share);
        }
      } else {
        for (std::size_t k = 0; k < slots.size(); ++k) parts.emplace_back(k, loaders[k].next(batch), 1.0);
      }

      for (auto& [k, rows, share] : parts) {
        const Slot& slot = slots[k];
        LabeledBatch b{train_batch(*slot.task, slot.task->train, rows, model.arch().input,
                                   schedule.augment ? &augment_rng : nullptr),
                       labels_of(slot.task->train, rows)};
        ForwardOptions fo{true, &dropout_rng, true};
        if (single) {
          AlignmentTargets targets;
          const AlignmentTargets* tp = nullptr;
          if (w.uses_snapshot()) {
            if (use_cache) {
              for (const auto& [t, m] : cached->logits) targets.logits[t] = SoftTargets::gather(m, rows);
              targets.semantic = SoftTargets::gather(cached->semantic, rows);
              targets.attention = SoftTargets::gather(cached->attention, rows);
            } else {
              targets = snapshot_targets(*snapshot, b.inputs);
            }
            tp = &targets;
          }
          const auto heads = live_heads(model, tp, slot.head);
          const ForwardPass pass = model.forward(b.inputs, heads, fo);
          double adv_d = 0.0;
          if (tp != nullptr) {
            const Matrix z_new = normalize_attention(attention_map(pass.bundle.conv_activation, pass.bundle.conv_shape));
            gap_sum += (z_new - targets.attention).rowwise().norm().mean();
            if (aligner) {
              disc_sum += discriminator_accuracy(aligner->discriminator, targets.attention, z_new);
              adv_d = adv_step(*aligner, targets.attention, z_new).d_loss;
            }
          }
          LossBreakdown l = evaluate_combined(model, pass, tp, aligner ? &aligner->discriminator : nullptr, b.labels, w,
                                              slot.head, &grads, nullptr);
          l.adv_d = adv_d;
          accumulate(step_loss, l);
        } else {
          const TaskId heads[] = {slot.head};
          const ForwardPass pass = model.forward(b.inputs, heads, fo);
          Matrix g;
          const double ce = softmax_cross_entropy(pass.bundle.logits.at(slot.head), b.labels, &g);
          BundleGrad bg;
          bg.logits[slot.head] = share * g;
          model.backward(pass, bg, grads);
          LossBreakdown l;
          l.cls = l.total = share * ce;
          accumulate(step_loss, l);
        }
      }
      if (!std::isfinite(step_loss.total) || !grads.all_finite()) {
        throw DivergenceError(phase + " diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                              " (loss " + std::to_string(step_loss.total) + ")");
      }
      auto params = model.parameters();
      optimizer.step(params, grads, lr);
      accumulate(epoch_sum, step_loss);
    }

    double val = 0.0;
    for (const auto& s : slots) val += validation_accuracy(model, *s.task, s.head);
    val /= static_cast<double>(slots.size());

    EpochRecord rec;
    rec.phase = phase;
    rec.method = to_string(method.name);
    rec.task = task_number;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = scaled(epoch_sum, 1.0 / static_cast<double>(steps));
    rec.val_accuracy = val;
    rec.attention_gap = gap_sum / static_cast<double>(steps);
    rec.discriminator_accuracy = disc_sum / static_cast<double>(steps);

    bool stop = false;
    if (!decayed) {
      if (val > best + schedule.plateau_min_delta) {
        best = val;
        since_best = 0;
      } else {
        ++since_best;
      }
      if (since_best >= schedule.plateau_patience || epoch >= schedule.max_epochs) {
        lr *= schedule.lr_decay;
        decayed = true;
        rec.lr_decayed = true;
        ++log.decay_events;
        stop = schedule.post_plateau_epochs == 0;
      }
    } else {
      ++log.epochs_after_decay;
      stop = log.epochs_after_decay >= schedule.post_plateau_epochs;
    }
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stop) break;
  }
  return log;
}

}  // namespace

TrainLog warm_up(ModelDecomposition& model, const TaskDataset& task, TaskId new_head, const TrainSchedule& schedule,
                 const EpochCallback& on_epoch) {
  schedule.validate();
  if (new_head < 0 || new_head >= model.head_count()) throw LookupError("warm-up head does not exist");
  const auto info = model.parameter_info();
  std::unique_ptr<bool[]> trainable(new bool[info.size()]);
  for (std::size_t i = 0; i < info.size(); ++i)
    trainable[i] = info[i].group == ParamGroup::task_head && info[i].head == new_head;

  Loader loader(task.train.size(), derive_seed(schedule.seed, "shuffle", 0));
  Rng augment_rng = make_rng(schedule.seed, "augment");
  Rng dropout_rng = make_rng(schedule.seed, "dropout");
  SgdMomentum optimizer(schedule.momentum);
  const auto batch = static_cast<std::size_t>(schedule.batch_size);
  const std::size_t steps = loader.batches_per_pass(batch);
  TrainLog log;
  const TaskId heads[] = {new_head};
  for (int epoch = 1; epoch <= schedule.warmup_epochs; ++epoch) {
    double sum = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto rows = loader.next(batch);
      const Matrix x = train_batch(task, task.train, rows, model.arch().input, schedule.augment ? &augment_rng : nullptr);
      const ForwardPass pass = model.forward(x, heads, ForwardOptions{true, &dropout_rng, true});
      Matrix g;
      const double ce = softmax_cross_entropy(pass.bundle.logits.at(new_head), labels_of(task.train, rows), &g);
      if (!std::isfinite(ce)) throw DivergenceError("warm-up diverged at epoch " + std::to_string(epoch));
      Gradients grads = model.zero_gradients();
      BundleGrad bg;
      bg.logits[new_head] = std::move(g);
      model.backward(pass, bg, grads, false);
      auto params = model.parameters();
      optimizer.step(params, grads, schedule.warmup_lr, std::span<const bool>(trainable.get(), info.size()));
      sum += ce;
    }
    EpochRecord rec;
    rec.phase = "warmup";
    rec.method = "warmup";
    rec.task = new_head + 1;
    rec.epoch = epoch;
    rec.lr = schedule.warmup_lr;
    rec.loss.cls = rec.loss.total = sum / static_cast<double>(steps);
    rec.val_accuracy = validation_accuracy(model, task, new_head);
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return log;
}

TrainLog train_task(ModelDecomposition& model, const FrozenSnapshot* snapshot, const MethodSpec& method,
                    const TaskDataset& task, TaskId new_head, const TrainSchedule& schedule, const SoftTargets* cached,
                    const EpochCallback& on_epoch) {
  if (new_head < 0 || new_head >= model.head_count()) throw LookupError("training head does not exist");
  const Slot slot{&task, new_head};
  return run_training(model, snapshot, method, std::span<const Slot>(&slot, 1), schedule, cached, "train",
                      new_head + 1, on_epoch);
}

TrainLog joint_train(ModelDecomposition& model, std::span<const TaskDataset* const> tasks,
                     std::span<const TaskId> heads, const TrainSchedule& schedule, const EpochCallback& on_epoch) {
  if (tasks.empty()) throw ConfigError("joint training needs task data");
  if (tasks.size() != heads.size()) throw ConfigError("joint training needs one head per task");
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i] == nullptr) throw ConfigError("joint training is missing data for task " + std::to_string(i + 1));
    if (heads[i] < 0 || heads[i] >= model.head_count()) throw LookupError("joint head does not exist");
    slots.push_back({tasks[i], heads[i]});
  }
  const MethodSpec joint = MethodSpec::make(MethodName::joint, static_cast<int>(tasks.size()));
  return run_training(model, nullptr, joint, slots, schedule, nullptr, "joint", static_cast<int>(tasks.size()),
                      on_epoch);
}

namespace {

TrainSchedule stage_schedule(const SequencePlan& plan, std::string_view stage, std::uint64_t index) {
  TrainSchedule s = plan.schedule;
  s.seed = derive_seed(plan.seed, stage, index);
  return s;
}

std::vector<std::optional<double>> evaluate_row(const ModelDecomposition& model, const TaskSequence& seq, int upto) {
  std::vector<std::optional<double>> row;
  for (int j = 0; j <= upto; ++j) row.emplace_back(evaluate(model, seq.tasks[static_cast<std::size_t>(j)], j));
  return row;
}

void add_and_warm(ModelDecomposition& model, const TaskSequence& seq, const SequencePlan& plan, int t,
                  const EpochCallback& on_epoch) {
  const auto& task = seq.tasks[static_cast<std::size_t>(t)];
  const TaskId head = model.add_head(task.class_count, HeadInit{0.25, derive_seed(plan.seed, "head", static_cast<std::uint64_t>(t))});
  warm_up(model, task, head, stage_schedule(plan, "stage-warmup", static_cast<std::uint64_t>(t)), on_epoch);
}

}  // namespace

SequenceStart prepare_sequence(const TaskSequence& sequence, const SequencePlan& plan, const EpochCallback& on_epoch) {
  if (sequence.tasks.empty()) throw ConfigError("empty task sequence");
  plan.schedule.validate();
  plan.weights.validate();
  const int first[] = {sequence.tasks.front().class_count};
  SequenceStart start{build_backbone(plan.arch, first, plan.seed), {}, 0.0, std::nullopt};
  const MethodSpec ce = MethodSpec::make(MethodName::finetune, static_cast<int>(sequence.tasks.size()));
  start.log = train_task(start.model, nullptr, ce, sequence.tasks.front(), 0, stage_schedule(plan, "stage-train", 0), nullptr,
                         on_epoch);
  start.first_task_accuracy = evaluate(start.model, sequence.tasks.front(), 0);
  if (sequence.tasks.size() >= 2) {
    start.warmed = start.model;
    add_and_warm(*start.warmed, sequence, plan, 1, on_epoch);
  }
  return start;
}

SequenceResult run_method(const TaskSequence& sequence, const SequencePlan& plan, const SequenceStart& start,
                          MethodName method, ModelDecomposition* final_model, TrainLog* log,
                          const EpochCallback& on_epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  const int n = static_cast<int>(sequence.tasks.size());
  SequenceResult result;
  result.method = to_string(method);
  result.seed = plan.seed;
  result.config_digest = plan.config_digest;
  for (int t = 0; t < n; ++t) result.tasks.push_back({t + 1, sequence.tasks[static_cast<std::size_t>(t)].class_count});
  result.accuracy.push_back({start.first_task_accuracy});

  TrainLog local_log;
  TrainLog& out_log = log ? *log : local_log;
  auto append = [&](const TrainLog& l) {
    out_log.epochs.insert(out_log.epochs.end(), l.epochs.begin(), l.epochs.end());
    out_log.decay_events += l.decay_events;
    out_log.epochs_after_decay += l.epochs_after_decay;
  };
  EpochCallback tagged = [&](const EpochRecord& r) {
    EpochRecord copy = r;
    if (copy.phase != "warmup") copy.method = result.method;
    if (on_epoch) on_epoch(copy);
  };

  ModelDecomposition model = n >= 2 ? *start.warmed : start.model;
  if (method == MethodName::joint) {
    for (int t = 2; t < n; ++t) add_and_warm(model, sequence, plan, t, tagged);
    if (n >= 2) {
      std::vector<const TaskDataset*> tasks;
      for (const auto& t : sequence.tasks) tasks.push_back(&t);
      const auto heads = head_range(n);
      append(joint_train(model, tasks, heads, stage_schedule(plan, "stage-joint", 0), tagged));
      for (int t = 1; t < n - 1; ++t) result.accuracy.emplace_back(static_cast<std::size_t>(t + 1), std::nullopt);
      result.accuracy.push_back(evaluate_row(model, sequence, n - 1));
    }
  } else {
    const MethodSpec spec = MethodSpec::make(method, n, plan.weights, plan.lambda2_override);
    for (int t = 1; t < n; ++t) {
      const FrozenSnapshot snap = t == 1 ? FrozenSnapshot(start.model) : FrozenSnapshot(model);
      if (t > 1) add_and_warm(model, sequence, plan, t, tagged);
      const auto& task = sequence.tasks[static_cast<std::size_t>(t)];
      std::optional<SoftTargets> cache;
      if (!plan.schedule.augment && spec.weights.uses_snapshot() && spec.weights.conv_variant != ConvVariant::l2) {
        const auto old_heads = head_range(t);
        cache = record_soft_targets(snap, task, old_heads);
      }
      append(train_task(model, &snap, spec, task, t, stage_schedule(plan, "stage-train", static_cast<std::uint64_t>(t)),
                        cache ? &*cache : nullptr, tagged));
      result.accuracy.push_back(evaluate_row(model, sequence, t));
    }
  }
  result.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (final_model) *final_model = std::move(model);
  return result;
}

SequenceRun run_sequence(const TaskSequence& sequence, const SequencePlan& plan, const EpochCallback& on_epoch) {
  if (sequence.tasks.size() < 2) throw ConfigError("run_sequence needs at least two tasks");
  SequenceRun run;
  const SequenceStart start = prepare_sequence(sequence, plan, on_epoch);
  for (MethodName m : plan.methods) {
    ModelDecomposition final_model;
    TrainLog log = start.log;
    run.results.push_back(run_method(sequence, plan, start, m, &final_model, &log, on_epoch));
    run.final_models[to_string(m)] = std::move(final_model);
    run.logs[to_string(m)] = std::move(log);
  }
  return run;
}

}  // namespace afa
