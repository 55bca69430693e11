#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "afa/attention.hpp"
#include "afa/data.hpp"
#include "afa/metrics.hpp"
#include "afa/model.hpp"
#include "afa/semantic.hpp"

namespace afa {

enum class LogitVariant { kd, l2 };
enum class ConvVariant { adversarial, l2, off };
enum class FcVariant { mmd, l2, off };

/// Weights of the combined objective
///   L = L_cls + lambda1 * L_dist + lambda2 * L_adv_F + lambda3 * L_fc
/// and the loss family used at each alignment level.
struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
  LogitVariant logit_variant = LogitVariant::kd;
  ConvVariant conv_variant = ConvVariant::adversarial;
  FcVariant fc_variant = FcVariant::mmd;
  double temperature = 2.0;

  void validate() const;
  [[nodiscard]] bool uses_snapshot() const;
  [[nodiscard]] bool adversarial_active() const { return conv_variant == ConvVariant::adversarial && lambda2 > 0.0; }
};

enum class MethodName { finetune, joint, lwf, afa, afa_adv, afa_mmd };

std::string to_string(MethodName m);
MethodName parse_method(const std::string& name);

struct MethodSpec {
  MethodName name = MethodName::afa;
  LossWeights weights;

  /// Canonical weights for a method. `base` supplies lambda values and loss
  /// variants; lambda2 defaults to 1.0 for two-task sequences and 0.1 for
  /// longer ones unless `lambda2_override` is given.
  static MethodSpec make(MethodName name, int n_tasks, const LossWeights& base = {},
                         std::optional<double> lambda2_override = std::nullopt);
  void validate() const;
};

enum class JointBalance { round_robin, pooled };

struct TrainSchedule {
  int warmup_epochs = 10;
  double base_lr = 0.01;
  double warmup_lr = 0.01;
  double momentum = 0.9;
  int batch_size = 64;
  int plateau_patience = 5;
  double plateau_min_delta = 0.001;  // fraction of accuracy (0.1 percentage points)
  int post_plateau_epochs = 20;
  int max_epochs = 60;  // decay is forced here if no plateau was detected
  double lr_decay = 0.1;
  bool augment = true;
  int discriminator_hidden = 500;
  double discriminator_lr = 0.01;
  JointBalance joint_balance = JointBalance::round_robin;
  std::uint64_t seed = 0;

  /// Full-scale warm-up length (70 epochs) with the remaining desk defaults.
  static TrainSchedule full_scale();
  void validate() const;
};

struct LabeledBatch {
  Matrix inputs;
  std::vector<int> labels;
};

/// Mean softmax cross-entropy; `grad` receives d/d(logits) when non-null.
double softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* grad = nullptr);

/// Inference-mode classification loss through one head.
double classification_loss(const ModelDecomposition& model, const LabeledBatch& batch, TaskId head);

/// Snapshot responses on a batch: old-head logits, conv activation,
/// normalized attention and semantic features.
struct AlignmentTargets {
  std::map<TaskId, Matrix> logits;
  Matrix conv_activation;
  Matrix attention;
  Matrix semantic;
};

AlignmentTargets snapshot_targets(const FrozenSnapshot& snapshot, const Matrix& inputs);

struct LossBreakdown {
  double cls = 0.0;
  double dist = 0.0;
  double adv_f = 0.0;
  double fc = 0.0;
  double adv_d = 0.0;  // discriminator objective, logged only
  double total = 0.0;
};

struct CombinedLossOptions {
  ForwardOptions forward;                     // dropout/rng for the live model
  const AlignmentTargets* targets = nullptr;  // precomputed snapshot side; computed when null
  const KernelSpec* kernel = nullptr;         // fixed MMD widths; median heuristic when null
};

/// Combined objective on one batch of the new task. Components whose weight
/// is zero are neither evaluated nor differentiated. When `grads` is non-null
/// it receives the gradient of the total w.r.t. every model parameter.
LossBreakdown combined_loss(const ModelDecomposition& model, const FrozenSnapshot* snapshot,
                            const Discriminator* discriminator, const LabeledBatch& batch,
                            const LossWeights& weights, TaskId new_head, Gradients* grads = nullptr,
                            const CombinedLossOptions& options = {});

struct EpochRecord {
  std::string phase;  // "warmup", "train" or "joint"
  std::string method;
  int task = 0;       // 1-based task number being learned
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;  // epoch means
  double val_accuracy = 0.0;
  bool lr_decayed = false;
  double discriminator_accuracy = 0.0;  // epoch mean on training batches, before each D step
  double attention_gap = 0.0;           // epoch mean L2 distance between new and old normalized maps
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int decay_events = 0;
  int epochs_after_decay = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains only the new head (F, C and older heads frozen) with cross-entropy.
TrainLog warm_up(ModelDecomposition& model, const TaskDataset& task, TaskId new_head, const TrainSchedule& schedule,
                 const EpochCallback& on_epoch = {});

/// Trains the whole network on the new task with the method's objective until
/// the validation plateau, decays the learning rate once and trains
/// post_plateau_epochs more. `cached` soft targets are used when augmentation
/// is off and the conv variant is not l2.
TrainLog train_task(ModelDecomposition& model, const FrozenSnapshot* snapshot, const MethodSpec& method,
                    const TaskDataset& task, TaskId new_head, const TrainSchedule& schedule,
                    const SoftTargets* cached = nullptr, const EpochCallback& on_epoch = {});

/// Minimizes the sum of per-task cross-entropies over every task; heads[i]
/// is the head for tasks[i].
TrainLog joint_train(ModelDecomposition& model, std::span<const TaskDataset* const> tasks,
                     std::span<const TaskId> heads, const TrainSchedule& schedule, const EpochCallback& on_epoch = {});

struct SequencePlan {
  ArchConfig arch;
  TrainSchedule schedule;
  LossWeights weights;
  std::optional<double> lambda2_override;
  std::vector<MethodName> methods;
  std::uint64_t seed = 0;
  std::string config_digest;
};

struct SequenceRun {
  std::vector<SequenceResult> results;                    // one per method, plan order
  std::map<std::string, ModelDecomposition> final_models; // keyed by method name
  std::map<std::string, TrainLog> logs;
};

/// Shared first-task model all methods start from.
struct SequenceStart {
  ModelDecomposition model;
  TrainLog log;
  double first_task_accuracy = 0.0;
  std::optional<ModelDecomposition> warmed;  // after add_head + warm-up for task 2
};

SequenceStart prepare_sequence(const TaskSequence& sequence, const SequencePlan& plan,
                               const EpochCallback& on_epoch = {});

/// Runs a single method from a prepared start.
SequenceResult run_method(const TaskSequence& sequence, const SequencePlan& plan, const SequenceStart& start,
                          MethodName method, ModelDecomposition* final_model = nullptr, TrainLog* log = nullptr,
                          const EpochCallback& on_epoch = {});

/// For each method: iterate tasks (snapshot, add_head, warm_up, train_task)
/// and evaluate every seen task after each stage. Joint training starts from
/// the first-task model and is trained once on all tasks.
SequenceRun run_sequence(const TaskSequence& sequence, const SequencePlan& plan, const EpochCallback& on_epoch = {});

}  // namespace afa
