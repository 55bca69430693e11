#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "afa/model.hpp"
#include "afa/types.hpp"

namespace afa {

struct TaskDataset;

/// Multi-width RBF kernel, averaged over widths:
///   k(p, q) = mean_i exp(-||p - q||^2 / (2 sigma_i^2)).
struct KernelSpec {
  std::vector<double> bandwidths;

  static KernelSpec single(double sigma) { return KernelSpec{{sigma}}; }
  /// {s/4, s/2, s, 2s, 4s}, s^2 = median pairwise squared distance of the
  /// joined batch (s = 1 when every distance is zero).
  static KernelSpec median_heuristic(const Matrix& a, const Matrix& b);
  void validate() const;
};

double rbf_kernel(std::span<const double> p, std::span<const double> q, const KernelSpec& spec);

struct MmdEstimate {
  double value = 0.0;
};

/// Squared MMD as the full-Gram V-statistic. `h_old` is a constant;
/// `d_h_new` receives the gradient w.r.t. `h_new` when non-null.
MmdEstimate mmd_loss(const Matrix& h_new, const Matrix& h_old, const KernelSpec& spec,
                     Matrix* d_h_new = nullptr);

/// Row-wise softmax of logits / temperature.
Matrix softmax(const Matrix& logits, double temperature = 1.0);

/// Mean over samples of H(softmax(recorded/T), softmax(new/T)).
double kd_loss(const Matrix& new_logits, const Matrix& recorded_logits, double temperature,
               Matrix* d_new = nullptr);

/// Mean squared difference over all entries.
double l2_logit_loss(const Matrix& new_logits, const Matrix& recorded_logits, Matrix* d_new = nullptr);
double l2_feature_loss(const Matrix& new_features, const Matrix& recorded_features, Matrix* d_new = nullptr);

/// Responses of a frozen snapshot on one task's training inputs, keyed by
/// sample id. Logits are stored for every old head.
struct SoftTargets {
  TaskId task = -1;
  std::vector<std::int64_t> sample_ids;
  std::map<TaskId, Matrix> logits;
  Matrix semantic;   // rows aligned with sample_ids
  Matrix attention;  // normalized attention maps

  [[nodiscard]] std::size_t logit_record_count() const { return sample_ids.size() * logits.size(); }
  /// Row index of a sample id; throws LookupError when absent.
  [[nodiscard]] std::size_t row_of(std::int64_t sample_id) const;
  /// Gathers the given rows of `source`.
  static Matrix gather(const Matrix& source, std::span<const std::size_t> rows);

  friend bool operator==(const SoftTargets&, const SoftTargets&);

 private:
  mutable std::map<std::int64_t, std::size_t> index_;
};

/// Records old-head logits, semantic features and normalized attention maps
/// of `snapshot` on the un-augmented training split of `task`, in inference mode.
SoftTargets record_soft_targets(const FrozenSnapshot& snapshot, const TaskDataset& task,
                                std::span<const TaskId> old_heads, int batch_size = 256);

/// Indexed binary archive keyed by (head id, sample id).
void save_soft_targets(const std::filesystem::path& path, const SoftTargets& targets);
SoftTargets load_soft_targets(const std::filesystem::path& path);

}  // namespace afa
