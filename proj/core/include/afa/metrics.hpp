#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "afa/model.hpp"
#include "afa/types.hpp"

namespace afa {

struct TaskDataset;

struct TaskInfo {
  int id = 0;  // 1-based position in the sequence
  int classes = 0;
};

/// acc[i][j]: test accuracy (fraction) on task j after training on task i,
/// both 0-based in storage. Entries above the diagonal are always empty;
/// joint training leaves intermediate rows empty.
struct SequenceResult {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<TaskInfo> tasks;
  std::vector<std::vector<std::optional<double>>> accuracy;
  double elapsed_seconds = 0.0;

  /// acc with 1-based task numbers; throws LookupError when absent.
  [[nodiscard]] double at(int after_task, int on_task) const;
  [[nodiscard]] int task_count() const { return static_cast<int>(tasks.size()); }
  /// Mean of the last row.
  [[nodiscard]] double final_average() const;
};

/// Fraction of rows whose arg-max logit equals the label; ties resolve to
/// the lowest class index.
double accuracy_from_logits(const Matrix& logits, std::span<const int> labels);

/// Test accuracy of one head on one task.
double evaluate(const ModelDecomposition& model, const TaskDataset& task, TaskId head, int batch_size = 256);

/// Signed difference in percentage points between two accuracy fractions.
double drop_vs_reference(double acc_method, double acc_reference);

/// Mean over earlier tasks of (acc[upto][j] - acc[j][j]) in percentage points.
/// `upto_task` is 1-based and must be at least 2.
double avg_forgetting(const SequenceResult& result, int upto_task);

/// acc_method[t][t] - acc_finetune[t][t] in percentage points (1-based t).
double new_task_gain(const SequenceResult& method, const SequenceResult& finetune, int task);

/// "+1.09" / "-0.40" / "0.00" with two decimals.
std::string format_delta(double percentage_points);
/// "54.71" from 0.5471.
std::string format_percent(double fraction);

struct ReportOptions {
  std::string timestamp;      // ISO-8601, the only run-dependent field of results.json
  bool render_images = true;  // ignored when no plotting backend is present
};

/// Writes results.json, comparison.csv and plotdata/*.tsv into `out_dir`.
void emit_report(std::span<const SequenceResult> results, const std::filesystem::path& out_dir,
                 const ReportOptions& options = {});

/// Serializes results in the report's JSON schema (stable key order).
std::string results_to_json(std::span<const SequenceResult> results, const std::string& timestamp);
std::vector<SequenceResult> results_from_json(const std::string& text);
std::string single_result_json(const SequenceResult& result);

/// Plot-data files only (per-task bars, forgetting curve, gain curve).
void emit_plot_data(std::span<const SequenceResult> results, const std::filesystem::path& out_dir);

inline constexpr int kResultsSchemaVersion = 1;

}  // namespace afa
