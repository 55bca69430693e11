#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "afa/data.hpp"
#include "afa/engine.hpp"
#include "afa/model.hpp"

namespace afa {

enum class DataKind { synthetic, directory };

struct DataConfig {
  DataKind kind = DataKind::synthetic;
  SyntheticSpec synthetic;
  DirectorySpec directory;
  std::optional<std::filesystem::path> manifest;
  double val_fraction = 0.1;
};

/// Declarative description of one experiment. Every field has a default so a
/// config file only lists what it changes.
struct ExperimentConfig {
  DataConfig data;
  int n_tasks = 2;
  ArchConfig arch = ArchConfig::desk_default({3, 16, 16});
  std::vector<MethodName> methods{MethodName::finetune, MethodName::lwf, MethodName::afa, MethodName::joint};
  LossWeights weights;
  std::optional<double> lambda2;  // explicit lambda2; otherwise chosen by sequence length
  TrainSchedule schedule;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs";

  void validate() const;
  /// Stable JSON rendering of every effective field.
  [[nodiscard]] std::string canonical_json() const;
  /// 16 hex digits of FNV-1a over canonical_json().
  [[nodiscard]] std::string digest() const;
};

/// Parses a YAML document. Errors carry "<source>:<line>:<column>: ...".
ExperimentConfig parse_config(const std::string& text, const std::string& source_name = "<config>",
                              const std::filesystem::path& base_dir = ".");
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig config_from_canonical_json(const std::string& text);

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::vector<std::string>> methods;
  std::optional<double> lambda1;
  std::optional<double> lambda2;
  std::optional<double> lambda3;
  std::optional<double> epochs_scale;
};

/// Applies command-line overrides; they become part of the digest.
void apply_overrides(ExperimentConfig& config, const ConfigOverrides& overrides);

TaskSequence build_task_sequence(const ExperimentConfig& config);
SequencePlan make_plan(const ExperimentConfig& config);

struct RunOptions {
  std::string timestamp;      // ISO-8601 UTC; the current time when empty
  int parallel_methods = 1;   // worker processes, one method set each
  bool verbose = false;       // per-epoch progress on the error stream
};

/// Exit codes of the command entry points.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitInvalidConfig = 2;
inline constexpr int kExitDiverged = 3;
inline constexpr int kExitBadCheckpoint = 4;

/// Trains every configured method and writes the run directory
/// <out_dir>/afa-seed<seed>-<stamp>/ with results.json, comparison.csv,
/// run_info.json, plotdata/ and one <method>-seed<seed>/ folder per method.
std::filesystem::path execute_run(const ExperimentConfig& config, const RunOptions& options, std::ostream& log);

int cmd_run(const std::filesystem::path& config_path, const ConfigOverrides& overrides, const RunOptions& options,
            std::ostream& out, std::ostream& err);
/// Prints per-task test accuracies of a checkpoint as JSON. The data config
/// defaults to the one recorded in the checkpoint.
int cmd_eval(const std::filesystem::path& checkpoint_path, const std::optional<std::filesystem::path>& data_config,
             std::ostream& out, std::ostream& err);
int cmd_plot(const std::filesystem::path& results_dir, const std::optional<std::filesystem::path>& out_dir,
             std::ostream& out, std::ostream& err);

std::string utc_timestamp();

}  // namespace afa
