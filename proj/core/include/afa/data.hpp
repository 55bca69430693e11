#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "afa/rng.hpp"
#include "afa/types.hpp"

namespace afa {

/// Labeled images, one flattened (C, H, W) sample per row.
struct Split {
  Matrix images;
  std::vector<int> labels;
  std::vector<std::int64_t> ids;  // unique within the source

  [[nodiscard]] std::size_t size() const { return labels.size(); }
};

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct TaskDataset {
  TaskId task_id = 0;
  int class_count = 0;
  std::vector<std::string> class_names;
  ImageShape stored_shape;  // images are cropped from this size to the model input size
  Split train;
  Split val;
  Split test;
  NormalizationStats stats;  // from `train` only
};

struct TaskSequence {
  std::vector<TaskDataset> tasks;
  std::uint64_t seed = 0;
};

/// A labeled corpus before it is carved into tasks.
struct DataSource {
  ImageShape shape;
  std::vector<std::string> class_names;
  Split train;
  Split test;
};

enum class SyntheticKind { blobs, textures, mixed };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::mixed;
  int classes = 10;
  int train_per_class = 300;
  int test_per_class = 100;
  int image_size = 16;  // model input size; stored images carry a 2 px crop margin
  double noise = 0.25;
  double jitter = 0.08;  // positional / orientation jitter
};

/// Bundled generators: Gaussian-blob constellations and oriented gratings.
DataSource make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

struct DirectorySpec {
  std::filesystem::path root;
  int image_size = 32;
  double test_fraction = 0.2;
};

/// Loads root/<class>/<image> (or root/train/<class>, root/test/<class>),
/// resizing every image to image_size + 2.
DataSource load_image_directory(const DirectorySpec& spec, std::uint64_t seed);

struct SequenceOptions {
  double val_fraction = 0.1;
  /// Explicit class groups (source class names) per task, overriding the
  /// seeded partition. Typically read from a JSON manifest.
  std::optional<std::vector<std::vector<std::string>>> class_groups;
};

/// {"tasks": [["class_a", "class_b"], ...]}
std::vector<std::vector<std::string>> load_task_manifest(const std::filesystem::path& path);

/// Splits the source classes into `n_tasks` disjoint groups, each a task with
/// its own label space.
TaskSequence build_sequence(const DataSource& source, int n_tasks, std::uint64_t seed,
                            const SequenceOptions& options = {});

NormalizationStats compute_stats(const Matrix& images, ImageShape shape);
/// (x - mean) / std per channel.
Matrix normalize(const Matrix& images, ImageShape shape, const NormalizationStats& stats);

Matrix horizontal_flip(const Matrix& image, ImageShape shape);
/// Deterministic center crop from `stored` down to `out`.
Matrix center_crop(const Matrix& image, ImageShape stored, ImageShape out);
/// Random resized crop (area 50-100 %, aspect 3/4-4/3) to `out`, then a
/// horizontal flip with probability 0.5.
Matrix augment(const Matrix& image, ImageShape stored, ImageShape out, Rng& rng);

/// Test-time pipeline: center crop then normalization.
Matrix eval_batch(const TaskDataset& task, const Split& split, std::span<const std::size_t> rows, ImageShape input);
/// Training pipeline: augmentation (when `rng` is non-null) or center crop, then normalization.
Matrix train_batch(const TaskDataset& task, const Split& split, std::span<const std::size_t> rows, ImageShape input,
                   Rng* rng);

}  // namespace afa
