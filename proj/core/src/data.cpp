#include "afa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

#include <json.hpp>

#include "afa/image_io.hpp"

namespace afa {
namespace {

constexpr int kCropMargin = 2;

struct Blob {
  double u, v, sigma, amplitude;
  double color[3];
};

struct ClassPrototype {
  bool texture = false;
  std::vector<Blob> blobs;
  double theta = 0.0, frequency = 0.0;
  double color[3] = {0, 0, 0};
};

ClassPrototype make_prototype(SyntheticKind kind, int k, std::uint64_t seed) {
  Rng rng = make_rng(seed, "synthetic-class", static_cast<std::uint64_t>(k));
  ClassPrototype p;
  p.texture = kind == SyntheticKind::textures || (kind == SyntheticKind::mixed && k % 2 == 1);
  auto color = [&](double* c) {
    double norm = 0.0;
    for (int i = 0; i < 3; ++i) {
      c[i] = uniform(rng, -1.0, 1.0);
      norm += c[i] * c[i];
    }
    norm = std::sqrt(norm) + 1e-12;
    for (int i = 0; i < 3; ++i) c[i] /= norm;
  };
  if (p.texture) {
    p.theta = uniform(rng, 0.0, std::numbers::pi);
    p.frequency = uniform(rng, 1.5, 4.0);
    color(p.color);
  } else {
    for (int b = 0; b < 3; ++b) {
      Blob blob{};
      blob.u = uniform(rng, 0.2, 0.8);
      blob.v = uniform(rng, 0.2, 0.8);
      blob.sigma = uniform(rng, 0.08, 0.18);
      blob.amplitude = uniform(rng, 0.5, 0.9);
      color(blob.color);
      p.blobs.push_back(blob);
    }
  }
  return p;
}

void render(const ClassPrototype& p, const SyntheticSpec& spec, ImageShape shape, Rng& rng, double* out) {
  const int hw = shape.pixels();
  if (p.texture) {
    const double theta = p.theta + 2.0 * spec.jitter * standard_normal(rng);
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double amp = uniform(rng, 0.3, 0.5);
    const double c = std::cos(theta), s = std::sin(theta);
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        const double u = (x + 0.5) / shape.width, v = (y + 0.5) / shape.height;
        const double wave = std::sin(2.0 * std::numbers::pi * p.frequency * (u * c + v * s) + phase);
        for (int ch = 0; ch < 3; ++ch) out[ch * hw + y * shape.width + x] = 0.5 + amp * p.color[ch] * wave;
      }
    }
  } else {
    for (int i = 0; i < 3 * hw; ++i) out[i] = 0.5;
    for (const Blob& b : p.blobs) {
      const double u0 = b.u + spec.jitter * standard_normal(rng);
      const double v0 = b.v + spec.jitter * standard_normal(rng);
      const double amp = b.amplitude * uniform(rng, 0.7, 1.3);
      const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
      for (int y = 0; y < shape.height; ++y) {
        for (int x = 0; x < shape.width; ++x) {
          const double du = (x + 0.5) / shape.width - u0, dv = (y + 0.5) / shape.height - v0;
          const double g = amp * std::exp(-(du * du + dv * dv) * inv);
          for (int ch = 0; ch < 3; ++ch) out[ch * hw + y * shape.width + x] += g * b.color[ch];
        }
      }
    }
  }
  for (int i = 0; i < 3 * hw; ++i) out[i] += spec.noise * standard_normal(rng);
}

Split take_rows(const Split& s, std::span<const std::size_t> rows) {
  Split out;
  out.images.resize(static_cast<Eigen::Index>(rows.size()), s.images.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.images.row(static_cast<Eigen::Index>(i)) = s.images.row(static_cast<Eigen::Index>(rows[i]));
    out.labels.push_back(s.labels[rows[i]]);
    out.ids.push_back(s.ids[rows[i]]);
  }
  return out;
}

template <typename T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

}  // namespace

DataSource make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.classes < 1 || spec.train_per_class < 1 || spec.test_per_class < 1 || spec.image_size < 4)
    throw ConfigError("synthetic spec needs positive class/sample counts and image_size >= 4");
  DataSource src;
  const int side = spec.image_size + kCropMargin;
  src.shape = {3, side, side};
  const int per = spec.train_per_class + spec.test_per_class;
  src.train.images.resize(static_cast<Eigen::Index>(spec.classes) * spec.train_per_class, src.shape.size());
  src.test.images.resize(static_cast<Eigen::Index>(spec.classes) * spec.test_per_class, src.shape.size());
  for (int k = 0; k < spec.classes; ++k) {
    src.class_names.push_back("class_" + std::to_string(k));
    const ClassPrototype proto = make_prototype(spec.kind, k, seed);
    Rng rng = make_rng(seed, "synthetic-sample", static_cast<std::uint64_t>(k));
    for (int i = 0; i < per; ++i) {
      const bool train = i < spec.train_per_class;
      Split& split = train ? src.train : src.test;
      const int local = train ? i : i - spec.train_per_class;
      const auto row = static_cast<Eigen::Index>(k) * (train ? spec.train_per_class : spec.test_per_class) + local;
      render(proto, spec, src.shape, rng, split.images.row(row).data());
      split.labels.push_back(k);
      split.ids.push_back(static_cast<std::int64_t>(k) * 1'000'000 + i);
    }
  }
  return src;
}

DataSource load_image_directory(const DirectorySpec& spec, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(spec.root)) throw ConfigError("dataset root does not exist: " + spec.root.string());
  DataSource src;
  const int side = spec.image_size + kCropMargin;
  src.shape = {3, side, side};

  auto list_classes = [](const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory()) names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
  };
  auto list_files = [](const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      const auto ext = e.path().extension().string();
      if (ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm" || ext == ".PNG") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
  };
  auto read = [&](const fs::path& file) {
    const Image img = load_image(file);
    return resize_region(img.pixels, img.shape, 0, 0, img.shape.width, img.shape.height, side, side);
  };
  auto append = [&](Split& split, const std::vector<double>& px, int label, std::int64_t id) {
    const auto r = split.images.rows();
    split.images.conservativeResize(r + 1, src.shape.size());
    split.images.row(r) = Eigen::Map<const RowVector>(px.data(), static_cast<Eigen::Index>(px.size()));
    split.labels.push_back(label);
    split.ids.push_back(id);
  };

  const bool presplit = fs::is_directory(spec.root / "train") && fs::is_directory(spec.root / "test");
  const fs::path base = presplit ? spec.root / "train" : spec.root;
  src.class_names = list_classes(base);
  if (src.class_names.empty()) throw ConfigError("no class folders under " + base.string());
  src.train.images.resize(0, src.shape.size());
  src.test.images.resize(0, src.shape.size());
  std::int64_t next_id = 0;
  for (std::size_t k = 0; k < src.class_names.size(); ++k) {
    const int label = static_cast<int>(k);
    auto files = list_files(base / src.class_names[k]);
    if (presplit) {
      for (const auto& f : files) append(src.train, read(f), label, next_id++);
      for (const auto& f : list_files(spec.root / "test" / src.class_names[k])) append(src.test, read(f), label, next_id++);
    } else {
      Rng rng = make_rng(seed, "directory-split", k);
      seeded_shuffle(files, rng);
      const auto n_test = static_cast<std::size_t>(std::lround(spec.test_fraction * static_cast<double>(files.size())));
      for (std::size_t i = 0; i < files.size(); ++i) {
        append(i < n_test ? src.test : src.train, read(files[i]), label, next_id++);
      }
    }
  }
  return src;
}

std::vector<std::vector<std::string>> load_task_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open task manifest " + path.string());
  try {
    const auto j = nlohmann::json::parse(is);
    return j.at("tasks").get<std::vector<std::vector<std::string>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed task manifest " + path.string() + ": " + e.what());
  }
}

TaskSequence build_sequence(const DataSource& source, int n_tasks, std::uint64_t seed, const SequenceOptions& options) {
  const int n_classes = static_cast<int>(source.class_names.size());
  if (n_tasks < 1) throw ConfigError("n_tasks must be positive");
  if (options.val_fraction < 0.0 || options.val_fraction >= 1.0) throw ConfigError("val_fraction must lie in [0, 1)");

  std::vector<std::vector<int>> groups;
  if (options.class_groups) {
    if (static_cast<int>(options.class_groups->size()) != n_tasks)
      throw ConfigError("task manifest declares a different number of tasks");
    std::set<int> used;
    for (const auto& names : *options.class_groups) {
      std::vector<int> g;
      for (const auto& name : names) {
        auto it = std::find(source.class_names.begin(), source.class_names.end(), name);
        if (it == source.class_names.end()) throw ConfigError("manifest names unknown class " + name);
        const int k = static_cast<int>(it - source.class_names.begin());
        if (!used.insert(k).second) throw ConfigError("manifest assigns class " + name + " twice");
        g.push_back(k);
      }
      if (g.size() < 2) throw ConfigError("every task needs at least two classes");
      groups.push_back(std::move(g));
    }
  } else {
    if (n_classes < 2 * n_tasks) {
      throw ConfigError("source has " + std::to_string(n_classes) + " classes, need at least " +
                        std::to_string(2 * n_tasks) + " for " + std::to_string(n_tasks) + " tasks");
    }
    std::vector<int> order(static_cast<std::size_t>(n_classes));
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, "class-partition");
    seeded_shuffle(order, rng);
    groups.resize(static_cast<std::size_t>(n_tasks));
    const int base = n_classes / n_tasks, extra = n_classes % n_tasks;
    int pos = 0;
    for (int t = 0; t < n_tasks; ++t) {
      const int take = base + (t < extra ? 1 : 0);
      groups[static_cast<std::size_t>(t)].assign(order.begin() + pos, order.begin() + pos + take);
      pos += take;
    }
  }

  TaskSequence seq;
  seq.seed = seed;
  for (int t = 0; t < n_tasks; ++t) {
    const auto& g = groups[static_cast<std::size_t>(t)];
    std::map<int, int> relabel;
    TaskDataset task;
    task.task_id = t;
    task.class_count = static_cast<int>(g.size());
    task.stored_shape = source.shape;
    for (std::size_t i = 0; i < g.size(); ++i) {
      relabel[g[i]] = static_cast<int>(i);
      task.class_names.push_back(source.class_names[static_cast<std::size_t>(g[i])]);
    }
    auto select = [&](const Split& s) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < s.size(); ++i)
        if (relabel.contains(s.labels[i])) rows.push_back(i);
      Split out = take_rows(s, rows);
      for (int& l : out.labels) l = relabel.at(l);
      return out;
    };
    Split pool = select(source.train);
    task.test = select(source.test);

    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = make_rng(seed, "val-split", static_cast<std::uint64_t>(t));
    seeded_shuffle(idx, rng);
    const auto n_val = static_cast<std::size_t>(std::lround(options.val_fraction * static_cast<double>(idx.size())));
    std::vector<std::size_t> val_rows(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_rows(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::sort(val_rows.begin(), val_rows.end());
    std::sort(train_rows.begin(), train_rows.end());
    task.val = take_rows(pool, val_rows);
    task.train = take_rows(pool, train_rows);
    if (task.train.size() == 0 || task.test.size() == 0) throw ConfigError("task " + std::to_string(t) + " has an empty split");
    task.stats = compute_stats(task.train.images, task.stored_shape);
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

NormalizationStats compute_stats(const Matrix& images, ImageShape shape) {
  NormalizationStats stats;
  const int hw = shape.pixels();
  for (int c = 0; c < shape.channels; ++c) {
    const auto block = images.middleCols(static_cast<Eigen::Index>(c) * hw, hw);
    const double count = static_cast<double>(block.size());
    const double mean = block.sum() / count;
    const double var = (block.array() - mean).square().sum() / count;
    stats.mean.push_back(mean);
    stats.stddev.push_back(std::sqrt(var));
  }
  return stats;
}

Matrix normalize(const Matrix& images, ImageShape shape, const NormalizationStats& stats) {
  if (static_cast<int>(stats.mean.size()) != shape.channels || static_cast<int>(stats.stddev.size()) != shape.channels)
    throw ValidationError("normalization stats do not match channel count");
  const int hw = shape.pixels();
  Matrix out(images.rows(), images.cols());
  for (int c = 0; c < shape.channels; ++c) {
    const double sd = stats.stddev[static_cast<std::size_t>(c)];
    if (!(sd > 0.0)) throw ValidationError("normalization std must be positive");
    const auto cols = static_cast<Eigen::Index>(c) * hw;
    out.middleCols(cols, hw) = (images.middleCols(cols, hw).array() - stats.mean[static_cast<std::size_t>(c)]) / sd;
  }
  return out;
}

Matrix horizontal_flip(const Matrix& image, ImageShape shape) {
  Matrix out(image.rows(), image.cols());
  for (Eigen::Index r = 0; r < image.rows(); ++r) {
    for (int c = 0; c < shape.channels; ++c)
      for (int y = 0; y < shape.height; ++y)
        for (int x = 0; x < shape.width; ++x) {
          const int base = (c * shape.height + y) * shape.width;
          out(r, base + x) = image(r, base + shape.width - 1 - x);
        }
  }
  return out;
}

Matrix center_crop(const Matrix& image, ImageShape stored, ImageShape out) {
  if (out.height > stored.height || out.width > stored.width) throw ValidationError("crop larger than image");
  const int y0 = (stored.height - out.height) / 2, x0 = (stored.width - out.width) / 2;
  Matrix res(image.rows(), out.size());
  for (Eigen::Index r = 0; r < image.rows(); ++r)
    for (int c = 0; c < out.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
          res(r, (c * out.height + y) * out.width + x) = image(r, (c * stored.height + y + y0) * stored.width + x + x0);
  return res;
}

Matrix augment(const Matrix& image, ImageShape stored, ImageShape out, Rng& rng) {
  if (image.rows() != 1 || image.cols() != stored.size()) throw ValidationError("augment expects one stored image");
  const double area = static_cast<double>(stored.pixels());
  double w = stored.width, h = stored.height, x0 = 0, y0 = 0;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * uniform(rng, 0.5, 1.0);
    const double ratio = std::exp(uniform(rng, std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
    const double cw = std::round(std::sqrt(target * ratio));
    const double ch = std::round(std::sqrt(target / ratio));
    if (cw >= 1 && ch >= 1 && cw <= stored.width && ch <= stored.height) {
      w = cw;
      h = ch;
      x0 = std::floor(uniform(rng, 0.0, stored.width - w + 1.0));
      y0 = std::floor(uniform(rng, 0.0, stored.height - h + 1.0));
      found = true;
    }
  }
  const auto px = resize_region(std::span<const double>(image.data(), static_cast<std::size_t>(image.size())), stored,
                                x0, y0, w, h, out.height, out.width);
  Matrix res = Eigen::Map<const Matrix>(px.data(), 1, static_cast<Eigen::Index>(px.size()));
  if (uniform01(rng) < 0.5) res = horizontal_flip(res, out);
  return res;
}

Matrix eval_batch(const TaskDataset& task, const Split& split, std::span<const std::size_t> rows, ImageShape input) {
  Matrix raw(static_cast<Eigen::Index>(rows.size()), task.stored_shape.size());
  for (std::size_t i = 0; i < rows.size(); ++i) raw.row(static_cast<Eigen::Index>(i)) = split.images.row(static_cast<Eigen::Index>(rows[i]));
  return normalize(center_crop(raw, task.stored_shape, input), input, task.stats);
}

Matrix train_batch(const TaskDataset& task, const Split& split, std::span<const std::size_t> rows, ImageShape input,
                   Rng* rng) {
  if (rng == nullptr) return eval_batch(task, split, rows, input);
  Matrix out(static_cast<Eigen::Index>(rows.size()), input.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = augment(split.images.row(static_cast<Eigen::Index>(rows[i])), task.stored_shape, input, *rng);
  }
  return normalize(out, input, task.stats);
}

}  // namespace afa
