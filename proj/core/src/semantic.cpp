#include "afa/semantic.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "afa/attention.hpp"
#include "afa/data.hpp"
#include "binary_io.hpp"

namespace afa {

void KernelSpec::validate() const {
  if (bandwidths.empty()) throw ValidationError("kernel needs at least one bandwidth");
  for (double s : bandwidths) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("kernel bandwidths must be positive");
  }
}

KernelSpec KernelSpec::median_heuristic(const Matrix& a, const Matrix& b) {
  Matrix joined(a.rows() + b.rows(), a.cols());
  joined << a, b;
  std::vector<double> d2;
  d2.reserve(static_cast<std::size_t>(joined.rows() * (joined.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < joined.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < joined.rows(); ++j) {
      d2.push_back((joined.row(i) - joined.row(j)).squaredNorm());
    }
  }
  double median = 0.0;
  if (!d2.empty()) {
    const auto mid = d2.begin() + static_cast<std::ptrdiff_t>(d2.size() / 2);
    std::nth_element(d2.begin(), mid, d2.end());
    median = *mid;
    if (d2.size() % 2 == 0) {
      const double lower = *std::max_element(d2.begin(), mid);
      median = 0.5 * (median + lower);
    }
  }
  const double s = median > 0.0 ? std::sqrt(median) : 1.0;
  return KernelSpec{{s / 4.0, s / 2.0, s, 2.0 * s, 4.0 * s}};
}

double rbf_kernel(std::span<const double> p, std::span<const double> q, const KernelSpec& spec) {
  spec.validate();
  if (p.size() != q.size()) throw ValidationError("rbf_kernel dimension mismatch");
  double d2 = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) d2 += (p[i] - q[i]) * (p[i] - q[i]);
  double k = 0.0;
  for (double s : spec.bandwidths) k += std::exp(-d2 / (2.0 * s * s));
  return k / static_cast<double>(spec.bandwidths.size());
}

namespace {

Matrix squared_distances(const Matrix& a, const Matrix& b) {
  const Vector na = a.rowwise().squaredNorm();
  const Vector nb = b.rowwise().squaredNorm();
  Matrix d = -2.0 * a * b.transpose();
  d.colwise() += na;
  d.rowwise() += nb.transpose();
  return d.cwiseMax(0.0);
}

// Kernel matrix and dK/d(d2) for every pair.
void kernel_blocks(const Matrix& d2, const KernelSpec& spec, Matrix& k, Matrix* dk) {
  const double m = static_cast<double>(spec.bandwidths.size());
  k = Matrix::Zero(d2.rows(), d2.cols());
  if (dk) *dk = Matrix::Zero(d2.rows(), d2.cols());
  for (double s : spec.bandwidths) {
    const double inv = 1.0 / (2.0 * s * s);
    const Matrix e = (-d2.array() * inv).exp().matrix();
    k += e / m;
    if (dk) *dk -= e * (inv / m);
  }
}

}  // namespace

MmdEstimate mmd_loss(const Matrix& h_new, const Matrix& h_old, const KernelSpec& spec, Matrix* d_h_new) {
  spec.validate();
  if (h_new.rows() == 0 || h_old.rows() == 0) throw ValidationError("mmd_loss needs non-empty batches");
  if (h_new.cols() != h_old.cols()) throw ValidationError("mmd_loss feature dimension mismatch");
  const double n = static_cast<double>(h_new.rows());
  const double m = static_cast<double>(h_old.rows());

  Matrix kxx, kyy, kxy, dxx, dxy;
  kernel_blocks(squared_distances(h_new, h_new), spec, kxx, d_h_new ? &dxx : nullptr);
  kernel_blocks(squared_distances(h_old, h_old), spec, kyy, nullptr);
  kernel_blocks(squared_distances(h_new, h_old), spec, kxy, d_h_new ? &dxy : nullptr);

  // Exact zero on identical inputs needs the terms summed in the same order.
  const double value = kxx.sum() / (n * n) + kyy.sum() / (m * m) - 2.0 * kxy.sum() / (n * m);
  if (d_h_new) {
    // d d2(x_i, y)/d x_i = 2 (x_i - y). The xx term counts each pair twice.
    const Matrix wxx = dxx * (2.0 / (n * n));
    const Matrix wxy = dxy * (-2.0 / (n * m));
    Matrix g = 2.0 * (wxx.rowwise().sum().asDiagonal() * h_new - wxx * h_new);
    g += 2.0 * (wxy.rowwise().sum().asDiagonal() * h_new - wxy * h_old);
    *d_h_new = std::move(g);
  }
  return MmdEstimate{std::max(value, 0.0)};
}

Matrix softmax(const Matrix& logits, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  Matrix z = logits / temperature;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - mx).exp();
    z.row(i) /= z.row(i).sum();
  }
  return z;
}

namespace {

Matrix log_softmax(const Matrix& logits, double temperature) {
  Matrix z = logits / temperature;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    z.row(i).array() -= lse;
  }
  return z;
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError(std::string(what) + ": shape mismatch");
  if (a.rows() == 0) throw ValidationError(std::string(what) + ": empty batch");
}

}  // namespace

double kd_loss(const Matrix& new_logits, const Matrix& recorded_logits, double temperature, Matrix* d_new) {
  check_same_shape(new_logits, recorded_logits, "kd_loss");
  if (!(temperature > 0.0)) throw ValidationError("kd_loss temperature must be positive");
  const Matrix target = softmax(recorded_logits, temperature);
  const Matrix logq = log_softmax(new_logits, temperature);
  const double n = static_cast<double>(new_logits.rows());
  const double value = -(target.cwiseProduct(logq)).sum() / n;
  if (d_new) *d_new = (logq.array().exp().matrix() - target) / (temperature * n);
  return value;
}

double l2_logit_loss(const Matrix& new_logits, const Matrix& recorded_logits, Matrix* d_new) {
  check_same_shape(new_logits, recorded_logits, "l2 loss");
  const Matrix r = new_logits - recorded_logits;
  const double count = static_cast<double>(r.size());
  if (d_new) *d_new = r * (2.0 / count);
  return r.squaredNorm() / count;
}

double l2_feature_loss(const Matrix& new_features, const Matrix& recorded_features, Matrix* d_new) {
  return l2_logit_loss(new_features, recorded_features, d_new);
}

std::size_t SoftTargets::row_of(std::int64_t sample_id) const {
  if (index_.size() != sample_ids.size()) {
    index_.clear();
    for (std::size_t i = 0; i < sample_ids.size(); ++i) index_[sample_ids[i]] = i;
  }
  auto it = index_.find(sample_id);
  if (it == index_.end()) throw LookupError("sample id " + std::to_string(sample_id) + " not recorded");
  return it->second;
}

Matrix SoftTargets::gather(const Matrix& source, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), source.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = source.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

bool operator==(const SoftTargets& a, const SoftTargets& b) {
  if (a.task != b.task || a.sample_ids != b.sample_ids || a.logits.size() != b.logits.size()) return false;
  auto same = [](const Matrix& x, const Matrix& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() &&
           std::memcmp(x.data(), y.data(), static_cast<std::size_t>(x.size()) * sizeof(double)) == 0;
  };
  for (const auto& [t, m] : a.logits) {
    auto it = b.logits.find(t);
    if (it == b.logits.end() || !same(m, it->second)) return false;
  }
  return same(a.semantic, b.semantic) && same(a.attention, b.attention);
}

SoftTargets record_soft_targets(const FrozenSnapshot& snapshot, const TaskDataset& task,
                                std::span<const TaskId> old_heads, int batch_size) {
  if (task.train.size() == 0) throw ValidationError("record_soft_targets: empty dataset");
  if (old_heads.empty()) throw ValidationError("record_soft_targets: snapshot has no old heads");
  const ModelDecomposition& model = snapshot.model();
  SoftTargets out;
  out.task = task.task_id;
  out.sample_ids = task.train.ids;
  const auto n = static_cast<Eigen::Index>(task.train.size());
  for (TaskId t : old_heads) out.logits[t] = Matrix(n, model.head_classes(t));
  out.semantic.resize(n, model.semantic_dim());
  out.attention.resize(n, model.attention_shape().pixels());

  for (Eigen::Index start = 0; start < n; start += batch_size) {
    const Eigen::Index len = std::min<Eigen::Index>(batch_size, n - start);
    std::vector<std::size_t> rows(static_cast<std::size_t>(len));
    for (Eigen::Index i = 0; i < len; ++i) rows[static_cast<std::size_t>(i)] = static_cast<std::size_t>(start + i);
    const Matrix x = eval_batch(task, task.train, rows, model.arch().input);
    const ActivationBundle b = snapshot.forward(x, old_heads);
    for (TaskId t : old_heads) out.logits[t].middleRows(start, len) = b.logits.at(t);
    out.semantic.middleRows(start, len) = b.semantic_feature;
    out.attention.middleRows(start, len) = normalize_attention(attention_map(b.conv_activation, b.conv_shape));
  }
  return out;
}

namespace {
constexpr char kSoftMagic[8] = {'A', 'F', 'A', 'S', 'O', 'F', 'T', '1'};
}

void save_soft_targets(const std::filesystem::path& path, const SoftTargets& targets) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  binio::Writer w(os);
  w.bytes(kSoftMagic, sizeof kSoftMagic);
  w.i64(targets.task);
  w.u64(targets.sample_ids.size());
  w.u64(targets.logits.size());
  for (const auto& [t, m] : targets.logits) {
    w.i64(t);
    w.u64(static_cast<std::uint64_t>(m.cols()));
  }
  w.u64(static_cast<std::uint64_t>(targets.semantic.cols()));
  w.u64(static_cast<std::uint64_t>(targets.attention.cols()));
  // Index: sample id followed by its record offset in the payload (in doubles).
  std::uint64_t stride = static_cast<std::uint64_t>(targets.semantic.cols() + targets.attention.cols());
  for (const auto& [t, m] : targets.logits) stride += static_cast<std::uint64_t>(m.cols());
  for (std::size_t i = 0; i < targets.sample_ids.size(); ++i) {
    w.i64(targets.sample_ids[i]);
    w.u64(i * stride);
  }
  for (std::size_t i = 0; i < targets.sample_ids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (const auto& [t, m] : targets.logits) w.doubles(m.row(r).data(), static_cast<std::size_t>(m.cols()));
    w.doubles(targets.semantic.row(r).data(), static_cast<std::size_t>(targets.semantic.cols()));
    w.doubles(targets.attention.row(r).data(), static_cast<std::size_t>(targets.attention.cols()));
  }
  w.finish();
  if (!os) throw IoError("failed writing " + path.string());
}

SoftTargets load_soft_targets(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  binio::Reader r(is);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kSoftMagic, sizeof magic) != 0) throw CorruptArchiveError("not a soft-target archive");
  SoftTargets out;
  out.task = static_cast<TaskId>(r.i64());
  const auto count = r.u64();
  const auto heads = r.u64();
  if (count > (1ULL << 32) || heads > 4096) throw CorruptArchiveError("implausible soft-target header");
  std::vector<std::pair<TaskId, std::uint64_t>> head_dims;
  for (std::uint64_t h = 0; h < heads; ++h) {
    const auto t = static_cast<TaskId>(r.i64());
    head_dims.emplace_back(t, r.u64());
  }
  const auto sem = r.u64();
  const auto att = r.u64();
  const auto n = static_cast<Eigen::Index>(count);
  for (const auto& [t, c] : head_dims) out.logits[t] = Matrix(n, static_cast<Eigen::Index>(c));
  out.semantic.resize(n, static_cast<Eigen::Index>(sem));
  out.attention.resize(n, static_cast<Eigen::Index>(att));
  out.sample_ids.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    out.sample_ids[i] = r.i64();
    (void)r.u64();
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (auto& [t, m] : out.logits) r.doubles(m.row(i).data(), static_cast<std::size_t>(m.cols()));
    r.doubles(out.semantic.row(i).data(), sem);
    r.doubles(out.attention.row(i).data(), att);
  }
  r.verify_checksum();
  return out;
}

}  // namespace afa
