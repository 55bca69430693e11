// Acceptance checks. Prints one "criterion N: PASS|FAIL ..." line per
// selected criterion and exits non-zero when any of them fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "afa/attention.hpp"
#include "afa/engine.hpp"
#include "afa/experiment.hpp"
#include "afa/semantic.hpp"
#include "test_util.hpp"

using namespace afa;
namespace fs = std::filesystem;
using nlohmann::json;
using afa::testing::central_difference;
using afa::testing::random_matrix;
using afa::testing::relative_error;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- analytic

Discriminator constant_discriminator(int dim, double logit) {
  Discriminator d(dim, 4, 1);
  auto p = d.parameters();
  p[2]->setZero();
  p[3]->setConstant(logit);
  return d;
}

Outcome criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  Matrix zero(1, 2);
  zero << 0, 0;
  const double kd = kd_loss(zero, zero, 2.0);
  o.require(std::abs(kd - std::log(2.0)) < 1e-4, "kd_loss " + fmt("%.6f", kd));

  const std::vector<double> p{0.0, 0.0}, q{1.0, 1.0};
  const double k = rbf_kernel(p, q, KernelSpec::single(1.0));
  o.require(std::abs(k - std::exp(-1.0)) < 1e-4, "rbf_kernel " + fmt("%.6f", k));

  const Discriminator half = constant_discriminator(4, 0.0);
  Rng rng(1);
  const double dl = discriminator_loss(half, random_matrix(5, 4, rng, 0, 1), random_matrix(7, 4, rng, 0, 1));
  o.require(std::abs(dl + 2.0 * std::log(2.0)) < 1e-4, "discriminator_loss " + fmt("%.6f", dl));

  Matrix a(1, 1), b(1, 1);
  a << 0.0;
  b << 1.0;
  const double mmd = mmd_loss(a, b, KernelSpec::single(1.0)).value;
  o.require(std::abs(mmd - (2.0 - 2.0 * std::exp(-0.5))) < 1e-4, "mmd_loss " + fmt("%.6f", mmd));

  const double elapsed = seconds_since(t0);
  o.require(elapsed < 1.0, "runtime " + fmt("%.3f s", elapsed));
  if (o.pass)
    o.detail = "ln2=" + fmt("%.6f", kd) + " e^-1=" + fmt("%.6f", k) + " -2ln2=" + fmt("%.6f", dl) +
               " mmd=" + fmt("%.6f", mmd) + " in " + fmt("%.4f s", elapsed);
  return o;
}

// ---------------------------------------------------------------- gradients

constexpr int kProbes = 24;
constexpr double kGradTol = 1e-4;

struct ProbeStats {
  int probes = 0;
  double worst = 0.0;
  void add(double analytic, double numeric) {
    ++probes;
    worst = std::max(worst, relative_error(analytic, numeric));
  }
};

ProbeStats probe_matrix(Matrix& x, const Matrix& analytic, const std::function<double()>& f, Rng& rng) {
  ProbeStats s;
  for (int i = 0; i < kProbes; ++i) {
    const auto k = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(x.size())));
    s.add(analytic.data()[k], central_difference(f, x.data()[k]));
  }
  return s;
}

ArchConfig probe_arch() {
  ArchConfig a;
  a.input = {2, 6, 6};
  a.layers = {{LayerKind::conv, 3, 3, true, 0.0}, {LayerKind::conv, 4, 3, false, 0.0}, {LayerKind::fc, 6, 0, false, 0.5}};
  return a;
}

Outcome criterion2() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  Rng rng(2024);
  std::map<std::string, ProbeStats> stats;

  {
    Matrix h_new = random_matrix(5, 4, rng);
    const Matrix h_old = random_matrix(6, 4, rng);
    const KernelSpec spec{{0.5, 1.0, 2.0}};
    Matrix g;
    mmd_loss(h_new, h_old, spec, &g);
    stats["mmd_loss"] = probe_matrix(h_new, g, [&] { return mmd_loss(h_new, h_old, spec).value; }, rng);
  }
  {
    Matrix z_new = random_matrix(4, 5, rng, -3, 3);
    const Matrix z_old = random_matrix(4, 5, rng, -3, 3);
    Matrix g;
    kd_loss(z_new, z_old, 2.0, &g);
    stats["kd_loss"] = probe_matrix(z_new, g, [&] { return kd_loss(z_new, z_old, 2.0); }, rng);
  }
  {
    const ImageShape shape{3, 4, 4};
    Matrix act = random_matrix(3, shape.size(), rng, 0.1, 1.0);
    const Discriminator d(shape.pixels(), 10, 5);
    auto f = [&] { return feature_adv_loss(d, normalize_attention(attention_map(act, shape))); };
    const Matrix raw = attention_map(act, shape);
    Matrix dz;
    feature_adv_loss(d, normalize_attention(raw), &dz);
    const Matrix g = attention_map_backward(act, shape, normalize_attention_backward(raw, dz));
    stats["feature_adv_loss(normalize(attention))"] = probe_matrix(act, g, f, rng);
  }
  {
    const int counts[] = {3, 2};
    ModelDecomposition live = build_backbone(probe_arch(), counts, 17);
    const FrozenSnapshot snap(live);
    for (Matrix* p : live.parameters()) *p += 0.1 * random_matrix(p->rows(), p->cols(), rng);
    const Discriminator d(live.attention_shape().pixels(), 12, 9);
    LabeledBatch batch{random_matrix(6, probe_arch().input.size(), rng), {0, 1, 1, 0, 1, 0}};
    const KernelSpec kernel{{0.5, 1.0, 2.0, 4.0}};
    CombinedLossOptions opt;
    opt.kernel = &kernel;
    const LossWeights w;
    Gradients g = live.zero_gradients();
    combined_loss(live, &snap, &d, batch, w, 1, &g, opt);
    auto f = [&] { return combined_loss(live, &snap, &d, batch, w, 1, nullptr, opt).total; };
    auto params = live.parameters();
    ProbeStats s;
    for (int i = 0; i < kProbes; ++i) {
      const auto pi = uniform_index(rng, params.size());
      Matrix& p = *params[pi];
      const auto k = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(p.size())));
      s.add(g.tensors[pi].data()[k], central_difference(f, p.data()[k]));
    }
    stats["combined_loss"] = s;
  }

  std::string summary;
  for (const auto& [name, s] : stats) {
    o.require(s.probes >= 20 && s.worst < kGradTol, name + " worst " + fmt("%.2e", s.worst));
    summary += (summary.empty() ? "" : ", ") + name + " " + fmt("%.1e", s.worst);
  }
  const double elapsed = seconds_since(t0);
  o.require(elapsed < 30.0, "runtime " + fmt("%.1f s", elapsed));
  if (o.pass) o.detail = std::to_string(kProbes) + " probes each, worst rel. error: " + summary + "; " + fmt("%.2f s", elapsed);
  return o;
}

// ---------------------------------------------------------------- MMD oracle

double oracle_mmd(const Matrix& p, const Matrix& q, const std::vector<double>& widths) {
  auto k = [&](const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
    double d2 = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) d2 += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
    double s = 0.0;
    for (double w : widths) s += std::exp(-d2 / (2.0 * w * w));
    return s / static_cast<double>(widths.size());
  };
  double pp = 0.0, qq = 0.0, pq = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.rows(); ++j) pp += k(p, i, p, j);
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    for (Eigen::Index j = 0; j < q.rows(); ++j) qq += k(q, i, q, j);
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < q.rows(); ++j) pq += k(p, i, q, j);
  const double n = static_cast<double>(p.rows()), m = static_cast<double>(q.rows());
  return pp / (n * n) + qq / (m * m) - 2.0 * pq / (n * m);
}

Outcome criterion3() {
  Outcome o;
  Rng rng(33);
  double worst = 0.0, min_value = 1e300, worst_identical = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<Eigen::Index>(2 + uniform_index(rng, 7));
    const auto m = static_cast<Eigen::Index>(2 + uniform_index(rng, 7));
    const auto dim = static_cast<Eigen::Index>(1 + uniform_index(rng, 16));
    const Matrix p = random_matrix(n, dim, rng, -2, 2), q = random_matrix(m, dim, rng, -2, 2);
    const std::vector<double> widths{0.25 + uniform01(rng), 1.0 + 2.0 * uniform01(rng)};
    const double v = mmd_loss(p, q, KernelSpec{widths}).value;
    worst = std::max(worst, std::abs(v - oracle_mmd(p, q, widths)));
    min_value = std::min(min_value, v);

    // Identical multiset: same rows in a shuffled order.
    Matrix shuffled = p;
    for (Eigen::Index i = n - 1; i > 0; --i) shuffled.row(i).swap(shuffled.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(i + 1)))));
    worst_identical = std::max(worst_identical, std::abs(mmd_loss(p, shuffled, KernelSpec{widths}).value));
  }
  o.require(worst <= 1e-9, "oracle deviation " + fmt("%.2e", worst));
  o.require(min_value >= 0.0, "negative estimate " + fmt("%.2e", min_value));
  o.require(worst_identical <= 1e-9, "identical multisets give " + fmt("%.2e", worst_identical));
  if (o.pass)
    o.detail = "50 pairs, max |mmd - oracle| " + fmt("%.1e", worst) + ", min value " + fmt("%.3e", min_value) +
               ", identical multisets " + fmt("%.1e", worst_identical);
  return o;
}

// ---------------------------------------------------------------- start point

TaskSequence benchmark_sequence(const fs::path& config, std::uint64_t seed) {
  ExperimentConfig c = load_config(config);
  c.seed = seed;
  return build_task_sequence(c);
}

Outcome criterion4(const fs::path& configs) {
  Outcome o;
  ExperimentConfig c = load_config(configs / "two_task_synthetic.yaml");
  c.seed = 4;
  const TaskSequence seq = build_task_sequence(c);
  const TaskDataset& task = seq.tasks[1];

  // Live model: task-1 training, a new head, and warm-up, exactly as a run starts task 2.
  const int first[] = {seq.tasks[0].class_count};
  ModelDecomposition live = build_backbone(c.arch, first, c.seed);
  TrainSchedule s = c.schedule;
  s.seed = 41;
  s.max_epochs = 3;
  s.post_plateau_epochs = 1;
  train_task(live, nullptr, MethodSpec::make(MethodName::finetune, 2), seq.tasks[0], 0, s);
  const FrozenSnapshot snap(live);
  const TaskId head = live.add_head(task.class_count, HeadInit{0.25, 42});
  warm_up(live, task, head, s);

  const int batch = 64;
  auto rows_of = [](std::size_t begin, std::size_t count, std::size_t n) {
    std::vector<std::size_t> r(count);
    for (std::size_t i = 0; i < count; ++i) r[i] = (begin + i) % n;
    return r;
  };
  double worst_fc = 0.0, worst_map = 0.0;
  AdversarialAligner aligner{Discriminator(live.attention_shape().pixels(), c.schedule.discriminator_hidden,
                                           derive_seed(c.seed, "discriminator")),
                             SgdMomentum(c.schedule.momentum), c.schedule.discriminator_lr};
  LossWeights fc_only;
  fc_only.lambda1 = fc_only.lambda2 = 0.0;
  const TaskId old_heads[] = {0};
  for (int step = 0; step < 200; ++step) {
    const auto rows = rows_of(static_cast<std::size_t>(step) * batch, batch, task.train.size());
    LabeledBatch b{eval_batch(task, task.train, rows, live.arch().input), {}};
    for (std::size_t r : rows) b.labels.push_back(task.train.labels[r]);
    const LossBreakdown l = combined_loss(live, &snap, nullptr, b, fc_only, head);
    worst_fc = std::max(worst_fc, std::abs(l.fc));
    const Matrix z_old = normalize_attention([&] {
      const ActivationBundle a = snap.forward(b.inputs, old_heads);
      return attention_map(a.conv_activation, a.conv_shape);
    }());
    const ActivationBundle nb = forward_capture(live, b.inputs, old_heads);
    const Matrix z_new = normalize_attention(attention_map(nb.conv_activation, nb.conv_shape));
    worst_map = std::max(worst_map, (z_new - z_old).cwiseAbs().maxCoeff());
    adv_step(aligner, z_old, z_new);
  }
  std::vector<std::size_t> held(task.test.size());
  for (std::size_t i = 0; i < held.size(); ++i) held[i] = i;
  const Matrix x = eval_batch(task, task.test, held, live.arch().input);
  const ActivationBundle ho = snap.forward(x, old_heads);
  const ActivationBundle hn = forward_capture(live, x, old_heads);
  const double acc = discriminator_accuracy(aligner.discriminator,
                                            normalize_attention(attention_map(ho.conv_activation, ho.conv_shape)),
                                            normalize_attention(attention_map(hn.conv_activation, hn.conv_shape)));
  o.require(worst_fc <= 1e-9, "L_fc " + fmt("%.2e", worst_fc));
  o.require(worst_map <= 1e-9, "attention gap " + fmt("%.2e", worst_map));
  o.require(acc >= 0.4 && acc <= 0.6, "held-out D accuracy " + fmt("%.3f", acc));
  if (o.pass)
    o.detail = "max L_fc " + fmt("%.1e", worst_fc) + ", max map gap " + fmt("%.1e", worst_map) +
               ", held-out D accuracy " + fmt("%.3f", acc) + " after 200 steps";
  return o;
}

// ---------------------------------------------------------------- combined objective

Outcome criterion5(const fs::path& configs) {
  Outcome o;
  ExperimentConfig c = load_config(configs / "two_task_synthetic.yaml");
  c.seed = 5;
  c.data.synthetic.train_per_class = 60;
  c.data.synthetic.test_per_class = 20;
  const TaskSequence seq = build_task_sequence(c);
  const TaskDataset& task = seq.tasks[1];

  const int counts[] = {seq.tasks[0].class_count, task.class_count};
  ModelDecomposition model = build_backbone(c.arch, counts, 51);
  const FrozenSnapshot snap(model);
  Rng rng(52);
  for (Matrix* p : model.parameters()) *p += 0.02 * random_matrix(p->rows(), p->cols(), rng);
  const Discriminator d(model.attention_shape().pixels(), 32, 53);
  std::vector<std::size_t> rows(32);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i * 3;
  LabeledBatch b{train_batch(task, task.train, rows, model.arch().input, &rng), {}};
  for (std::size_t r : rows) b.labels.push_back(task.train.labels[r]);

  double worst = 0.0;
  for (int which = 0; which < 3; ++which) {
    double total[3], slope = 0.0;
    for (int k = 0; k < 3; ++k) {
      LossWeights w;
      w.lambda1 = w.lambda2 = w.lambda3 = 0.0;
      double* lam[] = {&w.lambda1, &w.lambda2, &w.lambda3};
      *lam[which] = static_cast<double>(k);
      const LossBreakdown l = combined_loss(model, &snap, &d, b, w, 1);
      total[k] = l.total;
      if (k == 1) slope = which == 0 ? l.dist : which == 1 ? l.adv_f : l.fc;
    }
    worst = std::max({worst, std::abs((total[2] - total[1]) - (total[1] - total[0])),
                      std::abs((total[1] - total[0]) - slope)});
  }
  o.require(worst <= 1e-9, "collinearity deviation " + fmt("%.2e", worst));

  SequencePlan plan = make_plan(c);
  plan.schedule.max_epochs = 4;
  plan.schedule.post_plateau_epochs = 2;
  plan.weights.lambda1 = plan.weights.lambda3 = 0.0;
  plan.lambda2_override = 0.0;
  const SequenceStart start = prepare_sequence(seq, plan);
  ModelDecomposition ft_model, afa_model;
  TrainLog ft_log, afa_log;
  const SequenceResult ft = run_method(seq, plan, start, MethodName::finetune, &ft_model, &ft_log);
  const SequenceResult afa = run_method(seq, plan, start, MethodName::afa, &afa_model, &afa_log);
  const ParamGroup all[] = {ParamGroup::feature_extractor, ParamGroup::shared_classifier, ParamGroup::task_head};
  bool same_log = ft_log.epochs.size() == afa_log.epochs.size();
  for (std::size_t i = 0; same_log && i < ft_log.epochs.size(); ++i)
    same_log = ft_log.epochs[i].loss.total == afa_log.epochs[i].loss.total &&
               ft_log.epochs[i].val_accuracy == afa_log.epochs[i].val_accuracy;
  o.require(ft_model.parameter_hash(all) == afa_model.parameter_hash(all), "final parameters differ");
  o.require(same_log, "epoch logs differ");
  o.require(ft.accuracy == afa.accuracy, "accuracy matrices differ");
  if (o.pass)
    o.detail = "max collinearity deviation " + fmt("%.1e", worst) + "; lambda=(0,0,0) afa matches finetune bitwise over " +
               std::to_string(ft_log.epochs.size()) + " epochs";
  return o;
}

// ---------------------------------------------------------------- benchmarks

struct SeedRun {
  std::map<std::string, SequenceResult> by_method;
  double prepare_seconds = 0.0;
  std::map<std::string, double> method_seconds;
  double total_seconds = 0.0;
};

// Runs (or reuses) the benchmark for one seed under work/<name>/seed<s>.
SeedRun benchmark_seed(const fs::path& config_path, const std::vector<std::string>& methods, std::uint64_t seed,
                       const fs::path& work, std::ostream& log) {
  ExperimentConfig c = load_config(config_path);
  ConfigOverrides ov;
  ov.seed = seed;
  ov.methods = methods;
  ov.out_dir = work / ("seed" + std::to_string(seed));
  apply_overrides(c, ov);
  const std::string digest = c.digest();

  fs::path run_dir;
  if (fs::exists(c.out_dir)) {
    for (const auto& e : fs::directory_iterator(c.out_dir)) {
      if (!fs::exists(e.path() / "run_info.json") || !fs::exists(e.path() / "results.json")) continue;
      const json r = json::parse(slurp(e.path() / "results.json"));
      if (!r.at("results").empty() && r.at("results")[0].at("config_digest") == digest) run_dir = e.path();
    }
  }
  if (run_dir.empty()) {
    log << "running " << config_path.filename().string() << " seed " << seed << " (" << digest << ")\n" << std::flush;
    run_dir = execute_run(c, RunOptions{}, log);
  } else {
    log << "reusing " << run_dir.string() << "\n";
  }

  SeedRun out;
  for (auto& r : results_from_json(slurp(run_dir / "results.json"))) out.by_method[r.method] = r;
  const json info = json::parse(slurp(run_dir / "run_info.json"));
  out.prepare_seconds = info.at("prepare_seconds");
  for (const auto& [m, t] : info.at("methods").items()) out.method_seconds[m] = t;
  out.total_seconds = info.at("total_seconds");
  return out;
}

const std::vector<std::string> kTwoTaskMethods{"finetune", "lwf", "afa", "afa_adv", "afa_mmd", "joint"};
const std::vector<std::string> kFiveTaskMethods{"finetune", "lwf", "afa", "joint"};
constexpr std::uint64_t kSeeds[] = {1, 2, 3};

std::vector<SeedRun> two_task(const fs::path& configs, const fs::path& work, std::ostream& log) {
  std::vector<SeedRun> runs;
  for (auto s : kSeeds)
    runs.push_back(benchmark_seed(configs / "two_task_synthetic.yaml", kTwoTaskMethods, s, work / "two_task", log));
  return runs;
}

double old_drop(const SequenceResult& r) { return drop_vs_reference(r.at(2, 1), r.at(1, 1)); }

Outcome criterion6(const std::vector<SeedRun>& runs) {
  Outcome o;
  int lwf_between = 0;
  double seconds = 0.0;
  std::string summary;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& m = runs[i].by_method;
    const double ft = old_drop(m.at("finetune")), afa = old_drop(m.at("afa")), lwf = old_drop(m.at("lwf"));
    const double new_gap = drop_vs_reference(m.at("afa").at(2, 2), m.at("finetune").at(2, 2));
    const std::string seed = "seed " + std::to_string(kSeeds[i]);
    o.require(std::abs(afa) < std::abs(ft), seed + ": |drop afa| " + fmt("%.2f", afa) + " vs finetune " + fmt("%.2f", ft));
    o.require(new_gap >= -1.0, seed + ": afa new-task gap " + fmt("%.2f pp", new_gap));
    if (std::abs(afa) <= std::abs(lwf) && std::abs(lwf) <= std::abs(ft)) ++lwf_between;
    summary += (summary.empty() ? "" : "; ") + seed + " drop afa " + fmt("%.2f", afa) + " lwf " + fmt("%.2f", lwf) +
               " ft " + fmt("%.2f", ft) + " new " + fmt("%+.2f", new_gap);
    seconds += runs[i].prepare_seconds;
    for (const char* method : {"finetune", "lwf", "afa", "joint"}) seconds += runs[i].method_seconds.at(method);
  }
  o.require(lwf_between >= 2, "lwf between afa and finetune in " + std::to_string(lwf_between) + "/3 seeds");
  o.require(seconds < 600.0, "runtime " + fmt("%.0f s", seconds));
  if (o.pass)
    o.detail = summary + "; lwf between in " + std::to_string(lwf_between) + "/3; " + fmt("%.0f s", seconds);
  else
    o.detail += " [" + summary + "]";
  return o;
}

Outcome criterion8(const std::vector<SeedRun>& runs) {
  Outcome o;
  std::string summary;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& m = runs[i].by_method;
    const double ft = old_drop(m.at("finetune")), afa = old_drop(m.at("afa"));
    const double adv = old_drop(m.at("afa_adv")), mmd = old_drop(m.at("afa_mmd"));
    const std::string seed = "seed " + std::to_string(kSeeds[i]);
    o.require(std::abs(adv) < std::abs(ft), seed + ": afa_adv " + fmt("%.2f", adv) + " vs finetune " + fmt("%.2f", ft));
    o.require(std::abs(mmd) < std::abs(ft), seed + ": afa_mmd " + fmt("%.2f", mmd) + " vs finetune " + fmt("%.2f", ft));
    o.require(std::abs(afa) <= std::max(std::abs(adv), std::abs(mmd)),
              seed + ": afa " + fmt("%.2f", afa) + " vs worse ablation " + fmt("%.2f", -std::max(std::abs(adv), std::abs(mmd))));
    summary += (summary.empty() ? "" : "; ") + seed + " drop afa " + fmt("%.2f", afa) + " adv " + fmt("%.2f", adv) +
               " mmd " + fmt("%.2f", mmd) + " ft " + fmt("%.2f", ft);
  }
  if (o.pass)
    o.detail = summary;
  else
    o.detail += " [" + summary + "]";
  return o;
}

Outcome criterion7(const fs::path& configs, const fs::path& work, std::ostream& log) {
  Outcome o;
  int joint_best = 0;
  double seconds = 0.0;
  std::string summary;
  for (auto s : kSeeds) {
    const SeedRun run = benchmark_seed(configs / "five_task_synthetic.yaml", kFiveTaskMethods, s, work / "five_task", log);
    const auto& m = run.by_method;
    const int n = m.at("afa").task_count();
    const double ft = avg_forgetting(m.at("finetune"), n), afa = avg_forgetting(m.at("afa"), n);
    const std::string seed = "seed " + std::to_string(s);
    o.require(std::abs(afa) < std::abs(ft), seed + ": forgetting afa " + fmt("%.2f", afa) + " vs finetune " + fmt("%.2f", ft));
    const double joint = m.at("joint").final_average();
    bool best = true;
    for (const auto& [name, r] : m)
      if (name != "joint" && r.final_average() > joint) best = false;
    joint_best += best;
    summary += (summary.empty() ? "" : "; ") + seed + " forgetting afa " + fmt("%.2f", afa) + " ft " + fmt("%.2f", ft) +
               " final avg joint " + fmt("%.2f", 100 * joint) + " afa " + fmt("%.2f", 100 * m.at("afa").final_average()) +
               " ft " + fmt("%.2f", 100 * m.at("finetune").final_average());
    seconds += run.total_seconds;
  }
  o.require(joint_best >= 2, "joint highest final average in " + std::to_string(joint_best) + "/3 seeds");
  o.require(seconds < 1500.0, "runtime " + fmt("%.0f s", seconds));
  if (o.pass)
    o.detail = summary + "; joint best in " + std::to_string(joint_best) + "/3; " + fmt("%.0f s", seconds);
  else
    o.detail += " [" + summary + "]";
  return o;
}

// ---------------------------------------------------------------- reproducibility

Outcome criterion9(const fs::path& configs, const fs::path& work, std::ostream& log) {
  Outcome o;
  ExperimentConfig c = load_config(configs / "two_task_synthetic.yaml");
  c.seed = 9;
  c.data.synthetic.train_per_class = 60;
  c.data.synthetic.test_per_class = 20;
  c.schedule.max_epochs = 3;
  c.schedule.post_plateau_epochs = 1;
  c.methods = {MethodName::finetune, MethodName::lwf, MethodName::afa, MethodName::afa_adv, MethodName::afa_mmd,
               MethodName::joint};
  c.out_dir = work / "reproducibility";
  fs::remove_all(c.out_dir);
  const fs::path a = execute_run(c, RunOptions{}, log);
  RunOptions parallel;
  parallel.parallel_methods = 3;
  const fs::path b = execute_run(c, parallel, log);
  json ja = json::parse(slurp(a / "results.json")), jb = json::parse(slurp(b / "results.json"));
  const auto ra = results_from_json(slurp(a / "results.json")), rb = results_from_json(slurp(b / "results.json"));
  bool matrices = ra.size() == rb.size() && ra.size() == c.methods.size();
  for (std::size_t i = 0; matrices && i < ra.size(); ++i) matrices = ra[i].accuracy == rb[i].accuracy;
  o.require(matrices, "accuracy matrices differ");
  ja.erase("timestamp");
  jb.erase("timestamp");
  o.require(ja.dump(2) == jb.dump(2), "results.json differs beyond the timestamp");
  std::string ta = slurp(a / "results.json"), tb = slurp(b / "results.json");
  const auto strip = [](std::string s) {
    const auto p = s.find("\"timestamp\"");
    if (p != std::string::npos) s.erase(p, s.find('\n', p) - p);
    return s;
  };
  o.require(strip(ta) == strip(tb), "results.json bytes differ beyond the timestamp line");
  if (o.pass) o.detail = std::to_string(ra.size()) + " methods, sequential vs 3 worker processes, byte-identical modulo timestamp";
  return o;
}

// ---------------------------------------------------------------- metric fidelity

Outcome criterion10() {
  Outcome o;
  const std::string a = format_delta(drop_vs_reference(0.5471, 0.5511));
  const std::string b = format_delta(drop_vs_reference(0.6388, 0.6279));
  o.require(a == "-0.40", "(54.71, 55.11) rendered " + a);
  o.require(b == "+1.09", "(63.88, 62.79) rendered " + b);
  if (o.pass) o.detail = "(54.71, 55.11) -> " + a + ", (63.88, 62.79) -> " + b;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> selected;
  std::string configs = AFA_CONFIG_DIR;
  std::string work = "acceptance_work";
  bool prepare_two_task = false;
  app.add_option("-c,--criteria", selected, "Criteria to check (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--configs", configs, "Directory holding the bundled configs");
  app.add_option("--work", work, "Directory for benchmark runs (reused across invocations)");
  app.add_flag("--prepare-two-task", prepare_two_task, "Only run the shared two-task benchmark");
  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare_two_task) {
      two_task(configs, work, std::cerr);
      return 0;
    }
    if (selected.empty())
      for (int i = 1; i <= 10; ++i) selected.push_back(i);
    const std::set<int> want(selected.begin(), selected.end());

    std::optional<std::vector<SeedRun>> two;
    auto two_runs = [&]() -> const std::vector<SeedRun>& {
      if (!two) two = two_task(configs, work, std::cerr);
      return *two;
    };

    bool all = true;
    for (int c : want) {
      Outcome o;
      try {
        switch (c) {
          case 1: o = criterion1(); break;
          case 2: o = criterion2(); break;
          case 3: o = criterion3(); break;
          case 4: o = criterion4(configs); break;
          case 5: o = criterion5(configs); break;
          case 6: o = criterion6(two_runs()); break;
          case 7: o = criterion7(configs, work, std::cerr); break;
          case 8: o = criterion8(two_runs()); break;
          case 9: o = criterion9(configs, work, std::cerr); break;
          case 10: o = criterion10(); break;
        }
      } catch (const std::exception& e) {
        o.pass = false;
        o.detail = std::string("error: ") + e.what();
      }
      all = all && o.pass;
      std::cout << "criterion " << c << ": " << (o.pass ? "PASS" : "FAIL") << " (" << o.detail << ")\n" << std::flush;
    }
    return all ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "acceptance: " << e.what() << '\n';
    return 2;
  }
}
