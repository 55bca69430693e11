#include "afa/experiment.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "afa/checkpoint.hpp"
#include "afa/metrics.hpp"
#include "json.hpp"

namespace afa {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------- parsing

class YamlReader {
 public:
  explicit YamlReader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const YAML::Mark& mark, const std::string& message) const {
    if (mark.is_null()) throw ConfigError(source_ + ": " + message);
    throw ConfigError(source_ + ":" + std::to_string(mark.line + 1) + ":" + std::to_string(mark.column + 1) + ": " +
                      message);
  }
  [[noreturn]] void fail(const YAML::Node& node, const std::string& message) const { fail(node.Mark(), message); }

  void require_map(const YAML::Node& node, const std::string& what) const {
    if (!node.IsMap()) fail(node, what + " must be a mapping");
  }

  void check_keys(const YAML::Node& map, std::initializer_list<std::string_view> allowed, const std::string& what) const {
    require_map(map, what);
    std::set<std::string> seen;
    for (const auto& kv : map) {
      const auto key = kv.first.as<std::string>();
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
        fail(kv.first, "unknown key '" + key + "' in " + what);
      if (!seen.insert(key).second) fail(kv.first, "duplicate key '" + key + "' in " + what);
    }
  }

  template <typename T>
  T scalar(const YAML::Node& node, const std::string& what, const char* type) const {
    if (!node.IsScalar()) fail(node, what + " must be " + type);
    try {
      return node.as<T>();
    } catch (const YAML::Exception&) {
      fail(node, what + " must be " + type);
    }
  }

  int integer(const YAML::Node& n, const std::string& what, int min) const {
    const int v = scalar<int>(n, what, "an integer");
    if (v < min) fail(n, what + " must be at least " + std::to_string(min));
    return v;
  }
  double number(const YAML::Node& n, const std::string& what) const {
    const double v = scalar<double>(n, what, "a number");
    if (!std::isfinite(v)) fail(n, what + " must be finite");
    return v;
  }
  double non_negative(const YAML::Node& n, const std::string& what) const {
    const double v = number(n, what);
    if (v < 0.0) fail(n, what + " must be non-negative");
    return v;
  }
  double positive(const YAML::Node& n, const std::string& what) const {
    const double v = number(n, what);
    if (!(v > 0.0)) fail(n, what + " must be positive");
    return v;
  }
  double fraction(const YAML::Node& n, const std::string& what) const {
    const double v = number(n, what);
    if (v < 0.0 || v >= 1.0) fail(n, what + " must lie in [0, 1)");
    return v;
  }
  bool boolean(const YAML::Node& n, const std::string& what) const { return scalar<bool>(n, what, "true or false"); }
  std::string text(const YAML::Node& n, const std::string& what) const {
    return scalar<std::string>(n, what, "a string");
  }
  std::uint64_t seed(const YAML::Node& n) const {
    const std::string s = text(n, "seed");
    if (s.empty() || s.size() > 20 || s.find_first_not_of("0123456789") != std::string::npos)
      fail(n, "seed must be a non-negative integer");
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      fail(n, "seed is out of range");
    }
  }

  template <typename E>
  E choice(const YAML::Node& n, const std::string& what, std::initializer_list<std::pair<std::string_view, E>> options) const {
    const std::string s = text(n, what);
    std::string names;
    for (const auto& [name, value] : options) {
      if (s == name) return value;
      names += (names.empty() ? "" : ", ") + std::string(name);
    }
    fail(n, "unknown " + what + " '" + s + "' (expected one of " + names + ")");
  }

 private:
  std::string source_;
};

fs::path resolve_data_path(const std::string& raw, const fs::path& base_dir) {
  fs::path p(raw);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("AFA_DATA_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / p;
  return base_dir / p;
}

void parse_data(const YamlReader& r, const YAML::Node& node, DataConfig& data, const fs::path& base_dir) {
  r.check_keys(node, {"source", "synthetic", "directory", "manifest", "val_fraction"}, "data");
  if (node["source"])
    data.kind = r.choice<DataKind>(node["source"], "data source",
                                   {{"synthetic", DataKind::synthetic}, {"directory", DataKind::directory}});
  if (const auto s = node["synthetic"]) {
    r.check_keys(s, {"kind", "classes", "train_per_class", "test_per_class", "image_size", "noise", "jitter"},
                 "data.synthetic");
    auto& sp = data.synthetic;
    if (s["kind"])
      sp.kind = r.choice<SyntheticKind>(s["kind"], "synthetic kind",
                                        {{"blobs", SyntheticKind::blobs},
                                         {"textures", SyntheticKind::textures},
                                         {"mixed", SyntheticKind::mixed}});
    if (s["classes"]) sp.classes = r.integer(s["classes"], "classes", 2);
    if (s["train_per_class"]) sp.train_per_class = r.integer(s["train_per_class"], "train_per_class", 2);
    if (s["test_per_class"]) sp.test_per_class = r.integer(s["test_per_class"], "test_per_class", 1);
    if (s["image_size"]) sp.image_size = r.integer(s["image_size"], "image_size", 4);
    if (s["noise"]) sp.noise = r.non_negative(s["noise"], "noise");
    if (s["jitter"]) sp.jitter = r.non_negative(s["jitter"], "jitter");
  }
  if (const auto d = node["directory"]) {
    r.check_keys(d, {"root", "image_size", "test_fraction"}, "data.directory");
    if (d["root"]) data.directory.root = resolve_data_path(r.text(d["root"], "root"), base_dir);
    if (d["image_size"]) data.directory.image_size = r.integer(d["image_size"], "image_size", 4);
    if (d["test_fraction"]) {
      data.directory.test_fraction = r.fraction(d["test_fraction"], "test_fraction");
      if (data.directory.test_fraction <= 0.0) r.fail(d["test_fraction"], "test_fraction must be positive");
    }
  }
  if (node["manifest"]) data.manifest = resolve_data_path(r.text(node["manifest"], "manifest"), base_dir);
  if (node["val_fraction"]) data.val_fraction = r.fraction(node["val_fraction"], "val_fraction");
  if (data.kind == DataKind::directory && data.directory.root.empty()) {
    if (const char* root = std::getenv("AFA_DATA_ROOT"); root != nullptr && *root != '\0') {
      data.directory.root = root;
    } else {
      r.fail(node, "directory data needs data.directory.root or AFA_DATA_ROOT");
    }
  }
}

void parse_model(const YamlReader& r, const YAML::Node& node, ArchConfig& arch, int default_size) {
  r.check_keys(node, {"input_size", "channels", "dropout", "layers", "attention_capture", "semantic_capture"}, "model");
  const int size = node["input_size"] ? r.integer(node["input_size"], "input_size", 4) : default_size;
  const int channels = node["channels"] ? r.integer(node["channels"], "channels", 1) : 3;
  const double dropout = node["dropout"] ? r.fraction(node["dropout"], "dropout") : 0.5;
  arch = ArchConfig::desk_default({channels, size, size}, dropout);
  if (const auto layers = node["layers"]) {
    if (!layers.IsSequence() || layers.size() == 0) r.fail(layers, "model.layers must be a non-empty list");
    arch.layers.clear();
    for (const auto& l : layers) {
      r.check_keys(l, {"type", "width", "kernel", "pool", "dropout"}, "a layer entry");
      if (!l["type"] || !l["width"]) r.fail(l, "each layer needs 'type' and 'width'");
      LayerSpec spec;
      spec.kind = r.choice<LayerKind>(l["type"], "layer type", {{"conv", LayerKind::conv}, {"fc", LayerKind::fc}});
      spec.width = r.integer(l["width"], "width", 1);
      if (spec.kind == LayerKind::conv) {
        spec.kernel = l["kernel"] ? r.integer(l["kernel"], "kernel", 1) : 3;
        spec.pool = l["pool"] ? r.boolean(l["pool"], "pool") : false;
        if (l["dropout"]) r.fail(l["dropout"], "dropout applies to fc layers only");
      } else {
        spec.kernel = 0;
        spec.dropout = l["dropout"] ? r.fraction(l["dropout"], "dropout") : dropout;
        if (l["kernel"] || l["pool"]) r.fail(l, "kernel and pool apply to conv layers only");
      }
      arch.layers.push_back(spec);
    }
  }
  if (node["attention_capture"]) arch.attention_capture = r.integer(node["attention_capture"], "attention_capture", -1);
  if (node["semantic_capture"]) arch.semantic_capture = r.integer(node["semantic_capture"], "semantic_capture", -1);
  try {
    arch.validate();
  } catch (const ConfigError& e) {
    r.fail(node, e.what());
  } catch (const ValidationError& e) {
    r.fail(node, e.what());
  }
}

void parse_loss(const YamlReader& r, const YAML::Node& node, ExperimentConfig& c) {
  r.check_keys(node, {"lambda1", "lambda2", "lambda3", "logit", "conv", "fc", "temperature"}, "loss");
  auto& w = c.weights;
  if (node["lambda1"]) w.lambda1 = r.non_negative(node["lambda1"], "lambda1");
  if (node["lambda2"]) c.lambda2 = r.non_negative(node["lambda2"], "lambda2");
  if (node["lambda3"]) w.lambda3 = r.non_negative(node["lambda3"], "lambda3");
  if (node["logit"])
    w.logit_variant = r.choice<LogitVariant>(node["logit"], "logit loss", {{"kd", LogitVariant::kd}, {"l2", LogitVariant::l2}});
  if (node["conv"])
    w.conv_variant = r.choice<ConvVariant>(
        node["conv"], "conv loss", {{"adversarial", ConvVariant::adversarial}, {"l2", ConvVariant::l2}, {"off", ConvVariant::off}});
  if (node["fc"])
    w.fc_variant = r.choice<FcVariant>(node["fc"], "fc loss", {{"mmd", FcVariant::mmd}, {"l2", FcVariant::l2}, {"off", FcVariant::off}});
  if (node["temperature"]) w.temperature = r.positive(node["temperature"], "temperature");
}

void parse_schedule(const YamlReader& r, const YAML::Node& node, TrainSchedule& s) {
  r.check_keys(node,
               {"warmup_epochs", "base_lr", "warmup_lr", "momentum", "batch_size", "plateau_patience",
                "plateau_min_delta", "post_plateau_epochs", "max_epochs", "lr_decay", "augment",
                "discriminator_hidden", "discriminator_lr", "joint_balance"},
               "schedule");
  if (node["warmup_epochs"]) s.warmup_epochs = r.integer(node["warmup_epochs"], "warmup_epochs", 0);
  if (node["base_lr"]) s.base_lr = r.positive(node["base_lr"], "base_lr");
  if (node["warmup_lr"]) s.warmup_lr = r.positive(node["warmup_lr"], "warmup_lr");
  if (node["momentum"]) s.momentum = r.fraction(node["momentum"], "momentum");
  if (node["batch_size"]) s.batch_size = r.integer(node["batch_size"], "batch_size", 1);
  if (node["plateau_patience"]) s.plateau_patience = r.integer(node["plateau_patience"], "plateau_patience", 1);
  if (node["plateau_min_delta"]) s.plateau_min_delta = r.non_negative(node["plateau_min_delta"], "plateau_min_delta");
  if (node["post_plateau_epochs"]) s.post_plateau_epochs = r.integer(node["post_plateau_epochs"], "post_plateau_epochs", 0);
  if (node["max_epochs"]) s.max_epochs = r.integer(node["max_epochs"], "max_epochs", 1);
  if (node["lr_decay"]) {
    s.lr_decay = r.positive(node["lr_decay"], "lr_decay");
    if (s.lr_decay > 1.0) r.fail(node["lr_decay"], "lr_decay must not exceed 1");
  }
  if (node["augment"]) s.augment = r.boolean(node["augment"], "augment");
  if (node["discriminator_hidden"]) s.discriminator_hidden = r.integer(node["discriminator_hidden"], "discriminator_hidden", 1);
  if (node["discriminator_lr"]) s.discriminator_lr = r.positive(node["discriminator_lr"], "discriminator_lr");
  if (node["joint_balance"])
    s.joint_balance = r.choice<JointBalance>(node["joint_balance"], "joint_balance",
                                             {{"round_robin", JointBalance::round_robin}, {"pooled", JointBalance::pooled}});
}

std::vector<MethodName> methods_from_names(const std::vector<std::string>& names) {
  std::vector<MethodName> out;
  for (const auto& n : names) {
    const MethodName m = parse_method(n);
    if (std::find(out.begin(), out.end(), m) != out.end()) throw ConfigError("method '" + n + "' listed twice");
    out.push_back(m);
  }
  if (out.empty()) throw ConfigError("at least one method is required");
  return out;
}

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const char* name_of(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::blobs: return "blobs";
    case SyntheticKind::textures: return "textures";
    case SyntheticKind::mixed: return "mixed";
  }
  return "mixed";
}
const char* name_of(LogitVariant v) { return v == LogitVariant::kd ? "kd" : "l2"; }
const char* name_of(ConvVariant v) {
  return v == ConvVariant::adversarial ? "adversarial" : v == ConvVariant::l2 ? "l2" : "off";
}
const char* name_of(FcVariant v) { return v == FcVariant::mmd ? "mmd" : v == FcVariant::l2 ? "l2" : "off"; }

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& source_name, const fs::path& base_dir) {
  YamlReader r(source_name);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    r.fail(e.mark, e.msg);
  }
  if (!root || root.IsNull()) r.fail(YAML::Mark::null_mark(), "empty configuration");
  r.check_keys(root, {"seed", "out_dir", "n_tasks", "data", "model", "methods", "loss", "schedule"}, "the configuration");

  ExperimentConfig c;
  if (root["seed"]) c.seed = r.seed(root["seed"]);
  if (root["out_dir"]) c.out_dir = r.text(root["out_dir"], "out_dir");
  if (root["n_tasks"]) c.n_tasks = r.integer(root["n_tasks"], "n_tasks", 2);
  if (root["data"]) parse_data(r, root["data"], c.data, base_dir);
  const int input_size =
      c.data.kind == DataKind::synthetic ? c.data.synthetic.image_size : c.data.directory.image_size;
  c.arch = ArchConfig::desk_default({3, input_size, input_size});
  if (root["model"]) parse_model(r, root["model"], c.arch, input_size);
  if (const auto m = root["methods"]) {
    if (!m.IsSequence() || m.size() == 0) r.fail(m, "methods must be a non-empty list");
    std::vector<std::string> names;
    for (const auto& n : m) names.push_back(r.text(n, "method"));
    try {
      c.methods = methods_from_names(names);
    } catch (const ConfigError& e) {
      r.fail(m, e.what());
    }
  }
  if (root["loss"]) parse_loss(r, root["loss"], c);
  if (root["schedule"]) parse_schedule(r, root["schedule"], c.schedule);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(root, e.what());
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot read configuration file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string(), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

ExperimentConfig config_from_canonical_json(const std::string& text) {
  return parse_config(text, "<recorded config>", ".");
}

void ExperimentConfig::validate() const {
  if (n_tasks < 2) throw ConfigError("n_tasks must be at least 2");
  if (methods.empty()) throw ConfigError("at least one method is required");
  weights.validate();
  if (lambda2 && (!(*lambda2 >= 0.0) || !std::isfinite(*lambda2))) throw ConfigError("lambda2 must be non-negative");
  schedule.validate();
  arch.validate();
  const int image = data.kind == DataKind::synthetic ? data.synthetic.image_size : data.directory.image_size;
  if (arch.input.height > image + 2 || arch.input.width > image + 2)
    throw ConfigError("model input is larger than the stored images");
  if (data.kind == DataKind::synthetic && data.synthetic.classes < 2 * n_tasks)
    throw ConfigError("the synthetic source needs at least two classes per task");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

std::string ExperimentConfig::canonical_json() const {
  ordered_json j;
  j["seed"] = std::to_string(seed);
  j["out_dir"] = out_dir.string();
  j["n_tasks"] = n_tasks;
  ordered_json d;
  d["source"] = data.kind == DataKind::synthetic ? "synthetic" : "directory";
  if (data.kind == DataKind::synthetic) {
    const auto& s = data.synthetic;
    d["synthetic"] = {{"kind", name_of(s.kind)},       {"classes", s.classes},
                      {"train_per_class", s.train_per_class}, {"test_per_class", s.test_per_class},
                      {"image_size", s.image_size},    {"noise", s.noise},
                      {"jitter", s.jitter}};
  } else {
    d["directory"] = {{"root", data.directory.root.string()},
                      {"image_size", data.directory.image_size},
                      {"test_fraction", data.directory.test_fraction}};
  }
  if (data.manifest) d["manifest"] = data.manifest->string();
  d["val_fraction"] = data.val_fraction;
  j["data"] = d;

  ordered_json m;
  m["input_size"] = arch.input.height;
  m["channels"] = arch.input.channels;
  m["layers"] = ordered_json::array();
  for (const auto& l : arch.layers) {
    if (l.kind == LayerKind::conv) {
      m["layers"].push_back({{"type", "conv"}, {"width", l.width}, {"kernel", l.kernel}, {"pool", l.pool}});
    } else {
      m["layers"].push_back({{"type", "fc"}, {"width", l.width}, {"dropout", l.dropout}});
    }
  }
  m["attention_capture"] = arch.attention_capture;
  m["semantic_capture"] = arch.semantic_capture;
  j["model"] = m;

  j["methods"] = ordered_json::array();
  for (MethodName n : methods) j["methods"].push_back(to_string(n));
  ordered_json l;
  l["lambda1"] = weights.lambda1;
  if (lambda2) l["lambda2"] = *lambda2;
  l["lambda3"] = weights.lambda3;
  l["logit"] = name_of(weights.logit_variant);
  l["conv"] = name_of(weights.conv_variant);
  l["fc"] = name_of(weights.fc_variant);
  l["temperature"] = weights.temperature;
  j["loss"] = l;

  const auto& s = schedule;
  j["schedule"] = {{"warmup_epochs", s.warmup_epochs},
                   {"base_lr", s.base_lr},
                   {"warmup_lr", s.warmup_lr},
                   {"momentum", s.momentum},
                   {"batch_size", s.batch_size},
                   {"plateau_patience", s.plateau_patience},
                   {"plateau_min_delta", s.plateau_min_delta},
                   {"post_plateau_epochs", s.post_plateau_epochs},
                   {"max_epochs", s.max_epochs},
                   {"lr_decay", s.lr_decay},
                   {"augment", s.augment},
                   {"discriminator_hidden", s.discriminator_hidden},
                   {"discriminator_lr", s.discriminator_lr},
                   {"joint_balance", s.joint_balance == JointBalance::pooled ? "pooled" : "round_robin"}};
  return j.dump();
}

std::string ExperimentConfig::digest() const { return fnv_hex(canonical_json()); }

void apply_overrides(ExperimentConfig& c, const ConfigOverrides& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (o.methods) c.methods = methods_from_names(*o.methods);
  if (o.lambda1) c.weights.lambda1 = *o.lambda1;
  if (o.lambda2) c.lambda2 = *o.lambda2;
  if (o.lambda3) c.weights.lambda3 = *o.lambda3;
  if (o.epochs_scale) {
    const double k = *o.epochs_scale;
    if (!(k > 0.0) || !std::isfinite(k)) throw ConfigError("--epochs-scale must be positive");
    auto scale = [k](int v, int floor) { return std::max(floor, static_cast<int>(std::lround(v * k))); };
    auto& s = c.schedule;
    s.warmup_epochs = scale(s.warmup_epochs, 0);
    s.plateau_patience = scale(s.plateau_patience, 1);
    s.post_plateau_epochs = scale(s.post_plateau_epochs, 0);
    s.max_epochs = scale(s.max_epochs, 1);
  }
  c.validate();
}

TaskSequence build_task_sequence(const ExperimentConfig& c) {
  DataSource source = c.data.kind == DataKind::synthetic ? make_synthetic(c.data.synthetic, c.seed)
                                                         : load_image_directory(c.data.directory, c.seed);
  SequenceOptions opts;
  opts.val_fraction = c.data.val_fraction;
  if (c.data.manifest) opts.class_groups = load_task_manifest(*c.data.manifest);
  return build_sequence(source, c.n_tasks, c.seed, opts);
}

SequencePlan make_plan(const ExperimentConfig& c) {
  SequencePlan plan;
  plan.arch = c.arch;
  plan.schedule = c.schedule;
  plan.weights = c.weights;
  plan.lambda2_override = c.lambda2;
  plan.methods = c.methods;
  plan.seed = c.seed;
  plan.config_digest = c.digest();
  return plan;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------- running

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ordered_json epoch_json(const EpochRecord& r) {
  return {{"phase", r.phase},     {"method", r.method},   {"task", r.task},
          {"epoch", r.epoch},     {"lr", r.lr},           {"loss", r.loss.total},
          {"loss_cls", r.loss.cls}, {"loss_dist", r.loss.dist}, {"loss_adv_f", r.loss.adv_f},
          {"loss_fc", r.loss.fc}, {"loss_adv_d", r.loss.adv_d}, {"val_accuracy", r.val_accuracy},
          {"lr_decayed", r.lr_decayed}, {"discriminator_accuracy", r.discriminator_accuracy},
          {"attention_gap", r.attention_gap}};
}

std::string stamp_for_path(const std::string& iso) {
  std::string s;
  for (char c : iso)
    if (c != '-' && c != ':') s += c;
  return s;
}

fs::path method_dir(const fs::path& run_dir, const std::string& method, std::uint64_t seed) {
  return run_dir / (method + "-seed" + std::to_string(seed));
}

EpochCallback progress(std::ostream& log, bool verbose) {
  if (!verbose) return {};
  return [&log](const EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "[%s/%s] task %d epoch %d lr %.4g loss %.4f val %.4f%s\n", r.phase.c_str(),
                  r.method.c_str(), r.task, r.epoch, r.lr, r.loss.total, r.val_accuracy, r.lr_decayed ? " (decay)" : "");
    log << buf << std::flush;
  };
}

// Trains one method from the shared start and persists its artifacts.
void run_and_store(const TaskSequence& seq, const SequencePlan& plan, const SequenceStart& start, MethodName method,
                   const ExperimentConfig& config, const fs::path& run_dir, const std::string& timestamp,
                   const EpochCallback& cb) {
  const std::string name = to_string(method);
  const fs::path dir = method_dir(run_dir, name, config.seed);
  fs::create_directories(dir);
  ModelDecomposition model;
  TrainLog log = start.log;
  const SequenceResult result = run_method(seq, plan, start, method, &model, &log, cb);

  std::ostringstream jsonl;
  for (const auto& e : log.epochs) jsonl << epoch_json(e).dump() << '\n';
  write_file(dir / "train_log.jsonl", jsonl.str());

  const SequenceResult one[] = {result};
  write_file(dir / "result.json", results_to_json(one, timestamp));
  write_file(dir / "timing.json", ordered_json{{"elapsed_seconds", result.elapsed_seconds}}.dump() + "\n");

  ordered_json meta;
  meta["method"] = name;
  meta["seed"] = std::to_string(config.seed);
  meta["config_digest"] = plan.config_digest;
  meta["config"] = ordered_json::parse(config.canonical_json());
  save_checkpoint(dir / "checkpoint.bin", Checkpoint{model, std::nullopt, meta.dump()});
}

}  // namespace

fs::path execute_run(const ExperimentConfig& config, const RunOptions& options, std::ostream& log) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::string timestamp = options.timestamp.empty() ? utc_timestamp() : options.timestamp;
  const TaskSequence seq = build_task_sequence(config);
  const SequencePlan plan = make_plan(config);

  const std::string base = "afa-seed" + std::to_string(config.seed) + "-" + stamp_for_path(timestamp);
  fs::path run_dir = config.out_dir / base;
  for (int k = 1; fs::exists(run_dir); ++k) run_dir = config.out_dir / (base + "-" + std::to_string(k));
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run directory " + run_dir.string() + ": " + ec.message());
  write_file(run_dir / "config.json", ordered_json::parse(config.canonical_json()).dump(2) + "\n");

  const EpochCallback cb = progress(log, options.verbose);
  const SequenceStart start = prepare_sequence(seq, plan, cb);
  const double prepare_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const int workers = std::clamp(options.parallel_methods, 1, static_cast<int>(config.methods.size()));
  if (workers == 1) {
    for (MethodName m : config.methods) run_and_store(seq, plan, start, m, config, run_dir, timestamp, cb);
  } else {
    log.flush();
    std::vector<pid_t> children;
    for (int w = 0; w < workers; ++w) {
      const pid_t pid = fork();
      if (pid < 0) throw IoError("fork failed");
      if (pid == 0) {
        int code = kExitOk;
        try {
          for (std::size_t i = static_cast<std::size_t>(w); i < config.methods.size(); i += static_cast<std::size_t>(workers))
            run_and_store(seq, plan, start, config.methods[i], config, run_dir, timestamp, cb);
        } catch (const DivergenceError& e) {
          log << "error: " << e.what() << '\n' << std::flush;
          code = kExitDiverged;
        } catch (const std::exception& e) {
          log << "error: " << e.what() << '\n' << std::flush;
          code = kExitFailure;
        }
        std::_Exit(code);
      }
      children.push_back(pid);
    }
    int worst = kExitOk;
    for (pid_t pid : children) {
      int status = 0;
      waitpid(pid, &status, 0);
      const int code = WIFEXITED(status) ? WEXITSTATUS(status) : kExitFailure;
      if (code == kExitDiverged || (worst == kExitOk && code != kExitOk)) worst = code;
    }
    if (worst == kExitDiverged) throw DivergenceError("a worker process diverged");
    if (worst != kExitOk) throw IoError("a worker process failed");
  }

  std::vector<SequenceResult> results;
  ordered_json timing;
  timing["timestamp"] = timestamp;
  timing["prepare_seconds"] = prepare_seconds;
  for (MethodName m : config.methods) {
    const fs::path dir = method_dir(run_dir, to_string(m), config.seed);
    auto parsed = results_from_json(read_file(dir / "result.json"));
    results.push_back(std::move(parsed.at(0)));
    timing["methods"][to_string(m)] = ordered_json::parse(read_file(dir / "timing.json")).at("elapsed_seconds");
  }
  timing["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  emit_report(results, run_dir, ReportOptions{timestamp, true});
  write_file(run_dir / "run_info.json", timing.dump(2) + "\n");
  return run_dir;
}

int cmd_run(const fs::path& config_path, const ConfigOverrides& overrides, const RunOptions& options,
            std::ostream& out, std::ostream& err) {
  ExperimentConfig config;
  try {
    config = load_config(config_path);
    apply_overrides(config, overrides);
  } catch (const ConfigError& e) {
    err << "invalid configuration: " << e.what() << '\n';
    return kExitInvalidConfig;
  }
  out << "config digest: " << config.digest() << '\n' << std::flush;
  try {
    const fs::path dir = execute_run(config, options, err);
    out << "results: " << (dir / "results.json").string() << '\n';
    out << read_file(dir / "comparison.csv");
    return kExitOk;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const ConfigError& e) {
    err << "invalid configuration: " << e.what() << '\n';
    return kExitInvalidConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

int cmd_eval(const fs::path& checkpoint_path, const std::optional<fs::path>& data_config, std::ostream& out,
             std::ostream& err) {
  Checkpoint ckpt;
  ordered_json meta;
  try {
    ckpt = load_checkpoint(checkpoint_path);
    meta = ordered_json::parse(ckpt.metadata_json);
  } catch (const std::exception& e) {
    err << "cannot load checkpoint: " << e.what() << '\n';
    return kExitBadCheckpoint;
  }
  ExperimentConfig config;
  try {
    if (data_config) {
      config = load_config(*data_config);
    } else if (meta.contains("config")) {
      config = config_from_canonical_json(meta.at("config").dump());
    } else {
      err << "checkpoint records no data configuration; pass --data\n";
      return kExitInvalidConfig;
    }
  } catch (const ConfigError& e) {
    err << "invalid configuration: " << e.what() << '\n';
    return kExitInvalidConfig;
  }
  try {
    const TaskSequence seq = build_task_sequence(config);
    const int heads = ckpt.model.head_count();
    if (heads > static_cast<int>(seq.tasks.size())) {
      err << "checkpoint has " << heads << " heads but the data defines " << seq.tasks.size() << " tasks\n";
      return kExitInvalidConfig;
    }
    ordered_json j;
    j["method"] = meta.value("method", "");
    j["seed"] = meta.value("seed", "");
    j["config_digest"] = meta.value("config_digest", "");
    j["accuracies"] = ordered_json::array();
    for (int t = 0; t < heads; ++t) {
      const auto& task = seq.tasks[static_cast<std::size_t>(t)];
      if (task.class_count != ckpt.model.head_classes(t)) {
        err << "head " << t << " has " << ckpt.model.head_classes(t) << " classes but task " << t + 1 << " has "
            << task.class_count << '\n';
        return kExitInvalidConfig;
      }
      j["accuracies"].push_back({{"task", t + 1}, {"accuracy", evaluate(ckpt.model, task, t)}});
    }
    out << j.dump() << '\n';
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

int cmd_plot(const fs::path& results_dir, const std::optional<fs::path>& out_dir, std::ostream& out,
             std::ostream& err) {
  const fs::path file = results_dir / "results.json";
  std::vector<SequenceResult> results;
  try {
    results = results_from_json(read_file(file));
  } catch (const std::exception& e) {
    err << "no usable results in " << results_dir.string() << ": " << e.what() << '\n';
    return kExitInvalidConfig;
  }
  if (results.empty()) {
    err << "no results in " << file.string() << '\n';
    return kExitInvalidConfig;
  }
  try {
    const fs::path target = out_dir.value_or(results_dir);
    emit_plot_data(results, target);
    for (const char* f : {"per_task_accuracy.tsv", "forgetting_curve.tsv", "gain_curve.tsv"})
      out << (target / "plotdata" / f).string() << '\n';
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace afa
