#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "afa/experiment.hpp"

using namespace afa;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kTinyConfig = R"(seed: 3
n_tasks: 2
data:
  synthetic:
    kind: blobs
    classes: 4
    train_per_class: 20
    test_per_class: 8
    image_size: 8
model:
  input_size: 8
  layers:
    - {type: conv, width: 4, pool: true}
    - {type: conv, width: 6}
    - {type: fc, width: 12, dropout: 0.5}
methods: [finetune, lwf, afa, joint]
schedule:
  warmup_epochs: 1
  batch_size: 16
  plateau_patience: 1
  post_plateau_epochs: 1
  max_epochs: 2
  discriminator_hidden: 16
)";

struct CommandResult {
  int code = -1;
  std::string output;
};

CommandResult run_tool(const std::string& args) {
  const std::string cmd = std::string(AFA_TOOL_PATH) + " " + args + " 2>&1";
  CommandResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Workspace : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("afa_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }
  fs::path only_run_dir(const fs::path& out) const {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(out))
      if (e.is_directory()) dirs.push_back(e.path());
    EXPECT_EQ(dirs.size(), 1u);
    return dirs.empty() ? fs::path{} : dirs.front();
  }

  fs::path dir_;
};

}  // namespace

TEST(Config, DefaultsValidateAndDigestIsStable) {
  const ExperimentConfig c = parse_config(kTinyConfig);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.arch.conv_count(), 2);
  EXPECT_EQ(c.methods.size(), 4u);
  EXPECT_EQ(c.digest(), parse_config(kTinyConfig).digest());
  EXPECT_EQ(c.digest().size(), 16u);
  const ExperimentConfig back = config_from_canonical_json(c.canonical_json());
  EXPECT_EQ(back.canonical_json(), c.canonical_json());
}

TEST(Config, ErrorsCarryLineAndColumn) {
  try {
    parse_config("seed: 1\nloss:\n  lambda1: -1\n", "bad.yaml");
    FAIL() << "negative lambda1 accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.yaml:3:"), std::string::npos) << e.what();
  }
  try {
    parse_config("seed: 1\nschedule:\n  warmup: 3\n", "typo.yaml");
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("typo.yaml:3:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("warmup"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config("methods: [finetune, ewc]\n"), ConfigError);
  EXPECT_THROW(parse_config("n_tasks: 6\n"), ConfigError);
  EXPECT_THROW(parse_config("seed: [1\n"), ConfigError);
}

TEST(Config, OverridesWinAndChangeTheDigest) {
  ExperimentConfig c = parse_config(kTinyConfig);
  const std::string before = c.digest();
  ConfigOverrides o;
  o.seed = 9;
  o.methods = std::vector<std::string>{"afa_adv", "afa_mmd"};
  o.lambda2 = 0.3;
  o.epochs_scale = 2.0;
  apply_overrides(c, o);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.methods, (std::vector<MethodName>{MethodName::afa_adv, MethodName::afa_mmd}));
  EXPECT_EQ(c.lambda2, 0.3);
  EXPECT_EQ(c.schedule.max_epochs, 4);
  EXPECT_NE(c.digest(), before);
  ConfigOverrides bad;
  bad.lambda1 = -1.0;
  EXPECT_THROW(apply_overrides(c, bad), ConfigError);
}

TEST(Config, BundledConfigsParse) {
  for (const char* name : {"two_task_synthetic.yaml", "five_task_synthetic.yaml"}) {
    const fs::path p = fs::path(AFA_CONFIG_DIR) / name;
    ASSERT_TRUE(fs::exists(p)) << p;
    EXPECT_NO_THROW(load_config(p)) << p;
  }
}

TEST_F(Workspace, RunWritesReportsAndIsReproducible) {
  const fs::path cfg = write("tiny.yaml", kTinyConfig);
  const fs::path out = dir_ / "out";
  const auto r1 = run_tool("run " + cfg.string() + " --out " + out.string());
  ASSERT_EQ(r1.code, 0) << r1.output;
  const fs::path d1 = only_run_dir(out);
  const auto r2 = run_tool("run " + cfg.string() + " --out " + out.string() + " --parallel-methods 2");
  ASSERT_EQ(r2.code, 0) << r2.output;
  fs::path d2;
  for (const auto& e : fs::directory_iterator(out))
    if (e.is_directory() && e.path() != d1) d2 = e.path();
  ASSERT_FALSE(d2.empty());

  EXPECT_EQ(d1.filename().string().rfind("afa-seed3-", 0), 0u) << d1;
  json j1 = json::parse(slurp(d1 / "results.json")), j2 = json::parse(slurp(d2 / "results.json"));
  const std::string digest = j1.at("results")[0].at("config_digest");
  EXPECT_NE(r1.output.find("config digest: " + digest), std::string::npos) << r1.output;
  std::vector<std::string> methods;
  for (const auto& r : j1.at("results")) methods.push_back(r.at("method"));
  EXPECT_EQ(methods, (std::vector<std::string>{"finetune", "lwf", "afa", "joint"}));
  j1.erase("timestamp");
  j2.erase("timestamp");
  EXPECT_EQ(j1.dump(2), j2.dump(2));
  for (const char* f : {"comparison.csv", "config.json", "run_info.json", "plotdata/per_task_accuracy.tsv",
                        "afa-seed3/train_log.jsonl", "afa-seed3/checkpoint.bin", "joint-seed3/result.json"})
    EXPECT_TRUE(fs::exists(d1 / f)) << f;

  std::ifstream log(d1 / "afa-seed3" / "train_log.jsonl");
  std::string line;
  int records = 0;
  while (std::getline(log, line)) {
    const json rec = json::parse(line);
    for (const char* k : {"epoch", "task", "method", "phase", "lr", "val_accuracy", "loss"}) EXPECT_TRUE(rec.contains(k)) << k;
    ++records;
  }
  EXPECT_GT(records, 0);
}

TEST_F(Workspace, EvalMatchesResultsAndPlotEmitsFiles) {
  const fs::path cfg = write("tiny.yaml", kTinyConfig);
  const fs::path out = dir_ / "out";
  ASSERT_EQ(run_tool("run " + cfg.string() + " --out " + out.string() + " --methods finetune,afa").code, 0);
  const fs::path run = only_run_dir(out);
  const json results = json::parse(slurp(run / "results.json"));

  const auto ev = run_tool("eval " + (run / "afa-seed3" / "checkpoint.bin").string());
  ASSERT_EQ(ev.code, 0) << ev.output;
  const json e = json::parse(ev.output);
  EXPECT_EQ(e.at("method"), "afa");
  const auto& last_row = results.at("results")[1].at("accuracy_matrix").back();
  ASSERT_EQ(e.at("accuracies").size(), 2u);
  for (std::size_t t = 0; t < 2; ++t) EXPECT_EQ(e.at("accuracies")[t].at("accuracy").get<double>(), last_row[t].get<double>());

  const fs::path plots = dir_ / "plots";
  const auto pl = run_tool("plot " + run.string() + " --out " + plots.string());
  ASSERT_EQ(pl.code, 0) << pl.output;
  for (const char* f : {"per_task_accuracy.tsv", "forgetting_curve.tsv", "gain_curve.tsv"})
    EXPECT_TRUE(fs::exists(plots / "plotdata" / f)) << f;
  const std::string curve = slurp(plots / "plotdata" / "forgetting_curve.tsv");
  char expected[32];
  std::snprintf(expected, sizeof expected, "%.6f",
                results.at("results")[1].at("derived").at("avg_forgetting")[0].get<double>());
  EXPECT_NE(curve.find(expected), std::string::npos) << curve;
}

TEST_F(Workspace, ExitCodes) {
  EXPECT_EQ(run_tool("run " + write("neg.yaml", "loss:\n  lambda1: -1\n").string()).code, kExitInvalidConfig);
  EXPECT_EQ(run_tool("run " + (dir_ / "missing.yaml").string()).code, kExitInvalidConfig);
  EXPECT_EQ(run_tool("run").code, kExitInvalidConfig);

  std::string diverge = kTinyConfig;
  diverge += "  base_lr: 1.0e12\n";
  const auto r = run_tool("run " + write("boom.yaml", diverge).string() + " --out " + (dir_ / "boom").string() +
                          " --methods finetune");
  EXPECT_EQ(r.code, kExitDiverged) << r.output;

  EXPECT_EQ(run_tool("eval " + (dir_ / "nothing.bin").string()).code, kExitBadCheckpoint);
  EXPECT_EQ(run_tool("eval " + write("junk.bin", "garbage").string()).code, kExitBadCheckpoint);
  fs::create_directories(dir_ / "empty");
  EXPECT_EQ(run_tool("plot " + (dir_ / "empty").string()).code, kExitInvalidConfig);
}
