#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "afa/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Adversarial feature alignment for continual learning"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Train every configured method and write a report");
  std::string config_path;
  afa::ConfigOverrides overrides;
  afa::RunOptions run_options;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::vector<std::string> methods;
  double lambda1 = 0, lambda2 = 0, lambda3 = 0, epochs_scale = 1;
  run->add_option("config", config_path, "Experiment YAML file")->required();
  auto* seed_opt = run->add_option("--seed", seed, "Override the seed");
  auto* out_opt = run->add_option("--out", out_dir, "Override the output directory");
  auto* methods_opt = run->add_option("--methods", methods, "Override the method list")->delimiter(',');
  auto* l1 = run->add_option("--lambda1", lambda1, "Distillation weight");
  auto* l2 = run->add_option("--lambda2", lambda2, "Adversarial conv-alignment weight");
  auto* l3 = run->add_option("--lambda3", lambda3, "MMD fc-alignment weight");
  auto* scale = run->add_option("--epochs-scale", epochs_scale, "Multiply every epoch count");
  run->add_option("--parallel-methods", run_options.parallel_methods, "Worker processes for methods")
      ->check(CLI::PositiveNumber);
  run->add_option("--timestamp", run_options.timestamp, "Fixed ISO-8601 timestamp for the report");
  run->add_flag("-v,--verbose", run_options.verbose, "Print per-epoch progress");

  auto* eval = app.add_subcommand("eval", "Print per-task test accuracies of a checkpoint as JSON");
  std::string checkpoint_path;
  std::string data_path;
  eval->add_option("checkpoint", checkpoint_path, "checkpoint.bin from a run")->required();
  auto* data_opt = eval->add_option("--data", data_path, "Experiment YAML describing the data");

  auto* plot = app.add_subcommand("plot", "Write plot-data files for a results directory");
  std::string results_dir;
  std::string plot_out;
  plot->add_option("results_dir", results_dir, "Directory holding results.json")->required();
  auto* plot_out_opt = plot->add_option("--out", plot_out, "Destination (defaults to results_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : afa::kExitInvalidConfig;
  }

  if (run->parsed()) {
    if (*seed_opt) overrides.seed = seed;
    if (*out_opt) overrides.out_dir = out_dir;
    if (*methods_opt) overrides.methods = methods;
    if (*l1) overrides.lambda1 = lambda1;
    if (*l2) overrides.lambda2 = lambda2;
    if (*l3) overrides.lambda3 = lambda3;
    if (*scale) overrides.epochs_scale = epochs_scale;
    return afa::cmd_run(config_path, overrides, run_options, std::cout, std::cerr);
  }
  if (eval->parsed()) {
    std::optional<std::filesystem::path> data;
    if (*data_opt) data = data_path;
    return afa::cmd_eval(checkpoint_path, data, std::cout, std::cerr);
  }
  std::optional<std::filesystem::path> target;
  if (*plot_out_opt) target = plot_out;
  return afa::cmd_plot(results_dir, target, std::cout, std::cerr);
}
