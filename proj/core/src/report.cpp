#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "afa/metrics.hpp"
#include "json.hpp"

namespace afa {

namespace {

using ordered_json = nlohmann::ordered_json;

const SequenceResult* find_result(std::span<const SequenceResult> results, const std::string& method,
                                  std::uint64_t seed) {
  for (const auto& r : results)
    if (r.method == method && r.seed == seed) return &r;
  return nullptr;
}

bool has(const SequenceResult& r, int after, int on) {
  if (after < 1 || after > static_cast<int>(r.accuracy.size())) return false;
  const auto& row = r.accuracy[static_cast<std::size_t>(after - 1)];
  return on >= 1 && on <= static_cast<int>(row.size()) && row[static_cast<std::size_t>(on - 1)].has_value();
}

std::optional<double> forgetting_or_null(const SequenceResult& r, int upto) {
  for (int j = 1; j < upto; ++j)
    if (!has(r, upto, j) || !has(r, j, j)) return std::nullopt;
  return avg_forgetting(r, upto);
}

std::optional<double> gain_or_null(const SequenceResult& r, const SequenceResult* finetune, int t) {
  if (finetune == nullptr || !has(r, t, t) || !has(*finetune, t, t)) return std::nullopt;
  return new_task_gain(r, *finetune, t);
}

ordered_json optional_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

ordered_json result_json(const SequenceResult& r, std::span<const SequenceResult> all) {
  ordered_json j;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["config_digest"] = r.config_digest;
  j["tasks"] = ordered_json::array();
  for (const auto& t : r.tasks) j["tasks"].push_back({{"id", t.id}, {"classes", t.classes}});
  j["accuracy_matrix"] = ordered_json::array();
  for (const auto& row : r.accuracy) {
    ordered_json jr = ordered_json::array();
    for (const auto& v : row) jr.push_back(optional_json(v));
    j["accuracy_matrix"].push_back(jr);
  }
  const SequenceResult* finetune = find_result(all, "finetune", r.seed);
  ordered_json forgetting = ordered_json::array();
  for (int k = 2; k <= static_cast<int>(r.accuracy.size()); ++k) forgetting.push_back(optional_json(forgetting_or_null(r, k)));
  ordered_json gain = ordered_json::array();
  for (int t = 1; t <= static_cast<int>(r.accuracy.size()); ++t) gain.push_back(optional_json(gain_or_null(r, finetune, t)));
  j["derived"] = {{"avg_forgetting", forgetting}, {"new_task_gain", gain}};
  j["schema_version"] = kResultsSchemaVersion;
  return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

std::string fixed(double v, const char* fmt = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  std::string s(buf);
  if (s.starts_with("-") && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

std::string cell(std::optional<double> v) { return v ? fixed(*v) : "NA"; }

SequenceResult result_from(const ordered_json& j) {
  SequenceResult r;
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  for (const auto& t : j.at("tasks")) r.tasks.push_back({t.at("id").get<int>(), t.at("classes").get<int>()});
  for (const auto& row : j.at("accuracy_matrix")) {
    std::vector<std::optional<double>> out;
    for (const auto& v : row) out.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    r.accuracy.push_back(std::move(out));
  }
  return r;
}

}  // namespace

std::string results_to_json(std::span<const SequenceResult> results, const std::string& timestamp) {
  ordered_json j;
  j["schema_version"] = kResultsSchemaVersion;
  j["timestamp"] = timestamp;
  j["results"] = ordered_json::array();
  for (const auto& r : results) j["results"].push_back(result_json(r, results));
  return j.dump(2) + "\n";
}

std::string single_result_json(const SequenceResult& result) {
  const SequenceResult one[] = {result};
  return result_json(result, one).dump(2) + "\n";
}

std::vector<SequenceResult> results_from_json(const std::string& text) {
  std::vector<SequenceResult> out;
  try {
    const ordered_json j = ordered_json::parse(text);
    if (j.at("schema_version").get<int>() != kResultsSchemaVersion) throw ValidationError("unsupported results schema");
    for (const auto& r : j.at("results")) out.push_back(result_from(r));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed results document: ") + e.what());
  }
  return out;
}

void emit_plot_data(std::span<const SequenceResult> results, const std::filesystem::path& out_dir) {
  const auto dir = out_dir / "plotdata";
  ensure_dir(dir);
  std::ostringstream bars, forgetting, gain;
  bars << "method\tseed\ttask\taccuracy\n";
  forgetting << "method\tseed\tupto_task\tavg_forgetting_pp\n";
  gain << "method\tseed\ttask\tnew_task_gain_pp\n";
  for (const auto& r : results) {
    const int n = static_cast<int>(r.accuracy.size());
    for (int j = 1; j <= n; ++j)
      bars << r.method << '\t' << r.seed << '\t' << j << '\t' << cell(has(r, n, j) ? std::optional(r.at(n, j)) : std::nullopt) << '\n';
    for (int k = 2; k <= n; ++k)
      forgetting << r.method << '\t' << r.seed << '\t' << k << '\t' << cell(forgetting_or_null(r, k)) << '\n';
    const SequenceResult* finetune = find_result(results, "finetune", r.seed);
    for (int t = 1; t <= n; ++t)
      gain << r.method << '\t' << r.seed << '\t' << t << '\t' << cell(gain_or_null(r, finetune, t)) << '\n';
  }
  write_text(dir / "per_task_accuracy.tsv", bars.str());
  write_text(dir / "forgetting_curve.tsv", forgetting.str());
  write_text(dir / "gain_curve.tsv", gain.str());
}

namespace {

// Final-row accuracies as "value (delta)": older tasks against joint
// training, the newest task against finetuning.
std::string comparison_csv(std::span<const SequenceResult> results) {
  int n = 0;
  for (const auto& r : results) n = std::max(n, static_cast<int>(r.accuracy.size()));
  std::ostringstream csv;
  csv << "method,seed";
  for (int j = 1; j <= n; ++j) csv << ",task" << j << (j == n ? " (new)" : " (old)");
  csv << ",avg_forgetting\n";
  for (const auto& r : results) {
    csv << r.method << ',' << r.seed;
    const int rows = static_cast<int>(r.accuracy.size());
    for (int j = 1; j <= n; ++j) {
      csv << ',';
      if (rows != n || !has(r, n, j)) continue;
      const double v = r.at(n, j);
      csv << format_percent(v);
      const std::string ref_name = j == n ? "finetune" : "joint";
      const SequenceResult* ref = find_result(results, ref_name, r.seed);
      if (ref != nullptr && ref != &r && has(*ref, n, j)) csv << " (" << format_delta(drop_vs_reference(v, ref->at(n, j))) << ')';
    }
    csv << ',';
    if (rows >= 2) {
      if (const auto f = forgetting_or_null(r, rows)) csv << format_delta(*f);
    }
    csv << '\n';
  }
  return csv.str();
}

}  // namespace

void emit_report(std::span<const SequenceResult> results, const std::filesystem::path& out_dir,
                 const ReportOptions& options) {
  if (results.empty()) throw ValidationError("nothing to report");
  ensure_dir(out_dir);
  write_text(out_dir / "results.json", results_to_json(results, options.timestamp));
  write_text(out_dir / "comparison.csv", comparison_csv(results));
  emit_plot_data(results, out_dir);
}

}  // namespace afa
