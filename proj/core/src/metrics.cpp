#include "afa/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "afa/data.hpp"

namespace afa {

double SequenceResult::at(int after_task, int on_task) const {
  if (after_task < 1 || on_task < 1 || on_task > after_task || after_task > static_cast<int>(accuracy.size()))
    throw LookupError("accuracy entry (" + std::to_string(after_task) + ", " + std::to_string(on_task) +
                      ") is outside the matrix");
  const auto& row = accuracy[static_cast<std::size_t>(after_task - 1)];
  if (on_task > static_cast<int>(row.size()) || !row[static_cast<std::size_t>(on_task - 1)])
    throw LookupError("accuracy entry (" + std::to_string(after_task) + ", " + std::to_string(on_task) +
                      ") was not measured");
  return *row[static_cast<std::size_t>(on_task - 1)];
}

double SequenceResult::final_average() const {
  if (accuracy.empty()) throw LookupError("empty accuracy matrix");
  const int n = static_cast<int>(accuracy.size());
  double sum = 0.0;
  for (int j = 1; j <= n; ++j) sum += at(n, j);
  return sum / n;
}

double accuracy_from_logits(const Matrix& logits, std::span<const int> labels) {
  if (labels.empty()) throw ValidationError("cannot score an empty set");
  if (logits.rows() != static_cast<Eigen::Index>(labels.size()))
    throw ValidationError("logits and labels disagree in size");
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate(const ModelDecomposition& model, const TaskDataset& task, TaskId head, int batch_size) {
  if (head < 0 || head >= model.head_count()) throw LookupError("unknown head id " + std::to_string(head));
  const Split& test = task.test;
  if (test.size() == 0) throw ValidationError("task " + std::to_string(task.task_id + 1) + " has an empty test set");
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  const TaskId heads[] = {head};
  std::size_t correct = 0;
  for (std::size_t start = 0; start < test.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t len = std::min(static_cast<std::size_t>(batch_size), test.size() - start);
    std::vector<std::size_t> rows(len);
    std::iota(rows.begin(), rows.end(), start);
    const ActivationBundle b = forward_capture(model, eval_batch(task, test, rows, model.arch().input), heads);
    const Matrix& logits = b.logits.at(head);
    for (std::size_t i = 0; i < len; ++i) {
      Eigen::Index best = 0;
      const auto r = static_cast<Eigen::Index>(i);
      for (Eigen::Index c = 1; c < logits.cols(); ++c)
        if (logits(r, c) > logits(r, best)) best = c;
      if (best == test.labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

double drop_vs_reference(double acc_method, double acc_reference) {
  return (acc_method - acc_reference) * 100.0;
}

double avg_forgetting(const SequenceResult& result, int upto_task) {
  if (upto_task < 2 || upto_task > static_cast<int>(result.accuracy.size()))
    throw ValidationError("avg_forgetting needs 2 <= upto_task <= " + std::to_string(result.accuracy.size()));
  double sum = 0.0;
  for (int j = 1; j < upto_task; ++j) sum += drop_vs_reference(result.at(upto_task, j), result.at(j, j));
  return sum / (upto_task - 1);
}

double new_task_gain(const SequenceResult& method, const SequenceResult& finetune, int task) {
  if (method.task_count() != finetune.task_count())
    throw ValidationError("results cover different task sequences");
  for (std::size_t i = 0; i < method.tasks.size(); ++i) {
    if (method.tasks[i].classes != finetune.tasks[i].classes)
      throw ValidationError("results cover different task sequences");
  }
  if (task < 1 || task > method.task_count()) throw ValidationError("task " + std::to_string(task) + " out of range");
  return drop_vs_reference(method.at(task, task), finetune.at(task, task));
}

std::string format_delta(double percentage_points) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.2f", percentage_points);
  const std::string s(buf);
  if (s == "+0.00" || s == "-0.00") return "0.00";
  return s;
}

std::string format_percent(double fraction) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

}  // namespace afa
