#pragma once

// Accuracy bookkeeping, average accuracy / forgetting, and storage accounting.

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gfr/data.hpp"
#include "gfr/generator.hpp"
#include "gfr/model.hpp"

namespace gfr::eval {

/// Lower-triangular a[k][j]: accuracy on task j after training task k (both 1-based).
class AccuracyMatrix {
public:
  AccuracyMatrix() = default;

  /// Appends row k = rows()+1, which must hold exactly k accuracies in [0,1].
  void add_row(std::vector<double> row) {
    const size_t k = rows_.size() + 1;
    if (row.size() != k) {
      throw InputError("accuracy row " + std::to_string(k) + " needs " + std::to_string(k) + " entries, got " +
                       std::to_string(row.size()));
    }
    for (double a : row)
      if (!(a >= 0.0 && a <= 1.0)) throw InputError("accuracy " + format_number(a) + " outside [0,1]");
    rows_.push_back(std::move(row));
  }

  [[nodiscard]] int rows() const { return static_cast<int>(rows_.size()); }
  [[nodiscard]] const std::vector<double>& row(int k) const {
    check_row(k);
    return rows_[static_cast<size_t>(k - 1)];
  }
  [[nodiscard]] double at(int k, int j) const {
    check_row(k);
    if (j < 1 || j > k) throw InputError("no entry a[" + std::to_string(k) + "][" + std::to_string(j) + "]");
    return rows_[static_cast<size_t>(k - 1)][static_cast<size_t>(j - 1)];
  }

  bool operator==(const AccuracyMatrix&) const = default;

private:
  void check_row(int k) const {
    if (k < 1 || k > rows()) {
      throw InputError("accuracy row " + std::to_string(k) + " is not complete (" + std::to_string(rows()) +
                       " rows recorded)");
    }
  }

  std::vector<std::vector<double>> rows_;
};

/// Macro average (1/k)·Σ_j a[k][j].
inline double average_accuracy(const AccuracyMatrix& m, int k) {
  const auto& r = m.row(k);
  double s = 0;
  for (double a : r) s += a;
  return s / static_cast<double>(k);
}

/// Accuracy pooled over all test samples of tasks 1..k, given per-task test-set sizes.
inline double average_accuracy_micro(const AccuracyMatrix& m, int k, const std::vector<int>& test_sizes) {
  const auto& r = m.row(k);
  if (test_sizes.size() < r.size()) throw InputError("micro average needs a test size for every task");
  double correct = 0, total = 0;
  for (size_t j = 0; j < r.size(); ++j) {
    correct += r[j] * test_sizes[j];
    total += test_sizes[j];
  }
  if (total <= 0) throw InputError("micro average over empty test sets");
  return correct / total;
}

/// (1/(k−1))·Σ_{j<k} [max_{l∈[j,k−1]} a[l][j] − a[k][j]], not clamped.
inline double average_forgetting(const AccuracyMatrix& m, int k) {
  if (k < 2) throw InputError("average forgetting needs k >= 2, got " + std::to_string(k));
  (void)m.row(k);
  double s = 0;
  for (int j = 1; j < k; ++j) {
    double best = m.at(j, j);
    for (int l = j + 1; l < k; ++l) best = std::max(best, m.at(l, j));
    s += best - m.at(k, j);
  }
  return s / static_cast<double>(k - 1);
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
template <typename S>
double accuracy_from_scores(const Mat<S>& scores, const Labels& labels) {
  if (labels.empty()) throw InputError("accuracy on an empty split");
  model::check_labels(labels, scores.rows(), scores.cols());
  const auto pred = model::argmax_rows(scores);
  size_t hit = 0;
  for (size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Task-agnostic accuracy of `m` on the test split of task `task`: argmax over every head output
/// (the head covers exactly the classes seen so far).
template <typename S>
double task_accuracy(const model::Model<S>& m, const data::TaskStream& stream, int task, int batch_size = 256) {
  const auto& spec = stream.task(task);
  if (spec.test.empty()) throw InputError("task " + std::to_string(task) + " has an empty test split");
  if (m.head.num_classes() < stream.classes_through(task)) throw InputError("head does not cover the evaluated task");
  const auto index = stream.head_index();
  const auto& ds = *stream.dataset;
  Rng unused(0);
  size_t hit = 0;
  for (size_t begin = 0; begin < spec.test.size(); begin += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(spec.test.size(), begin + static_cast<size_t>(batch_size));
    std::span<const int> idx(spec.test.data() + begin, end - begin);
    const auto x = data::make_batch<S>(ds.test, ds.meta, idx, nullptr, unused);
    const auto pred = model::argmax_rows(m.logits(x));
    for (size_t i = 0; i < idx.size(); ++i) {
      hit += pred[i] == index[ds.test[static_cast<size_t>(idx[i])].label];
    }
  }
  return static_cast<double>(hit) / static_cast<double>(spec.test.size());
}

/// Row k of the accuracy matrix: accuracy on tasks 1..k.
template <typename S>
std::vector<double> evaluate_row(const model::Model<S>& m, const data::TaskStream& stream, int k) {
  std::vector<double> row;
  for (int j = 1; j <= k; ++j) row.push_back(task_accuracy(m, stream, j));
  return row;
}

// ---------------------------------------------------------------------------
// CSV files

inline void write_metrics_csv(const std::filesystem::path& file, const AccuracyMatrix& m) {
  std::ofstream os(file);
  if (!os) throw IoError("cannot write " + file.string());
  os << "after_task,eval_task,accuracy\n";
  for (int k = 1; k <= m.rows(); ++k)
    for (int j = 1; j <= k; ++j) os << k << ',' << j << ',' << format_number(m.at(k, j)) << '\n';
  if (!os) throw IoError("write failed: " + file.string());
}

inline AccuracyMatrix read_metrics_csv(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot read " + file.string());
  std::string line;
  std::getline(is, line);
  if (line != "after_task,eval_task,accuracy") throw IoError("unexpected metrics header in " + file.string());
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int k = 0, j = 0;
    double a = 0;
    char c1 = 0, c2 = 0;
    if (!(ls >> k >> c1 >> j >> c2 >> a) || c1 != ',' || c2 != ',') throw IoError("malformed metrics line: " + line);
    if (k < 1 || j < 1 || j > k) throw IoError("metrics entry out of range: " + line);
    if (rows.size() < static_cast<size_t>(k)) rows.resize(static_cast<size_t>(k));
    auto& r = rows[static_cast<size_t>(k - 1)];
    if (r.size() + 1 != static_cast<size_t>(j)) throw IoError("metrics rows out of order near: " + line);
    r.push_back(a);
  }
  AccuracyMatrix m;
  for (auto& r : rows) m.add_row(std::move(r));
  return m;
}

inline void write_summary_csv(const std::filesystem::path& file, const AccuracyMatrix& m) {
  std::ofstream os(file);
  if (!os) throw IoError("cannot write " + file.string());
  os << "k,avg_accuracy,avg_forgetting\n";
  for (int k = 1; k <= m.rows(); ++k) {
    os << k << ',' << format_number(average_accuracy(m, k)) << ',';
    if (k >= 2) os << format_number(average_forgetting(m, k));
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + file.string());
}

// ---------------------------------------------------------------------------
// Storage accounting

struct ExemplarSpec {
  long long count = 0;
  int height = 0;
  int width = 0;
  int channels = 3;
};

struct ModelComponent {
  std::string name;
  long long parameters = 0;
};

struct StorageDescriptor {
  std::string method;
  std::optional<ExemplarSpec> exemplars;
  std::vector<ModelComponent> models;
};

inline constexpr double kMB = 1e6;
inline constexpr double kMiB = 1048576.0;

struct StorageReport {
  std::string method;
  long long exemplar_bytes = 0;
  long long model_bytes = 0;

  [[nodiscard]] long long total_bytes() const { return exemplar_bytes + model_bytes; }
  [[nodiscard]] double megabytes() const { return static_cast<double>(total_bytes()) / kMB; }
  [[nodiscard]] double mebibytes() const { return static_cast<double>(total_bytes()) / kMiB; }
};

/// 1 byte per stored pixel, 4 bytes per model parameter.
inline StorageReport storage_footprint(const StorageDescriptor& desc) {
  StorageReport r;
  r.method = desc.method;
  if (desc.exemplars) {
    const auto& e = *desc.exemplars;
    r.exemplar_bytes = e.count * e.height * e.width * e.channels;
  }
  for (const auto& m : desc.models) r.model_bytes += m.parameters * 4;
  return r;
}

/// Closed-form parameter counts for a conditional feature GAN over `classes` classes.
inline gen::MlpSpec generator_spec(int feature_dim, int classes, int latent_dim, const std::vector<int>& hidden) {
  return {classes + latent_dim, hidden, feature_dim, 0.2, false};
}
inline gen::MlpSpec critic_spec(int feature_dim, int classes, const std::vector<int>& hidden) {
  return {classes + feature_dim, hidden, 1, 0.2, false};
}

inline StorageDescriptor feature_gan_descriptor(int feature_dim, int classes, int latent_dim = 200,
                                                const std::vector<int>& hidden = {512, 512}) {
  return {"feature-gan",
          std::nullopt,
          {{"generator", generator_spec(feature_dim, classes, latent_dim, hidden).parameter_count()},
           {"critic", critic_spec(feature_dim, classes, hidden).parameter_count()}}};
}

inline StorageDescriptor exemplar_descriptor(const std::string& method, long long count, int height, int width,
                                             int channels = 3) {
  return {method, ExemplarSpec{count, height, width, channels}, {}};
}

inline std::string render(const StorageReport& r) {
  std::ostringstream os;
  os << r.method << ": exemplars " << r.exemplar_bytes << " B, models " << r.model_bytes << " B, total "
     << r.total_bytes() << " B = ";
  os.setf(std::ios::fixed);
  os.precision(2);
  os << r.megabytes() << " MB = " << r.mebibytes() << " MiB";
  return os.str();
}

}  // namespace gfr::eval
