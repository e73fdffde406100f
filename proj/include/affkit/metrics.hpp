#pragma once

// Competition scoring: confusion matrices, F1, CCC and the per-task reports.
// Everything here is 64-bit and untracked.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "affkit/data.hpp"

namespace affkit::metrics {

struct ConfusionMatrix {
  std::size_t classes = 0;
  // Row-major: counts[true * classes + predicted].
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0) {}
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
  std::uint64_t total() const;
  void merge(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion(std::span<const int> labels, std::span<const int> preds, std::size_t classes);

struct F1Scores {
  std::vector<double> per_class;
  double macro = 0.0;
};

/// Per-class F1 with 0/0 -> 0; macro is the plain mean over every class.
F1Scores f1_scores(const ConfusionMatrix& cm);

/// F1 of the positive class for 0/1 sequences.
double binary_f1(std::span<const int> labels, std::span<const int> preds);

/// Concordance correlation coefficient with the same stabilizer as the loss.
double ccc_metric(std::span<const double> pred, std::span<const double> truth);

double macro_mean(std::span<const double> values);
/// p_va + p_expr + p_au
double mtl_score(double p_va, double p_expr, double p_au);

struct MtlPrediction {
  double valence = 0.0;
  double arousal = 0.0;
  int expression = 0;
  std::array<int, data::kNumAus> aus{};
};

struct MetricReport {
  data::Task task = data::Task::mtl;
  double p_va = 0.0;
  double p_expr = 0.0;
  double p_au = 0.0;
  double p_mtl = 0.0;
  double p_lsd = 0.0;
  double ccc_v = 0.0;
  double ccc_a = 0.0;
  std::vector<std::pair<std::string, double>> per_class_f1;
  std::vector<std::pair<std::string, double>> per_au_f1;
  std::size_t count_va = 0;
  std::size_t count_expr = 0;
  std::vector<std::size_t> count_au;
  // Tasks (or AU columns) that had nothing to score and were reported as 0.
  std::vector<std::string> warnings;

  /// key=value lines, 6 decimals, stable order. Keys get `prefix` prepended.
  std::string to_text(const std::string& prefix = "") const;
};

MetricReport evaluate_mtl(std::span<const data::SampleRecord> records, std::span<const MtlPrediction> preds);
MetricReport evaluate_lsd(std::span<const int> labels, std::span<const int> preds);

}  // namespace affkit::metrics
