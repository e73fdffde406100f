#pragma once

// Test-time averaging across independently trained models.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "affkit/data.hpp"
#include "affkit/metrics.hpp"
#include "affkit/model.hpp"
#include "affkit/trainer.hpp"

namespace affkit::ensemble {

/// Row-major [rows, cols] matrix of 64-bit values.
struct ProbMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  ProbMatrix() = default;
  ProbMatrix(std::size_t r, std::size_t c, std::vector<double> v);
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  bool operator==(const ProbMatrix&) const = default;
};

inline constexpr double kSimplexInputTolerance = 1e-5;

/// Unweighted mean of simplex rows, accumulated in member order. Every input
/// row must be non-negative and sum to 1 within kSimplexInputTolerance.
ProbMatrix average_probs(std::span<const ProbMatrix> members);
/// Mean of [N,2] valence/arousal predictions in [-1,1].
ProbMatrix average_va(std::span<const ProbMatrix> members);
/// Row argmax of the averaged probabilities (lowest index on ties).
std::vector<int> average_then_argmax(std::span<const ProbMatrix> members);
/// Per-member argmax, then most votes (lowest class on ties). Only used to
/// show where it differs from averaging.
std::vector<int> majority_vote(std::span<const ProbMatrix> members);

/// Member-wise mean of whole prediction sets (EXPR, VA and AU).
trainer::Predictions average_predictions(std::span<const trainer::Predictions> members);

struct Member {
  std::string name;
  model::Model<float> model;
  std::optional<data::NormStats> stats;
};

struct EnsembleSet {
  std::vector<Member> members;

  data::Task task() const;
  std::size_t input_size() const;
  /// Same task, class count and input size across members; throws naming
  /// the first incompatible member.
  void validate() const;
  static EnsembleSet load(std::span<const std::filesystem::path> checkpoints);
};

struct EnsembleReport {
  std::vector<std::pair<std::string, metrics::MetricReport>> members;
  metrics::MetricReport ensemble;

  /// Per-member rows, the ensemble row, then full member and ensemble
  /// reports under "member<i>." and "ensemble." prefixes.
  std::string to_text() const;
};

/// Runs every member (in parallel), averages their outputs and scores both.
EnsembleReport ensemble_evaluate(const EnsembleSet& set, const trainer::Dataset& data);

/// Stats from `stats_file` if given, else the first member's embedded stats.
data::NormStats resolve_stats(const EnsembleSet& set, const std::optional<std::filesystem::path>& stats_file);

}  // namespace affkit::ensemble
