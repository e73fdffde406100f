#pragma once

// Training configuration, batched loss assembly, the epoch loop and fit().

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "affkit/checkpoint.hpp"
#include "affkit/data.hpp"
#include "affkit/error.hpp"
#include "affkit/image.hpp"
#include "affkit/losses.hpp"
#include "affkit/metrics.hpp"
#include "affkit/model.hpp"
#include "affkit/optim.hpp"

namespace affkit::trainer {

/// Flat key=value training configuration; keys are the field names.
struct TrainConfig {
  data::Task task = data::Task::lsd;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double base_lr = 1e-3;
  std::string optimizer = "adam";  // adam | sgd
  double momentum = 0.9;
  std::string schedule = "cosine";  // cosine | constant
  double smoothing = 0.2;           // LSD only
  bool class_weights = true;
  std::uint64_t seed = 0;
  bool deviation = false;
  std::string pretrained;  // checkpoint for deviation mode
  std::size_t slots = 1;
  std::size_t input_size = 16;
  std::vector<std::size_t> channels{8, 16};
  std::size_t feature_dim = 64;
  std::size_t eval_every = 1;
  std::string out_dir = "run";
  std::string val_manifest;
  std::string resume;           // checkpoint to continue from
  bool keep_snapshots = false;  // also write epoch_NNN.afkt

  void validate() const;
  /// Throws ValidationError on unknown keys or unparsable values.
  void set(std::string_view key, std::string_view value);
  std::string to_text() const;
  static TrainConfig from_text(std::string_view text, const std::string& source = "config");
  static TrainConfig from_file(const std::filesystem::path& path);

  model::ModelSpec model_spec() const;
  optim::Hyper hyper() const;
};

const std::vector<std::string_view>& config_keys();

/// Decoded, preprocessed samples held in memory ([N,3,S,S] row-major).
struct Dataset {
  data::Task task = data::Task::lsd;
  std::size_t input_size = 0;
  std::vector<data::SampleRecord> records;
  std::vector<float> pixels;

  std::size_t size() const { return records.size(); }
  numkit::Tensor<float> batch(std::span<const std::size_t> rows) const;
};

/// Decodes every image (paths relative to base_dir) in parallel.
std::vector<Image> load_images(std::span<const data::SampleRecord> records, const std::filesystem::path& base_dir);
Dataset make_dataset(std::vector<data::SampleRecord> records, data::Task task, std::span<const Image> images,
                     const data::NormStats& stats, std::size_t input_size);

struct LossWeights {
  std::vector<double> expr;
  std::array<double, data::kNumAus> au{};

  /// Inverse-frequency class weights (or all ones) and AU positive weights.
  static LossWeights from_records(std::span<const data::SampleRecord> records, data::Task task, bool class_weights);
};

template <class T>
struct BatchLoss {
  numkit::Tensor<T> total;
  losses::LossBreakdown parts;
  std::size_t labeled_expr = 0;
  std::size_t labeled_va = 0;
  std::size_t labeled_au = 0;  // labeled (row, AU) cells
};

namespace detail {

template <class T>
numkit::Tensor<T> zero_loss() {
  return numkit::Tensor<T>::scalar(T(0));
}

}  // namespace detail

/// Task losses for one batch. Each task averages over the rows labeled for
/// it; a task with nothing labeled (or VA with fewer than two rows)
/// contributes a constant 0 and no gradient. AU losses are masked per column
/// and summed over columns.
template <class T>
BatchLoss<T> compute_batch_losses(numkit::Tape<T>& tape, const model::Outputs<T>& out,
                                  std::span<const data::SampleRecord> batch, data::Task task, const LossWeights& w,
                                  double smoothing) {
  using numkit::Tensor;
  if (out.expr.rank() != 2 || out.expr.dim(0) != batch.size())
    throw ValidationError("outputs cover " + std::to_string(out.expr.rank() == 2 ? out.expr.dim(0) : 0) +
                          " rows, batch has " + std::to_string(batch.size()));
  BatchLoss<T> r;
  if (task == data::Task::lsd) {
    std::vector<int> labels;
    labels.reserve(batch.size());
    for (const auto& rec : batch) labels.push_back(rec.expression);
    auto l = losses::smoothed_cross_entropy(tape, out.expr, labels,
                                            losses::SmoothingConfig{smoothing, data::kLsdClasses}, w.expr);
    const double v = double(l.item());
    if (!std::isfinite(v)) throw ValidationError("non-finite expr loss");
    r.total = l;
    r.parts = {v, 0.0, 0.0, v};
    r.labeled_expr = batch.size();
    return r;
  }
  if (!out.va || !out.au) throw ValidationError("MTL loss needs VA and AU outputs");

  std::vector<std::size_t> rows;
  std::vector<int> labels;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch[i].expression >= 0) {
      rows.push_back(i);
      labels.push_back(batch[i].expression);
    }
  Tensor<T> l_expr = detail::zero_loss<T>();
  if (!rows.empty()) l_expr = losses::weighted_cross_entropy(tape, numkit::gather_rows(tape, out.expr, rows), labels, w.expr);
  r.labeled_expr = rows.size();

  rows.clear();
  std::vector<T> tv, ta;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (data::va_labeled(batch[i])) {
      rows.push_back(i);
      tv.push_back(T(batch[i].valence));
      ta.push_back(T(batch[i].arousal));
    }
  Tensor<T> l_va = detail::zero_loss<T>();
  if (rows.size() >= 2) {
    const std::size_t n = rows.size();
    auto pv = numkit::gather_rows(tape, numkit::select_column(tape, *out.va, 0), rows);
    auto pa = numkit::gather_rows(tape, numkit::select_column(tape, *out.va, 1), rows);
    l_va = losses::va_loss(tape, pv, Tensor<T>({n}, std::move(tv)), pa, Tensor<T>({n}, std::move(ta)));
    r.labeled_va = n;
  }

  Tensor<T> l_au = detail::zero_loss<T>();
  bool any_au = false;
  for (std::size_t c = 0; c < data::kNumAus; ++c) {
    rows.clear();
    std::vector<T> y;
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (batch[i].aus[c] >= 0) {
        rows.push_back(i);
        y.push_back(T(batch[i].aus[c]));
      }
    if (rows.empty()) continue;
    const std::size_t n = rows.size();
    auto p = numkit::reshape(tape, numkit::gather_rows(tape, numkit::select_column(tape, *out.au, c), rows), {n, 1});
    auto l = losses::weighted_bce(tape, p, Tensor<T>({n, 1}, std::move(y)), std::span<const double>(&w.au[c], 1));
    l_au = any_au ? numkit::add(tape, l_au, l) : l;
    any_au = true;
    r.labeled_au += n;
  }
  auto total = losses::mtl_total(tape, l_expr, l_va, l_au);
  r.total = total.total;
  r.parts = total.breakdown;
  return r;
}

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0, l_expr = 0, l_va = 0, l_au = 0;  // means over batches
  std::vector<double> lr_trace;                     // one entry per step
};

struct TrainState {
  model::Model<float> model;
  optim::Optimizer optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;
};

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size);
double scheduled_lr(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total_steps);

/// The sample order for `epoch` (1-based): a shuffle seeded by (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

/// One pass over the data. Gradients are zeroed before every step. A
/// non-finite loss aborts with the batch index and task.
EpochStats train_epoch(TrainState& state, const Dataset& data, const TrainConfig& cfg, const LossWeights& weights);

/// Model outputs for every sample, in dataset order.
struct Predictions {
  data::Task task = data::Task::lsd;
  std::size_t rows = 0;
  std::size_t classes = 0;
  std::vector<double> expr;  // [rows, classes]
  std::vector<double> va;    // [rows, 2], MTL only
  std::vector<double> au;    // [rows, 12], MTL only
};

Predictions predict(const model::Model<float>& m, const Dataset& data, std::size_t batch_size = 64);
/// Argmax expression, 0.5-thresholded AUs, raw VA.
std::vector<metrics::MtlPrediction> decisions(const Predictions& p);
metrics::MetricReport score(const Predictions& p, std::span<const data::SampleRecord> records);
/// p_mtl for MTL, macro F1 for LSD.
double selection_score(const metrics::MetricReport& report);

struct HistoryRow {
  std::size_t epoch = 0;
  double lr = 0, loss = 0, l_expr = 0, l_va = 0, l_au = 0;
  std::optional<double> train_score, val_score;

  std::string to_line() const;
  static HistoryRow parse(std::string_view line);
  /// One row per non-empty line.
  static std::vector<HistoryRow> parse_all(std::string_view text);
};

struct FitResult {
  model::Model<float> model;
  std::vector<HistoryRow> history;
  std::vector<EpochStats> epochs;  // epochs run in this call
  double best_score = -1;
  std::size_t best_epoch = 0;
};

/// Trains on `manifest` (image paths relative to its directory). Writes
/// last.afkt, best.afkt and history.txt into cfg.out_dir after every epoch.
FitResult fit(const TrainConfig& cfg, const std::filesystem::path& manifest);

/// Model, optimizer, normalization stats and progress in one checkpoint.
checkpoint::Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& cfg, const data::NormStats& stats,
                                       double best_score, std::size_t best_epoch);

}  // namespace affkit::trainer
