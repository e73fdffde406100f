#include "affkit/ensemble.hpp"

#include <cmath>

#include "affkit/checkpoint.hpp"
#include "affkit/error.hpp"
#include "affkit/fileio.hpp"

namespace affkit::ensemble {

ProbMatrix::ProbMatrix(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v)) {
  if (values.size() != rows * cols)
    throw ValidationError("matrix [" + std::to_string(rows) + "," + std::to_string(cols) + "] needs " +
                          std::to_string(rows * cols) + " values, got " + std::to_string(values.size()));
}

namespace {

void check_shapes(std::span<const ProbMatrix> members, const char* what) {
  if (members.empty()) throw ValidationError(std::string(what) + ": need at least one member");
  for (std::size_t m = 1; m < members.size(); ++m)
    if (members[m].rows != members[0].rows || members[m].cols != members[0].cols)
      throw ValidationError(std::string(what) + ": member " + std::to_string(m) + " is [" +
                            std::to_string(members[m].rows) + "," + std::to_string(members[m].cols) +
                            "], member 0 is [" + std::to_string(members[0].rows) + "," +
                            std::to_string(members[0].cols) + "]");
}

ProbMatrix mean_of(std::span<const ProbMatrix> members) {
  ProbMatrix out(members[0].rows, members[0].cols, std::vector<double>(members[0].values.size(), 0.0));
  for (const auto& m : members)
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += m.values[i];
  const double inv = 1.0 / double(members.size());
  for (auto& v : out.values) v *= inv;
  return out;
}

std::vector<int> row_argmax(const ProbMatrix& p) {
  std::vector<int> out(p.rows, 0);
  for (std::size_t r = 0; r < p.rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < p.cols; ++c)
      if (p.at(r, c) > p.at(r, best)) best = c;
    out[r] = int(best);
  }
  return out;
}

ProbMatrix as_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) { return {rows, cols, v}; }

}  // namespace

ProbMatrix average_probs(std::span<const ProbMatrix> members) {
  check_shapes(members, "average_probs");
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto& p = members[m];
    for (std::size_t r = 0; r < p.rows; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < p.cols; ++c) {
        if (!(p.at(r, c) >= 0)) throw ValidationError("member " + std::to_string(m) + " row " + std::to_string(r) +
                                                      " has a negative or NaN probability");
        s += p.at(r, c);
      }
      if (std::abs(s - 1.0) > kSimplexInputTolerance)
        throw ValidationError("member " + std::to_string(m) + " row " + std::to_string(r) + " sums to " +
                              format_roundtrip(s) + ", not 1");
    }
  }
  return mean_of(members);
}

ProbMatrix average_va(std::span<const ProbMatrix> members) {
  check_shapes(members, "average_va");
  if (members[0].cols != 2) throw ValidationError("average_va expects [N,2] predictions");
  for (std::size_t m = 0; m < members.size(); ++m)
    for (double v : members[m].values)
      if (!(v >= -1.0 && v <= 1.0))
        throw ValidationError("member " + std::to_string(m) + " has a VA value outside [-1,1]");
  return mean_of(members);
}

std::vector<int> average_then_argmax(std::span<const ProbMatrix> members) {
  return row_argmax(average_probs(members));
}

std::vector<int> majority_vote(std::span<const ProbMatrix> members) {
  check_shapes(members, "majority_vote");
  const std::size_t rows = members[0].rows, cols = members[0].cols;
  std::vector<std::vector<std::size_t>> votes(rows, std::vector<std::size_t>(cols, 0));
  for (const auto& m : members) {
    const auto a = row_argmax(m);
    for (std::size_t r = 0; r < rows; ++r) ++votes[r][std::size_t(a[r])];
  }
  std::vector<int> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 1; c < cols; ++c)
      if (votes[r][c] > votes[r][std::size_t(out[r])]) out[r] = int(c);
  return out;
}

trainer::Predictions average_predictions(std::span<const trainer::Predictions> members) {
  if (members.empty()) throw ValidationError("ensemble needs at least one member");
  const auto& first = members[0];
  std::vector<ProbMatrix> expr, va, au;
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto& p = members[m];
    if (p.task != first.task || p.rows != first.rows || p.classes != first.classes)
      throw ValidationError("member " + std::to_string(m) + " predictions do not match member 0");
    expr.push_back(as_matrix(p.expr, p.rows, p.classes));
    if (p.task == data::Task::mtl) {
      va.push_back(as_matrix(p.va, p.rows, 2));
      au.push_back(as_matrix(p.au, p.rows, data::kNumAus));
    }
  }
  trainer::Predictions out;
  out.task = first.task;
  out.rows = first.rows;
  out.classes = first.classes;
  out.expr = average_probs(expr).values;
  if (first.task == data::Task::mtl) {
    out.va = average_va(va).values;
    // AU sigmoids are independent per unit, so they average like any other score.
    out.au = mean_of(au).values;
  }
  return out;
}

data::Task EnsembleSet::task() const {
  if (members.empty()) throw ValidationError("ensemble has no members");
  return members[0].model.spec.task;
}

std::size_t EnsembleSet::input_size() const {
  if (members.empty()) throw ValidationError("ensemble has no members");
  return members[0].model.spec.backbone.input_size;
}

void EnsembleSet::validate() const {
  if (members.empty()) throw ValidationError("ensemble has no members");
  const auto& ref = members[0].model.spec;
  for (const auto& m : members) {
    const auto& s = m.model.spec;
    if (s.task != ref.task)
      throw ValidationError("member " + m.name + " is a " + std::string(data::task_name(s.task)) +
                            " model, ensemble is " + std::string(data::task_name(ref.task)));
    if (s.num_classes() != ref.num_classes())
      throw ValidationError("member " + m.name + " predicts " + std::to_string(s.num_classes()) + " classes");
    if (s.backbone.input_size != ref.backbone.input_size)
      throw ValidationError("member " + m.name + " expects " + std::to_string(s.backbone.input_size) +
                            "px input, ensemble uses " + std::to_string(ref.backbone.input_size) + "px");
  }
}

EnsembleSet EnsembleSet::load(std::span<const std::filesystem::path> checkpoints) {
  EnsembleSet set;
  for (const auto& path : checkpoints) {
    const auto ck = checkpoint::load(path);
    Member m;
    m.name = path.string();
    try {
      m.model = checkpoint::restore_model(ck);
    } catch (const ValidationError& e) {
      throw ValidationError("member " + m.name + ": " + e.what());
    }
    m.stats = checkpoint::restore_norm_stats(ck);
    set.members.push_back(std::move(m));
  }
  set.validate();
  return set;
}

data::NormStats resolve_stats(const EnsembleSet& set, const std::optional<std::filesystem::path>& stats_file) {
  if (stats_file) return data::parse_norm_stats(read_file_text(*stats_file), stats_file->string());
  if (set.members.empty()) throw ValidationError("ensemble has no members");
  if (!set.members[0].stats)
    throw ValidationError("member " + set.members[0].name + " carries no normalization stats; pass a stats file");
  return *set.members[0].stats;
}

EnsembleReport ensemble_evaluate(const EnsembleSet& set, const trainer::Dataset& data) {
  set.validate();
  if (data.task != set.task())
    throw ValidationError("dataset task " + std::string(data::task_name(data.task)) + " does not match ensemble task " +
                          std::string(data::task_name(set.task())));
  std::vector<trainer::Predictions> preds(set.members.size());
  std::vector<std::string> errors(set.members.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(set.members.size()); ++i) {
    try {
      preds[std::size_t(i)] = trainer::predict(set.members[std::size_t(i)].model, data);
    } catch (const std::exception& e) {
      errors[std::size_t(i)] = "member " + set.members[std::size_t(i)].name + ": " + e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw ValidationError(e);
  EnsembleReport rep;
  for (std::size_t i = 0; i < preds.size(); ++i)
    rep.members.emplace_back(set.members[i].name, trainer::score(preds[i], data.records));
  rep.ensemble = trainer::score(average_predictions(preds), data.records);
  return rep;
}

std::string EnsembleReport::to_text() const {
  const bool mtl = ensemble.task == data::Task::mtl;
  const char* key = mtl ? "p_mtl" : "p_lsd";
  std::string out = "members=" + std::to_string(members.size()) + "\n";
  for (std::size_t i = 0; i < members.size(); ++i) {
    out += "row.member" + std::to_string(i) + ".name=" + members[i].first + "\n";
    out += "row.member" + std::to_string(i) + "." + key + "=" +
           format_fixed6(trainer::selection_score(members[i].second)) + "\n";
  }
  out += std::string("row.ensemble.") + key + "=" + format_fixed6(trainer::selection_score(ensemble)) + "\n";
  for (std::size_t i = 0; i < members.size(); ++i) out += members[i].second.to_text("member" + std::to_string(i) + ".");
  out += ensemble.to_text("ensemble.");
  return out;
}

}  // namespace affkit::ensemble
