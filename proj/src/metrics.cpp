#include "affkit/metrics.hpp"

#include <cmath>

#include "affkit/error.hpp"
#include "affkit/fileio.hpp"
#include "affkit/losses.hpp"

namespace affkit::metrics {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes != classes) throw ValidationError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

ConfusionMatrix confusion(std::span<const int> labels, std::span<const int> preds, std::size_t classes) {
  if (labels.size() != preds.size())
    throw ValidationError("confusion: " + std::to_string(labels.size()) + " labels vs " + std::to_string(preds.size()) +
                          " predictions");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= classes)
      throw ValidationError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) + " out of range");
    if (preds[i] < 0 || std::size_t(preds[i]) >= classes)
      throw ValidationError("prediction " + std::to_string(preds[i]) + " at index " + std::to_string(i) +
                            " out of range");
    ++cm.counts[std::size_t(labels[i]) * classes + std::size_t(preds[i])];
  }
  return cm;
}

namespace {

double f1_from(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  const double p = tp + fp == 0 ? 0.0 : double(tp) / double(tp + fp);
  const double r = tp + fn == 0 ? 0.0 : double(tp) / double(tp + fn);
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

}  // namespace

F1Scores f1_scores(const ConfusionMatrix& cm) {
  F1Scores s;
  const std::size_t C = cm.classes;
  s.per_class.resize(C);
  for (std::size_t i = 0; i < C; ++i) {
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t j = 0; j < C; ++j) {
      if (j == i) continue;
      fp += cm.at(j, i);
      fn += cm.at(i, j);
    }
    s.per_class[i] = f1_from(cm.at(i, i), fp, fn);
  }
  s.macro = C == 0 ? 0.0 : macro_mean(s.per_class);
  return s;
}

double binary_f1(std::span<const int> labels, std::span<const int> preds) {
  if (labels.size() != preds.size())
    throw ValidationError("binary_f1: " + std::to_string(labels.size()) + " labels vs " + std::to_string(preds.size()) +
                          " predictions");
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if ((labels[i] != 0 && labels[i] != 1) || (preds[i] != 0 && preds[i] != 1))
      throw ValidationError("binary_f1: non-binary value at index " + std::to_string(i));
    tp += labels[i] == 1 && preds[i] == 1;
    fp += labels[i] == 0 && preds[i] == 1;
    fn += labels[i] == 1 && preds[i] == 0;
  }
  return f1_from(tp, fp, fn);
}

double ccc_metric(std::span<const double> pred, std::span<const double> truth) {
  const std::size_t n = pred.size();
  if (truth.size() != n)
    throw ValidationError("ccc length mismatch: " + std::to_string(n) + " vs " + std::to_string(truth.size()));
  if (n < 2) throw ValidationError("ccc needs at least 2 samples, got " + std::to_string(n));
  double mp = 0, mt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mp += pred[i];
    mt += truth[i];
  }
  mp /= double(n);
  mt /= double(n);
  double sp = 0, st = 0, spt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dp = pred[i] - mp, dt = truth[i] - mt;
    sp += dp * dp;
    st += dt * dt;
    spt += dp * dt;
  }
  sp /= double(n);
  st /= double(n);
  spt /= double(n);
  return 2.0 * spt / (sp + st + (mp - mt) * (mp - mt) + losses::kCccStabilizer);
}

double macro_mean(std::span<const double> values) {
  if (values.empty()) throw ValidationError("mean of an empty list");
  double s = 0;
  for (double v : values) s += v;
  return s / double(values.size());
}

double mtl_score(double p_va, double p_expr, double p_au) { return p_va + p_expr + p_au; }

MetricReport evaluate_mtl(std::span<const data::SampleRecord> records, std::span<const MtlPrediction> preds) {
  using data::kNumAus;
  if (records.size() != preds.size())
    throw ValidationError("evaluate_mtl: " + std::to_string(records.size()) + " records vs " +
                          std::to_string(preds.size()) + " predictions");
  MetricReport rep;
  rep.task = data::Task::mtl;

  std::vector<double> pv, tv, pa, ta;
  std::vector<int> expr_labels, expr_preds;
  std::array<std::vector<int>, kNumAus> au_labels, au_preds;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto& p = preds[i];
    if (data::va_labeled(r)) {
      pv.push_back(p.valence);
      tv.push_back(r.valence);
      pa.push_back(p.arousal);
      ta.push_back(r.arousal);
    }
    if (r.expression != data::kUnlabeled) {
      expr_labels.push_back(r.expression);
      expr_preds.push_back(p.expression);
    }
    for (std::size_t a = 0; a < kNumAus; ++a) {
      if (r.aus[a] == data::kUnlabeled) continue;
      au_labels[a].push_back(r.aus[a]);
      au_preds[a].push_back(p.aus[a]);
    }
  }

  rep.count_va = pv.size();
  if (pv.size() >= 2) {
    rep.ccc_v = ccc_metric(pv, tv);
    rep.ccc_a = ccc_metric(pa, ta);
  } else {
    rep.warnings.push_back("va");
  }
  rep.p_va = (rep.ccc_v + rep.ccc_a) / 2.0;

  rep.count_expr = expr_labels.size();
  const auto names = data::class_names(data::Task::mtl);
  auto f1 = f1_scores(confusion(expr_labels, expr_preds, data::kMtlClasses));
  if (expr_labels.empty()) {
    rep.warnings.push_back("expr");
    f1.per_class.assign(data::kMtlClasses, 0.0);
    f1.macro = 0.0;
  }
  for (std::size_t c = 0; c < names.size(); ++c) rep.per_class_f1.emplace_back(names[c], f1.per_class[c]);
  rep.p_expr = f1.macro;

  double au_sum = 0;
  rep.count_au.resize(kNumAus);
  for (std::size_t a = 0; a < kNumAus; ++a) {
    rep.count_au[a] = au_labels[a].size();
    double f = 0.0;
    if (au_labels[a].empty())
      rep.warnings.push_back("au:" + std::string(data::kAuNames[a]));
    else
      f = binary_f1(au_labels[a], au_preds[a]);
    rep.per_au_f1.emplace_back(std::string(data::kAuNames[a]), f);
    au_sum += f;
  }
  rep.p_au = au_sum / double(kNumAus);
  rep.p_mtl = mtl_score(rep.p_va, rep.p_expr, rep.p_au);
  return rep;
}

MetricReport evaluate_lsd(std::span<const int> labels, std::span<const int> preds) {
  MetricReport rep;
  rep.task = data::Task::lsd;
  const auto names = data::class_names(data::Task::lsd);
  auto f1 = f1_scores(confusion(labels, preds, data::kLsdClasses));
  for (std::size_t c = 0; c < names.size(); ++c) rep.per_class_f1.emplace_back(names[c], f1.per_class[c]);
  rep.count_expr = labels.size();
  if (labels.empty()) rep.warnings.push_back("expr");
  rep.p_lsd = f1.macro;
  rep.p_expr = f1.macro;
  return rep;
}

std::string MetricReport::to_text(const std::string& prefix) const {
  std::string out;
  auto line = [&](const std::string& key, const std::string& value) { out += prefix + key + "=" + value + "\n"; };
  line("task", std::string(data::task_name(task)));
  if (task == data::Task::lsd) {
    line("p_lsd", format_fixed6(p_lsd));
    line("count_expr", std::to_string(count_expr));
    for (const auto& [name, f] : per_class_f1) line("f1_expr." + name, format_fixed6(f));
  } else {
    line("p_mtl", format_fixed6(p_mtl));
    line("p_va", format_fixed6(p_va));
    line("p_expr", format_fixed6(p_expr));
    line("p_au", format_fixed6(p_au));
    line("ccc_v", format_fixed6(ccc_v));
    line("ccc_a", format_fixed6(ccc_a));
    line("count_va", std::to_string(count_va));
    line("count_expr", std::to_string(count_expr));
    for (std::size_t a = 0; a < count_au.size(); ++a) line("count_au." + per_au_f1[a].first, std::to_string(count_au[a]));
    for (const auto& [name, f] : per_class_f1) line("f1_expr." + name, format_fixed6(f));
    for (const auto& [name, f] : per_au_f1) line("f1_au." + name, format_fixed6(f));
  }
  std::string w;
  for (const auto& s : warnings) w += (w.empty() ? "" : ";") + s;
  line("warnings", w.empty() ? "none" : w);
  return out;
}

}  // namespace affkit::metrics
