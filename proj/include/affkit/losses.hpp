#pragma once

// Training objectives for the three affect tasks.
//
// Probabilities (softmax rows, sigmoid outputs) are the interchange format,
// so classification losses take probabilities and clamp the log argument at
// kLogFloor. Batch reduction is the mean over the rows handed in; callers
// that mask unlabeled rows pass only the labeled subset.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "affkit/numkit/ops.hpp"

namespace affkit::losses {

using numkit::Tape;
using numkit::Tensor;

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kCccStabilizer = 1e-8;
inline constexpr double kSimplexTolerance = 1e-5;

struct LossBreakdown {
  double l_expr = 0.0;
  double l_va = 0.0;
  double l_au = 0.0;
  double total = 0.0;
};

/// Mixture of the one-hot target with a uniform distribution over C classes.
struct SmoothingConfig {
  double epsilon = 0.0;
  std::size_t num_classes = 0;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon < 1.0))
      throw ValidationError("label smoothing epsilon must lie in [0,1), got " + std::to_string(epsilon));
    if (num_classes == 0) throw ValidationError("label smoothing needs at least one class");
  }

  /// (1 - eps) * onehot(label) + eps / C
  std::vector<double> targets(int label) const {
    validate();
    std::vector<double> q(num_classes, epsilon / double(num_classes));
    q.at(std::size_t(label)) += 1.0 - epsilon;
    return q;
  }
};

namespace detail {

template <class T>
void check_probability_rows(const Tensor<T>& probs, std::span<const int> labels, std::size_t classes) {
  if (probs.rank() != 2) throw ValidationError("class probabilities must be [B,C], got " + numkit::to_string(probs.shape()));
  if (probs.dim(0) != labels.size())
    throw ValidationError("probabilities have " + std::to_string(probs.dim(0)) + " rows but " +
                          std::to_string(labels.size()) + " labels were given");
  if (probs.dim(1) != classes)
    throw ValidationError("probabilities have " + std::to_string(probs.dim(1)) + " classes, weights/config expect " +
                          std::to_string(classes));
  auto v = probs.values();
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] < 0 || std::size_t(labels[b]) >= classes)
      throw ValidationError("label " + std::to_string(labels[b]) + " out of range [0," + std::to_string(classes) + ")");
    double total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += double(v[b * classes + c]);
    if (std::abs(total - 1.0) > kSimplexTolerance)
      throw ValidationError("probability row " + std::to_string(b) + " sums to " + std::to_string(total));
  }
}

// -(1/B) * sum_{b,i} target[b,i] * log(max(p[b,i], floor))
template <class T>
Tensor<T> target_cross_entropy(Tape<T>& tape, const Tensor<T>& probs, std::vector<T> target) {
  const std::size_t batch = probs.dim(0);
  auto logp = numkit::log_clamped(tape, probs, kLogFloor);
  auto weighted = numkit::mul(tape, logp, Tensor<T>(probs.shape(), std::move(target)));
  return numkit::scale(tape, numkit::sum(tape, weighted), T(-1.0 / double(batch)));
}

}  // namespace detail

/// Label-smoothed, optionally class-weighted cross entropy:
/// mean over the batch of -sum_i w_i * q_i * log p_i. Empty `weights` means
/// all ones. With epsilon = 0 this is exactly weighted_cross_entropy.
template <class T>
Tensor<T> smoothed_cross_entropy(Tape<T>& tape, const Tensor<T>& probs, std::span<const int> labels,
                                 const SmoothingConfig& cfg, std::span<const double> weights = {}) {
  cfg.validate();
  if (!weights.empty() && weights.size() != cfg.num_classes)
    throw ValidationError("class weight count " + std::to_string(weights.size()) + " does not match " +
                          std::to_string(cfg.num_classes) + " classes");
  detail::check_probability_rows(probs, labels, cfg.num_classes);
  if (labels.empty()) throw ValidationError("cross entropy over an empty batch");
  const std::size_t C = cfg.num_classes;
  std::vector<T> target(labels.size() * C);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto q = cfg.targets(labels[b]);
    for (std::size_t i = 0; i < C; ++i) target[b * C + i] = T((weights.empty() ? 1.0 : weights[i]) * q[i]);
  }
  return detail::target_cross_entropy(tape, probs, std::move(target));
}

/// Class-weighted cross entropy: mean over the batch of -w_{y_b} log p[b, y_b].
template <class T>
Tensor<T> weighted_cross_entropy(Tape<T>& tape, const Tensor<T>& probs, std::span<const int> labels,
                                 std::span<const double> weights) {
  if (weights.empty()) throw ValidationError("weighted cross entropy needs one weight per class");
  return smoothed_cross_entropy(tape, probs, labels, SmoothingConfig{0.0, weights.size()}, weights);
}

/// Concordance correlation coefficient with population moments:
///   2 cov(p,t) / (var p + var t + (mean p - mean t)^2 + 1e-8)
/// Moments are accumulated in 64-bit. Two equal constant sequences give 0.
template <class T>
Tensor<T> ccc(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& truth) {
  const std::size_t n = pred.size();
  if (truth.size() != n)
    throw ValidationError("ccc length mismatch: " + std::to_string(n) + " vs " + std::to_string(truth.size()));
  if (n < 2) throw ValidationError("ccc needs at least 2 samples, got " + std::to_string(n));
  auto pv = pred.values();
  auto tv = truth.values();
  double mp = 0, mt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mp += double(pv[i]);
    mt += double(tv[i]);
  }
  mp /= double(n);
  mt /= double(n);
  double sp = 0, st = 0, spt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dp = double(pv[i]) - mp, dt = double(tv[i]) - mt;
    sp += dp * dp;
    st += dt * dt;
    spt += dp * dt;
  }
  sp /= double(n);
  st /= double(n);
  spt /= double(n);
  const double denom = sp + st + (mp - mt) * (mp - mt) + kCccStabilizer;
  const double value = 2.0 * spt / denom;
  return tape.record({}, {T(value)}, {pred, truth},
                     [pred, truth, n, mp, mt, spt, denom](std::span<const T> g, auto& gin) {
                       auto pv = pred.values();
                       auto tv = truth.values();
                       const double go = double(g[0]);
                       const double inv_n = 1.0 / double(n);
                       const double shift = mp - mt;
                       const double k = 2.0 * spt / (denom * denom);
                       for (std::size_t i = 0; i < n; ++i) {
                         const double dp = double(pv[i]) - mp, dt = double(tv[i]) - mt;
                         if (!gin[0].empty()) {
                           const double d = 2.0 * dt * inv_n / denom - k * (2.0 * dp * inv_n + 2.0 * shift * inv_n);
                           gin[0][i] += T(go * d);
                         }
                         if (!gin[1].empty()) {
                           const double d = 2.0 * dp * inv_n / denom - k * (2.0 * dt * inv_n - 2.0 * shift * inv_n);
                           gin[1][i] += T(go * d);
                         }
                       }
                     });
}

/// (1 - CCC_valence) + (1 - CCC_arousal), in [0, 4].
template <class T>
Tensor<T> va_loss(Tape<T>& tape, const Tensor<T>& pred_v, const Tensor<T>& truth_v, const Tensor<T>& pred_a,
                  const Tensor<T>& truth_a) {
  const std::size_t n = pred_v.size();
  if (truth_v.size() != n || pred_a.size() != n || truth_a.size() != n)
    throw ValidationError("va_loss needs four sequences of equal length");
  auto cv = ccc(tape, pred_v, truth_v);
  auto ca = ccc(tape, pred_a, truth_a);
  return numkit::add_scalar(tape, numkit::neg(tape, numkit::add(tape, cv, ca)), T(2));
}

/// Binary cross entropy with the per-AU weight on the positive term only:
/// mean over the batch of sum_i -[w_i y_i log p_i + (1 - y_i) log(1 - p_i)].
/// Labels must be 0/1; unlabeled entries are the caller's job to drop.
template <class T>
Tensor<T> weighted_bce(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& labels,
                       std::span<const double> pos_weights) {
  if (probs.rank() != 2) throw ValidationError("weighted_bce expects [B,U] probabilities, got " + numkit::to_string(probs.shape()));
  if (labels.shape() != probs.shape())
    throw ValidationError("weighted_bce label shape " + numkit::to_string(labels.shape()) + " vs probabilities " +
                          numkit::to_string(probs.shape()));
  const std::size_t batch = probs.dim(0), units = probs.dim(1);
  if (pos_weights.size() != units)
    throw ValidationError("weighted_bce needs " + std::to_string(units) + " positive weights, got " +
                          std::to_string(pos_weights.size()));
  if (batch == 0) throw ValidationError("weighted_bce over an empty batch");
  auto lv = labels.values();
  std::vector<T> pos(lv.size()), negw(lv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < units; ++i) {
      const T y = lv[b * units + i];
      if (y != T(0) && y != T(1))
        throw ValidationError("weighted_bce label at row " + std::to_string(b) + ", unit " + std::to_string(i) +
                              " is not binary");
      pos[b * units + i] = T(pos_weights[i] * double(y));
      negw[b * units + i] = T(1) - y;
    }
  }
  auto log_p = numkit::log_clamped(tape, probs, kLogFloor);
  auto log_q = numkit::log_clamped(tape, numkit::add_scalar(tape, numkit::neg(tape, probs), T(1)), kLogFloor);
  auto positive = numkit::sum(tape, numkit::mul(tape, log_p, Tensor<T>(probs.shape(), std::move(pos))));
  auto negative = numkit::sum(tape, numkit::mul(tape, log_q, Tensor<T>(probs.shape(), std::move(negw))));
  return numkit::scale(tape, numkit::add(tape, positive, negative), T(-1.0 / double(batch)));
}

template <class T>
struct MtlLoss {
  Tensor<T> total;
  LossBreakdown breakdown;
};

/// Unweighted sum of the three task losses.
inline LossBreakdown mtl_total(double l_expr, double l_va, double l_au) {
  const char* names[] = {"expr", "va", "au"};
  const double values[] = {l_expr, l_va, l_au};
  for (int i = 0; i < 3; ++i)
    if (!std::isfinite(values[i])) throw ValidationError(std::string("non-finite ") + names[i] + " loss");
  return {l_expr, l_va, l_au, l_expr + l_va + l_au};
}

template <class T>
MtlLoss<T> mtl_total(Tape<T>& tape, const Tensor<T>& l_expr, const Tensor<T>& l_va, const Tensor<T>& l_au) {
  for (const auto* t : {&l_expr, &l_va, &l_au})
    if (!t->is_scalar()) throw ValidationError("task losses must be scalars");
  auto breakdown = mtl_total(double(l_expr.item()), double(l_va.item()), double(l_au.item()));
  return {numkit::add(tape, numkit::add(tape, l_expr, l_va), l_au), breakdown};
}

}  // namespace affkit::losses
