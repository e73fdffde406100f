#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "affkit/finite_diff.hpp"
#include "affkit/losses.hpp"

using namespace affkit;
using namespace affkit::numkit;
using namespace affkit::losses;

namespace {

Tensor<float> random_probs(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  std::vector<float> logits(rows * cols);
  for (auto& v : logits) v = float(dist(rng));
  Tape<float> tape;
  return softmax_rows(tape, Tensor<float>({rows, cols}, logits));
}

std::vector<float> random_sequence(std::size_t n, std::mt19937_64& rng, double scale = 1.0, double shift = 0.0) {
  std::normal_distribution<double> dist(shift, scale);
  std::vector<float> v(n);
  for (auto& x : v) x = float(dist(rng));
  return v;
}

// Textbook CCC written from the raw-sum form, independent of the loss code.
double ccc_oracle(const std::vector<double>& p, const std::vector<double>& t) {
  const double n = double(p.size());
  double sp = 0, st = 0, spp = 0, stt = 0, spt = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sp += p[i];
    st += t[i];
    spp += p[i] * p[i];
    stt += t[i] * t[i];
    spt += p[i] * t[i];
  }
  const double mp = sp / n, mt = st / n;
  const double vp = spp / n - mp * mp, vt = stt / n - mt * mt, cov = spt / n - mp * mt;
  return 2 * cov / (vp + vt + (mp - mt) * (mp - mt) + 1e-8);
}

float ccc_value(const std::vector<float>& p, const std::vector<float>& t) {
  Tape<float> tape;
  return ccc(tape, Tensor<float>({p.size()}, p), Tensor<float>({t.size()}, t)).item();
}

}  // namespace

TEST(WeightedCrossEntropy, UniformPredictionIsLn2) {
  Tape<float> tape;
  std::vector<int> labels{0};
  std::vector<double> w{1, 1};
  EXPECT_NEAR(weighted_cross_entropy(tape, Tensor<float>({1, 2}, {0.5f, 0.5f}), labels, w).item(), std::log(2.0), 1e-6);
}

TEST(WeightedCrossEntropy, PerfectPredictionIsZero) {
  Tape<float> tape;
  std::vector<int> labels{1};
  std::vector<double> w{3, 7, 2};
  EXPECT_NEAR(weighted_cross_entropy(tape, Tensor<float>({1, 3}, {0.0f, 1.0f - 1e-12f, 0.0f}), labels, w).item(), 0.0,
              1e-6);
}

TEST(WeightedCrossEntropy, DirectEvaluation) {
  Tape<float> tape;
  std::vector<int> labels{1};
  std::vector<double> w{2, 0.5, 1};
  // 0.5 * -ln(0.5)
  EXPECT_NEAR(weighted_cross_entropy(tape, Tensor<float>({1, 3}, {0.2f, 0.5f, 0.3f}), labels, w).item(), 0.34657359,
              1e-6);
}

TEST(WeightedCrossEntropy, RejectsBadInputs) {
  Tape<float> tape;
  auto p = Tensor<float>({1, 3}, {0.2f, 0.5f, 0.3f});
  std::vector<int> bad{3};
  std::vector<double> w3{1, 1, 1}, w2{1, 1};
  EXPECT_THROW(weighted_cross_entropy(tape, p, bad, w3), ValidationError);
  std::vector<int> good{0};
  EXPECT_THROW(weighted_cross_entropy(tape, p, good, w2), ValidationError);
  EXPECT_THROW(weighted_cross_entropy(tape, Tensor<float>({1, 3}, {0.2f, 0.2f, 0.2f}), good, w3), ValidationError);
}

TEST(WeightedCrossEntropy, AllOnesWeightsIsStandardCrossEntropy) {
  auto p = random_probs(8, 5, 3);
  std::vector<int> labels{0, 1, 2, 3, 4, 0, 1, 2};
  std::vector<double> ones(5, 1.0);
  Tape<float> tape;
  double expected = 0;
  for (std::size_t b = 0; b < 8; ++b) expected -= std::log(double(p.at(b * 5 + labels[b])));
  expected /= 8;
  EXPECT_NEAR(weighted_cross_entropy(tape, p, labels, ones).item(), expected, 1e-6);
}

TEST(SmoothedCrossEntropy, ZeroEpsilonIsBitIdenticalToWeighted) {
  auto p = random_probs(6, 6, 17);
  std::vector<int> labels{5, 4, 3, 2, 1, 0};
  std::vector<double> w{1.5, 0.5, 1.0, 2.0, 0.25, 0.75};
  Tape<float> tape;
  const float a = weighted_cross_entropy(tape, p, labels, w).item();
  const float b = smoothed_cross_entropy(tape, p, labels, SmoothingConfig{0.0, 6}, w).item();
  EXPECT_EQ(std::bit_cast<std::uint32_t>(a), std::bit_cast<std::uint32_t>(b));
}

TEST(SmoothedCrossEntropy, TargetsAtDefaultEpsilon) {
  SmoothingConfig cfg{0.2, 6};
  auto q = cfg.targets(2);
  EXPECT_NEAR(q[2], 1.0 - 0.2 + 0.2 / 6, 1e-15);
  EXPECT_NEAR(q[2], 0.8333333333333334, 1e-12);
  for (std::size_t i = 0; i < 6; ++i)
    if (i != 2) EXPECT_NEAR(q[i], 0.0333333333333333, 1e-12);
  EXPECT_NEAR(std::accumulate(q.begin(), q.end(), 0.0), 1.0, 1e-9);
  EXPECT_DOUBLE_EQ(*std::min_element(q.begin(), q.end()), 0.2 / 6);
}

TEST(SmoothedCrossEntropy, UniformProbabilitiesGiveLnC) {
  for (double eps : {0.0, 0.1, 0.2, 0.9}) {
    Tape<float> tape;
    std::vector<int> labels{0, 3};
    auto p = Tensor<float>::full({2, 6}, 1.0f / 6.0f);
    EXPECT_NEAR(smoothed_cross_entropy(tape, p, labels, SmoothingConfig{eps, 6}).item(), std::log(6.0), 1e-6);
  }
}

TEST(SmoothedCrossEntropy, RejectsEpsilonOutsideRange) {
  Tape<float> tape;
  std::vector<int> labels{0};
  auto p = Tensor<float>({1, 2}, {0.5f, 0.5f});
  EXPECT_THROW(smoothed_cross_entropy(tape, p, labels, SmoothingConfig{1.0, 2}), ValidationError);
  EXPECT_THROW(smoothed_cross_entropy(tape, p, labels, SmoothingConfig{-0.1, 2}), ValidationError);
}

TEST(Ccc, PerfectConcordance) {
  std::vector<float> x{-0.8f, -0.1f, 0.3f, 0.9f, 0.2f};
  EXPECT_NEAR(ccc_value(x, x), 1.0, 1e-6);
}

TEST(Ccc, HandEvaluatedExample) {
  EXPECT_NEAR(ccc_value({-0.5f, 0.0f, 0.5f}, {-1.0f, 0.0f, 1.0f}), 0.8, 1e-6);
}

TEST(Ccc, EqualConstantsGiveZero) {
  EXPECT_EQ(ccc_value({0.3f, 0.3f, 0.3f}, {0.3f, 0.3f, 0.3f}), 0.0f);
}

TEST(Ccc, RejectsShortOrMismatched) {
  Tape<float> tape;
  EXPECT_THROW(ccc(tape, Tensor<float>({1}, {0.1f}), Tensor<float>({1}, {0.2f})), ValidationError);
  EXPECT_THROW(ccc(tape, Tensor<float>({2}, {0.1f, 0.2f}), Tensor<float>({3}, {0.2f, 0.1f, 0.0f})), ValidationError);
}

TEST(Ccc, MatchesRawSumOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_sequence(64, rng, 0.5, 0.1);
    auto t = random_sequence(64, rng, 0.4, -0.1);
    std::vector<double> pd(p.begin(), p.end()), td(t.begin(), t.end());
    EXPECT_NEAR(ccc_value(p, t), ccc_oracle(pd, td), 1e-6);
  }
}

TEST(Ccc, SymmetricAndBounded) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + trial % 30;
    auto a = random_sequence(n, rng, 1.0 + trial % 3, trial % 5 - 2.0);
    auto b = random_sequence(n, rng, 0.5, 0.0);
    const float ab = ccc_value(a, b), ba = ccc_value(b, a);
    EXPECT_NEAR(ab, ba, 1e-7);
    EXPECT_GE(ab, -1.0 - 1e-6);
    EXPECT_LE(ab, 1.0 + 1e-6);
  }
}

TEST(VaLoss, PerfectIsZero) {
  Tape<float> tape;
  auto v = Tensor<float>({4}, {-0.5f, 0.1f, 0.4f, 0.9f});
  auto a = Tensor<float>({4}, {0.2f, -0.3f, 0.6f, 0.0f});
  EXPECT_NEAR(va_loss(tape, v, v, a, a).item(), 0.0, 1e-6);
}

TEST(VaLoss, ComposesCccExamples) {
  Tape<float> tape;
  auto p = Tensor<float>({3}, {-0.5f, 0.0f, 0.5f});
  auto t = Tensor<float>({3}, {-1.0f, 0.0f, 1.0f});
  EXPECT_NEAR(va_loss(tape, p, t, p, t).item(), 0.4, 1e-6);
}

TEST(VaLoss, AntiConcordantIsFour) {
  Tape<float> tape;
  auto t = Tensor<float>({4}, {-0.6f, -0.2f, 0.2f, 0.6f});
  auto p = neg(tape, t);
  EXPECT_NEAR(va_loss(tape, p, t, p, t).item(), 4.0, 1e-6);
}

TEST(VaLoss, LengthMismatchRejected) {
  Tape<float> tape;
  auto a = Tensor<float>({3}, {0, 1, 2});
  auto b = Tensor<float>({2}, {0, 1});
  EXPECT_THROW(va_loss(tape, a, a, b, b), ValidationError);
}

TEST(WeightedBce, Values) {
  Tape<float> tape;
  std::vector<double> w1{1.0};
  EXPECT_NEAR(weighted_bce(tape, Tensor<float>({1, 1}, {0.5f}), Tensor<float>({1, 1}, {0.0f}), w1).item(),
              std::log(2.0), 1e-6);
  std::vector<double> w4{4.0};
  EXPECT_NEAR(weighted_bce(tape, Tensor<float>({1, 1}, {0.5f}), Tensor<float>({1, 1}, {1.0f}), w4).item(),
              4.0 * std::log(2.0), 1e-6);
  std::vector<double> w3{2.0, 3.0, 0.5};
  EXPECT_NEAR(weighted_bce(tape, Tensor<float>({1, 3}, {1.0f, 0.0f, 1.0f}), Tensor<float>({1, 3}, {1.0f, 0.0f, 1.0f}),
                           w3)
                  .item(),
              0.0, 1e-6);
}

TEST(WeightedBce, WeightMultipliesOnlyPositiveTerm) {
  Tape<float> tape;
  std::vector<double> w{10.0};
  // Negative label: weight must not matter.
  EXPECT_NEAR(weighted_bce(tape, Tensor<float>({1, 1}, {0.3f}), Tensor<float>({1, 1}, {0.0f}), w).item(),
              -std::log(0.7), 1e-6);
}

TEST(WeightedBce, RejectsNonBinaryLabels) {
  Tape<float> tape;
  std::vector<double> w{1.0, 1.0};
  EXPECT_THROW(weighted_bce(tape, Tensor<float>({1, 2}, {0.3f, 0.4f}), Tensor<float>({1, 2}, {1.0f, -1.0f}), w),
               ValidationError);
}

TEST(MtlTotal, PlainSum) {
  EXPECT_EQ(mtl_total(0, 0, 0).total, 0.0);
  EXPECT_NEAR(mtl_total(0.5, 0.4, 1.1).total, 2.0, 1e-12);
  try {
    mtl_total(0.1, std::nan(""), 0.2);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("va"), std::string::npos);
  }
}

TEST(MtlTotal, GradientIsSumOfTaskGradients) {
  Tape<double> ref_tape;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<double> wv(4 * 3);
  for (auto& v : wv) v = d(rng);
  std::vector<double> xv(5 * 4);
  for (auto& v : xv) v = d(rng);
  const Tensor<double> x({5, 4}, xv);
  std::vector<int> labels{0, 1, 2, 0, 1};
  std::vector<double> cw{1.0, 2.0, 0.5};
  auto task_losses = [&](Tape<double>& tape, const Tensor<double>& w) {
    auto logits = matmul(tape, x, w);
    auto probs = softmax_rows(tape, logits);
    auto le = weighted_cross_entropy(tape, probs, labels, cw);
    auto lv = va_loss(tape, select_column(tape, logits, 0), select_column(tape, x, 0), select_column(tape, logits, 1),
                      select_column(tape, x, 1));
    std::vector<double> au_labels{1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1, 1, 1, 0};
    std::vector<double> pw{1.5, 0.7, 2.0};
    auto la = weighted_bce(tape, sigmoid(tape, logits), Tensor<double>({5, 3}, au_labels), pw);
    return std::array<Tensor<double>, 3>{le, lv, la};
  };
  auto grad_of = [&](int which) {
    Tape<double> tape;
    Tensor<double> w({4, 3}, wv);
    auto ww = tape.watch(w);
    auto l = task_losses(tape, ww);
    if (which < 0) {
      auto total = mtl_total(tape, l[0], l[1], l[2]);
      EXPECT_NEAR(total.breakdown.total, total.breakdown.l_expr + total.breakdown.l_va + total.breakdown.l_au, 1e-12);
      tape.backward(total.total);
    } else {
      tape.backward(l[std::size_t(which)]);
    }
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  auto total = grad_of(-1);
  auto g0 = grad_of(0), g1 = grad_of(1), g2 = grad_of(2);
  for (std::size_t i = 0; i < total.size(); ++i) EXPECT_NEAR(total[i], g0[i] + g1[i] + g2[i], 1e-12);
}

TEST(Properties, LossesAreNonNegative) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_probs(4, 6, std::uint64_t(trial));
    std::vector<int> labels{trial % 6, (trial + 1) % 6, (trial + 2) % 6, (trial + 3) % 6};
    Tape<float> tape;
    EXPECT_GE(smoothed_cross_entropy(tape, p, labels, SmoothingConfig{0.2, 6}).item(), 0.0f);
    auto a = random_sequence(8, rng), b = random_sequence(8, rng);
    auto ta = Tensor<float>({8}, a), tb = Tensor<float>({8}, b);
    EXPECT_GE(va_loss(tape, ta, tb, tb, ta).item(), 0.0f);
    std::vector<double> pw(6, 2.0);
    std::vector<float> lab(24);
    for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = float((i + std::size_t(trial)) % 2);
    EXPECT_GE(weighted_bce(tape, p, Tensor<float>({4, 6}, lab), pw).item(), 0.0f);
  }
}

TEST(Properties, GradientsMatchFiniteDifferences) {
  std::vector<int> labels{0, 2, 1, 2};
  std::vector<double> cw{1.2, 0.4, 1.4};
  std::vector<double> pw{3.0, 0.5, 1.0};
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<float> d(-1, 1);
  std::vector<float> lv(12), pv(8), tv(8), aul(12);
  for (auto& v : lv) v = d(rng);
  for (auto& v : pv) v = d(rng);
  for (auto& v : tv) v = d(rng);
  for (std::size_t i = 0; i < aul.size(); ++i) aul[i] = float(i % 3 == 0);
  const Tensor<float> logits({4, 3}, lv), pred({8}, pv), truth({8}, tv);

  auto ce = finite_diff::check("weighted_ce", {logits}, [&](auto& t, const auto& in) {
    return weighted_cross_entropy(t, softmax_rows(t, in[0]), labels, cw);
  });
  auto sce = finite_diff::check("smoothed_ce", {logits}, [&](auto& t, const auto& in) {
    return smoothed_cross_entropy(t, softmax_rows(t, in[0]), labels, SmoothingConfig{0.2, 3}, cw);
  });
  auto cc = finite_diff::check("ccc", {pred, truth}, [&](auto& t, const auto& in) {
    return ccc(t, in[0], in[1]);
  });
  auto va = finite_diff::check("va", {pred, truth}, [&](auto& t, const auto& in) {
    return va_loss(t, in[0], in[1], in[1], in[0]);
  });
  auto bce = finite_diff::check("bce", {logits}, [&](auto& t, const auto& in) {
    using T = typename std::decay_t<decltype(in[0])>::value_type;
    std::vector<T> y(aul.begin(), aul.end());
    return weighted_bce(t, sigmoid(t, in[0]), Tensor<T>({4, 3}, y), pw);
  });
  for (const auto& r : {ce, sce, cc, va, bce}) EXPECT_TRUE(r.passed) << r.component << " " << r.max_relative_error;
}
