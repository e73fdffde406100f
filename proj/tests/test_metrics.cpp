#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "affkit/error.hpp"
#include "affkit/losses.hpp"
#include "affkit/metrics.hpp"
#include "mtl_fixture.hpp"

using namespace affkit;
using namespace affkit::metrics;

TEST(Confusion, Basics) {
  std::vector<int> y{0, 1, 2, 2};
  auto diag = confusion(y, y, 3);
  EXPECT_EQ(diag.at(0, 0), 1u);
  EXPECT_EQ(diag.at(2, 2), 2u);
  EXPECT_EQ(diag.total(), 4u);
  auto empty = confusion({}, {}, 4);
  EXPECT_EQ(empty.total(), 0u);
  EXPECT_EQ(empty.counts.size(), 16u);
}

TEST(Confusion, HandCount) {
  std::vector<int> y{0, 0, 1, 1, 2}, p{0, 1, 1, 1, 2};
  auto cm = confusion(y, p, 3);
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.at(1, 1), 2u);
  EXPECT_EQ(cm.at(2, 2), 1u);
  EXPECT_EQ(cm.total(), 5u);
  auto f = f1_scores(cm);
  EXPECT_NEAR(f.per_class[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(f.per_class[1], 0.8, 1e-12);
  EXPECT_NEAR(f.per_class[2], 1.0, 1e-12);
  EXPECT_NEAR(f.macro, 0.8222, 1e-4);
}

TEST(Confusion, RejectsOutOfRange) {
  std::vector<int> y{0, 3}, p{0, 1};
  EXPECT_THROW(confusion(y, p, 3), ValidationError);
  std::vector<int> q{0, -1};
  EXPECT_THROW(confusion(p, q, 3), ValidationError);
}

TEST(F1, PerfectAndAbsentClasses) {
  std::vector<int> y{0, 1, 2};
  auto f = f1_scores(confusion(y, y, 3));
  EXPECT_EQ(f.macro, 1.0);
  // class 3 never appears: counts as 0 in the macro.
  auto g = f1_scores(confusion(y, y, 4));
  EXPECT_DOUBLE_EQ(g.macro, 0.75);
}

TEST(F1, TableTwoEnsembleRow) {
  std::vector<double> row{0.7532, 0.7441, 0.5631, 0.8431, 0.6731, 0.7144};
  EXPECT_NEAR(macro_mean(row), 0.7152, 5e-5);
}

TEST(BinaryF1, Cases) {
  std::vector<int> a{1, 0, 1};
  EXPECT_EQ(binary_f1(a, a), 1.0);
  std::vector<int> z{0, 0, 0};
  EXPECT_EQ(binary_f1(z, z), 0.0);
  std::vector<int> y{1, 1, 0, 0}, p{1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(binary_f1(y, p), 0.5);
  std::vector<int> shorter{1};
  EXPECT_THROW(binary_f1(y, shorter), ValidationError);
}

TEST(CccMetric, Examples) {
  // The stabilizer costs 1e-8 / (2 var); large spread keeps that below 1e-9.
  std::vector<double> x{-3.0, 1.0, 4.0, -5.0, 2.5};
  EXPECT_NEAR(ccc_metric(x, x), 1.0, 1e-9);
  std::vector<double> small{-0.3, 0.1, 0.9, -0.5};
  EXPECT_NEAR(ccc_metric(small, small), 1.0, 1e-7);
  std::vector<double> p{-0.5, 0, 0.5}, t{-1, 0, 1};
  EXPECT_NEAR(ccc_metric(p, t), 0.8, 1e-7);
}

TEST(CccMetric, ShiftedStandardizedData) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::vector<double> t(500);
  for (auto& v : t) v = nd(rng);
  double m = std::accumulate(t.begin(), t.end(), 0.0) / 500;
  for (auto& v : t) v -= m;
  double var = 0;
  for (double v : t) var += v * v;
  for (auto& v : t) v /= std::sqrt(var / 500);
  for (double c : {0.0, 0.5, 1.0, 2.0}) {
    std::vector<double> p(t);
    for (auto& v : p) v += c;
    EXPECT_NEAR(ccc_metric(p, t), 2.0 / (2.0 + c * c), 1e-7);
  }
}

TEST(CccMetric, AgreesWithLossForward) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-1, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> pf(32), tf(32);
    for (auto& v : pf) v = u(rng);
    for (auto& v : tf) v = 0.5f * u(rng) + 0.1f;
    std::vector<double> pd(pf.begin(), pf.end()), td(tf.begin(), tf.end());
    numkit::Tape<float> tape;
    const float loss_value = losses::ccc(tape, numkit::Tensor<float>({32}, pf), numkit::Tensor<float>({32}, tf)).item();
    EXPECT_NEAR(ccc_metric(pd, td), loss_value, 1e-6);
  }
}

TEST(EvaluateMtl, TableOneAggregation) {
  EXPECT_NEAR(mtl_score(0.3648, 0.2617, 0.4737), 1.1002, 1e-4);
}

TEST(EvaluateMtl, PerfectPredictionsScoreThree) {
  std::vector<data::SampleRecord> recs;
  std::vector<MtlPrediction> preds;
  for (int i = 0; i < 16; ++i) {
    data::SampleRecord r;
    r.image_path = "x";
    r.valence = -0.8 + 0.1 * i;
    r.arousal = 0.7 - 0.09 * i;
    r.expression = i % 8;
    for (std::size_t a = 0; a < data::kNumAus; ++a) r.aus[a] = int((i + a) % 2);
    recs.push_back(r);
    preds.push_back(MtlPrediction{r.valence, r.arousal, r.expression, r.aus});
  }
  auto rep = evaluate_mtl(recs, preds);
  EXPECT_NEAR(rep.p_mtl, 3.0, 1e-6);
  EXPECT_TRUE(rep.warnings.empty());
}

TEST(EvaluateMtl, MatchesBruteForceScorer) {
  auto f = affkit::testing::mtl_fixture();
  auto rep = evaluate_mtl(f.records, f.preds);
  auto ref = affkit::testing::brute_score(f);
  EXPECT_NEAR(rep.ccc_v, ref.ccc_v, 1e-9);
  EXPECT_NEAR(rep.ccc_a, ref.ccc_a, 1e-9);
  EXPECT_NEAR(rep.p_va, ref.p_va, 1e-9);
  EXPECT_NEAR(rep.p_expr, ref.p_expr, 1e-9);
  EXPECT_NEAR(rep.p_au, ref.p_au, 1e-9);
  EXPECT_NEAR(rep.p_mtl, ref.p_mtl, 1e-9);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(rep.per_class_f1[c].second, ref.f1_expr[c], 1e-9);
  for (std::size_t a = 0; a < 12; ++a) EXPECT_NEAR(rep.per_au_f1[a].second, ref.f1_au[a], 1e-9);
  EXPECT_EQ(rep.count_va, 14u);
  EXPECT_EQ(rep.count_expr, 17u);
  EXPECT_EQ(rep.count_au[11], 0u);
  EXPECT_EQ(rep.warnings, std::vector<std::string>{"au:au26"});
  EXPECT_NEAR(rep.p_mtl, rep.p_va + rep.p_expr + rep.p_au, 1e-6);
}

TEST(EvaluateMtl, EmptyTasksWarnAndScoreZero) {
  std::vector<data::SampleRecord> recs(3);
  std::vector<MtlPrediction> preds(3);
  for (auto& r : recs) r.image_path = "x";
  auto rep = evaluate_mtl(recs, preds);
  EXPECT_EQ(rep.p_mtl, 0.0);
  EXPECT_EQ(rep.warnings.size(), 2u + data::kNumAus);
  EXPECT_NE(rep.to_text().find("warnings=va;expr;au:au1"), std::string::npos);
}

TEST(EvaluateMtl, PermutationInvariance) {
  auto f = affkit::testing::mtl_fixture();
  auto base = evaluate_mtl(f.records, f.preds);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> idx(f.records.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    affkit::testing::MtlFixture g;
    for (auto i : idx) {
      g.records.push_back(f.records[i]);
      g.preds.push_back(f.preds[i]);
    }
    auto rep = evaluate_mtl(g.records, g.preds);
    EXPECT_NEAR(rep.p_mtl, base.p_mtl, 1e-12);
    EXPECT_EQ(rep.per_class_f1, base.per_class_f1);
    EXPECT_EQ(rep.per_au_f1, base.per_au_f1);
  }
}

TEST(EvaluateLsd, PerfectRandomAndRelabeling) {
  std::vector<int> y{0, 1, 2, 3, 4, 5, 5};
  EXPECT_EQ(evaluate_lsd(y, y).p_lsd, 1.0);

  std::mt19937_64 rng(11);
  std::vector<int> labels(6000), preds(6000);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = int(i % 6);
    preds[i] = int(rng() % 6);
  }
  auto rep = evaluate_lsd(labels, preds);
  EXPECT_NEAR(rep.p_lsd, 1.0 / 6.0, 0.02);

  const int perm[6] = {3, 5, 0, 1, 4, 2};
  std::vector<int> pl(labels.size()), pp(preds.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pl[i] = perm[labels[i]];
    pp[i] = perm[preds[i]];
  }
  auto permuted = f1_scores(confusion(pl, pp, 6));
  auto orig = f1_scores(confusion(labels, preds, 6));
  for (int c = 0; c < 6; ++c) EXPECT_EQ(permuted.per_class[std::size_t(perm[c])], orig.per_class[std::size_t(c)]);
  EXPECT_NEAR(permuted.macro, orig.macro, 1e-15);
}

TEST(Report, TextFormat) {
  std::vector<int> y{0, 1, 2, 3, 4, 5};
  auto text = evaluate_lsd(y, y).to_text();
  EXPECT_EQ(text.substr(0, 27), "task=lsd\np_lsd=1.000000\ncou");
  EXPECT_NE(text.find("f1_expr.Surprise=1.000000\n"), std::string::npos);
  EXPECT_NE(text.find("warnings=none\n"), std::string::npos);
}
