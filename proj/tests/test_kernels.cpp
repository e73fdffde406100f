#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "affkit/numkit/kernels.hpp"

using namespace affkit::numkit::kernels;

namespace {

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

class KernelThreads : public ::testing::TestWithParam<int> {
 protected:
  void SetUp() override {
    saved_ = max_threads();
    set_threads(GetParam());
  }
  void TearDown() override { set_threads(saved_); }
  int saved_ = 1;
};

}  // namespace

// The parallel variants must reproduce the serial reference exactly.
TEST_P(KernelThreads, MatmulVariantsAgreeBitwise) {
  const std::size_t m = 37, k = 29, n = 41;
  auto a = random_values(m * k, 1), b = random_values(k * n, 2);
  std::vector<float> cs(m * n), cp(m * n);
  serial::matmul<float>(a, b, cs, m, k, n);
  parallel::matmul<float>(a, b, cp, m, k, n);
  EXPECT_EQ(cs, cp);

  auto g = random_values(m * n, 3);
  std::vector<float> das(m * k, 0.5f), dap(m * k, 0.5f);
  serial::matmul_nt_acc<float>(g, b, das, m, n, k);
  parallel::matmul_nt_acc<float>(g, b, dap, m, n, k);
  EXPECT_EQ(das, dap);

  std::vector<float> dbs(k * n), dbp(k * n);
  serial::matmul_tn_acc<float>(a, g, dbs, k, m, n);
  parallel::matmul_tn_acc<float>(a, g, dbp, k, m, n);
  EXPECT_EQ(dbs, dbp);
}

TEST_P(KernelThreads, ConvVariantsAgreeBitwise) {
  ConvDims d{3, 4, 5, 10, 12};
  auto in = random_values(d.batch * d.in_channels * d.height * d.width, 4);
  auto k = random_values(d.out_channels * d.in_channels * 9, 5);
  auto bias = random_values(d.out_channels, 6);
  const std::size_t out_n = d.batch * d.out_channels * d.height * d.width;
  std::vector<float> os(out_n), op(out_n);
  serial::conv3x3_forward<float>(d, in, k, bias, os);
  parallel::conv3x3_forward<float>(d, in, k, bias, op);
  EXPECT_EQ(os, op);

  auto g = random_values(out_n, 7);
  std::vector<float> gis(in.size()), gip(in.size());
  serial::conv3x3_backward_input<float>(d, g, k, gis);
  parallel::conv3x3_backward_input<float>(d, g, k, gip);
  EXPECT_EQ(gis, gip);

  std::vector<float> gks(k.size()), gkp(k.size()), gbs(bias.size()), gbp(bias.size());
  serial::conv3x3_backward_params<float>(d, in, g, gks, gbs);
  parallel::conv3x3_backward_params<float>(d, in, g, gkp, gbp);
  EXPECT_EQ(gks, gkp);
  EXPECT_EQ(gbs, gbp);
}

INSTANTIATE_TEST_SUITE_P(Threads, KernelThreads, ::testing::Values(1, 2, 4));

TEST(Kernels, MatmulMatchesTripleLoop) {
  const std::size_t m = 5, k = 3, n = 4;
  auto a = random_values(m * k, 8), b = random_values(k * n, 9);
  std::vector<double> ref(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) ref[i * n + j] += double(a[i * k + p]) * double(b[p * n + j]);
  std::vector<float> c(m * n);
  matmul<float>(a, b, c, m, k, n);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-6);
}

// Transposed backward kernel equals conv of the gradient with flipped kernels:
// <conv(x), g> == <x, conv^T(g)> for any x, g.
TEST(Kernels, ConvBackwardIsAdjointOfForward) {
  ConvDims d{2, 3, 4, 6, 5};
  auto x = random_values(d.batch * d.in_channels * d.height * d.width, 10);
  auto k = random_values(d.out_channels * d.in_channels * 9, 11);
  std::vector<float> zero_bias(d.out_channels, 0.0f);
  auto g = random_values(d.batch * d.out_channels * d.height * d.width, 12);
  std::vector<float> y(g.size());
  serial::conv3x3_forward<float>(d, x, k, zero_bias, y);
  std::vector<float> gx(x.size(), 0.0f);
  serial::conv3x3_backward_input<float>(d, g, k, gx);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += double(y[i]) * g[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += double(x[i]) * gx[i];
  EXPECT_NEAR(lhs, rhs, 1e-4);
}
