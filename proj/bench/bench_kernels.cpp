// Serial reference loops against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "affkit/numkit/kernels.hpp"

namespace k = affkit::numkit::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::matmul<float>(a, b, c, n, n, n);
    else
      k::serial::matmul<float>(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * std::int64_t(n * n * n));
  state.counters["threads"] = k::max_threads();
}

template <bool Parallel>
void BM_Conv3x3(benchmark::State& state) {
  k::ConvDims d;
  d.batch = 32;
  d.in_channels = std::size_t(state.range(0));
  d.out_channels = std::size_t(state.range(0)) * 2;
  d.height = d.width = 16;
  const auto in = random_vec(d.batch * d.in_channels * d.height * d.width, 3);
  const auto w = random_vec(d.out_channels * d.in_channels * 9, 4);
  const auto bias = random_vec(d.out_channels, 5);
  std::vector<float> out(d.batch * d.out_channels * d.height * d.width);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::conv3x3_forward<float>(d, in, w, bias, out);
    else
      k::serial::conv3x3_forward<float>(d, in, w, bias, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * std::int64_t(k::conv_work(d)));
  state.counters["threads"] = k::max_threads();
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/parallel")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Conv3x3<false>)->Name("conv3x3/serial")->Arg(3)->Arg(8);
BENCHMARK(BM_Conv3x3<true>)->Name("conv3x3/parallel")->Arg(3)->Arg(8);

BENCHMARK_MAIN();
