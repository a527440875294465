// SPDX-License-Identifier: Apache-2.0
// Serial reference vs OpenMP kernels. Both variants produce identical bits;
// only wall time differs.
#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>
#include <vector>

#include "instatune/data.hpp"
#include "instatune/kernels.hpp"
#include "instatune/space.hpp"
#include "instatune/train.hpp"

using namespace instatune;
using namespace instatune::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  const ConstMat A{a.data(), n, n, n}, B{b.data(), n, n, n};
  const Mat C{c.data(), n, n, n};
  for (auto _ : state) {
    if constexpr (Parallel)
      gemm_parallel(A, Trans::no, B, Trans::no, C, false);
    else
      gemm_serial(A, Trans::no, B, Trans::no, C, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = std::size_t{64};
  auto x = random_values(rows * cols, 3);
  std::vector<double> y(rows * cols);
  const ConstMat X{x.data(), rows, cols, cols};
  const Mat Y{y.data(), rows, cols, cols};
  for (auto _ : state) {
    if constexpr (Parallel)
      softmax_rows_parallel(X, Y);
    else
      softmax_rows_serial(X, Y);
    benchmark::DoNotOptimize(y.data());
  }
}

// Held-out evaluation of one sub-network; chunks are the parallel unit.
template <bool Parallel>
void BM_Evaluate(benchmark::State& state) {
  const SearchSpace space = preset("desk").space;
  const auto params = init_supernet(space.dims(), 0);
  const auto data = make_marker_task(space.dims(), 512, 1);
  const int threads = omp_get_max_threads();
  omp_set_num_threads(Parallel ? threads : 1);
  set_backend(Parallel ? Backend::automatic : Backend::serial);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(params, space.maximal(), data, 64));
  omp_set_num_threads(threads);
  set_backend(Backend::automatic);
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_Softmax<false>)->Name("softmax/serial")->Range(64, 4096);
BENCHMARK(BM_Softmax<true>)->Name("softmax/parallel")->Range(64, 4096);
BENCHMARK(BM_Evaluate<false>)->Name("evaluate/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Evaluate<true>)->Name("evaluate/parallel")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
