// Serial reference vs OpenMP kernels on shapes typical of a denoiser batch.

#include <benchmark/benchmark.h>

#include <vector>

#include "rldif/core.hpp"
#include "rldif/kernels.hpp"

namespace {

using namespace rldif;

std::vector<double> filled(size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform() - 0.5;
  return v;
}

using MatmulFn = void (*)(std::span<const double>, std::span<const double>, std::span<double>, size_t, size_t,
                          size_t);

template <MatmulFn Fn>
void bm_matmul(benchmark::State& state) {
  const auto n = static_cast<size_t>(state.range(0)), k = static_cast<size_t>(state.range(1)),
             m = static_cast<size_t>(state.range(2));
  const auto a = filled(n * k, 1), b = filled(k * m, 2);
  std::vector<double> c(n * m);
  for (auto _ : state) {
    Fn(a, b, c, n, k, m);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * n * k * m));
}

template <MatmulFn Fn>
void bm_at_b(benchmark::State& state) {
  const auto n = static_cast<size_t>(state.range(0)), k = static_cast<size_t>(state.range(1)),
             m = static_cast<size_t>(state.range(2));
  const auto a = filled(n * k, 1), g = filled(n * m, 2);
  std::vector<double> c(k * m);
  for (auto _ : state) {
    Fn(a, g, c, n, k, m);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * n * k * m));
}

template <MatmulFn Fn>
void bm_a_bt(benchmark::State& state) {
  const auto n = static_cast<size_t>(state.range(0)), k = static_cast<size_t>(state.range(1)),
             m = static_cast<size_t>(state.range(2));
  const auto g = filled(n * m, 1), b = filled(k * m, 2);
  std::vector<double> c(n * k);
  for (auto _ : state) {
    Fn(g, b, c, n, k, m);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * n * k * m));
}

using DistFn = void (*)(std::span<const Vec3>, std::span<double>);

template <DistFn Fn>
void bm_pairwise(benchmark::State& state) {
  const auto n = static_cast<size_t>(state.range(0));
  const auto raw = filled(3 * n, 3);
  std::vector<Vec3> p(n);
  for (size_t i = 0; i < n; ++i) p[i] = {30 * raw[3 * i], 30 * raw[3 * i + 1], 30 * raw[3 * i + 2]};
  std::vector<double> d(n * n);
  for (auto _ : state) {
    Fn(p, d);
    benchmark::DoNotOptimize(d.data());
  }
}

// Rows: edges of a 16-replica batch (45 residues, k = 8) and node rows of one replica.
void shapes(benchmark::internal::Benchmark* b) {
  b->Args({5760, 128, 64})->Args({720, 128, 64})->Args({45, 256, 64})->Args({256, 256, 256});
}

}  // namespace

BENCHMARK(bm_matmul<rldif::kernels::matmul_serial>)->Name("matmul/serial")->Apply(shapes);
BENCHMARK(bm_matmul<rldif::kernels::matmul_parallel>)->Name("matmul/parallel")->Apply(shapes);
BENCHMARK(bm_at_b<rldif::kernels::matmul_at_b_acc_serial>)->Name("matmul_at_b/serial")->Apply(shapes);
BENCHMARK(bm_at_b<rldif::kernels::matmul_at_b_acc_parallel>)->Name("matmul_at_b/parallel")->Apply(shapes);
BENCHMARK(bm_a_bt<rldif::kernels::matmul_a_bt_acc_serial>)->Name("matmul_a_bt/serial")->Apply(shapes);
BENCHMARK(bm_a_bt<rldif::kernels::matmul_a_bt_acc_parallel>)->Name("matmul_a_bt/parallel")->Apply(shapes);
BENCHMARK(bm_pairwise<rldif::kernels::pairwise_sq_dist_serial>)->Name("pairwise_sq_dist/serial")->Arg(60)->Arg(500);
BENCHMARK(bm_pairwise<rldif::kernels::pairwise_sq_dist_parallel>)->Name("pairwise_sq_dist/parallel")->Arg(60)->Arg(500);

BENCHMARK_MAIN();
