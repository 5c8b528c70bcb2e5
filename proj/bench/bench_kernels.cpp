#include <benchmark/benchmark.h>

#include "dpkfc/kernels.hpp"
#include "dpkfc/linalg.hpp"
#include "dpkfc/matrix.hpp"
#include "dpkfc/rng.hpp"

using namespace dpkfc;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

template <auto Fn>
void bm_gemm_nn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  Matrix c(n, n);
  for (auto _ : state) {
    Fn(n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <auto Fn>
void bm_gram(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix x = random_matrix(4 * n, n, 3);
  Matrix c(n, n);
  for (auto _ : state) {
    Fn(4 * n, n, x.data(), 1.0 / static_cast<double>(4 * n), c.data());
    benchmark::DoNotOptimize(c.data());
  }
}

void bm_sym_eig(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix x = random_matrix(2 * n, n, 4);
  const Matrix a = matmul_tn(x, x);
  for (auto _ : state) benchmark::DoNotOptimize(sym_eig(a));
}

}  // namespace

BENCHMARK(bm_gemm_nn<kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(bm_gemm_nn<kernels::parallel::gemm_nn>)->Name("gemm_nn/parallel")->Arg(64)->Arg(256);
BENCHMARK(bm_gram<kernels::serial::gram>)->Name("gram/serial")->Arg(64)->Arg(256);
BENCHMARK(bm_gram<kernels::parallel::gram>)->Name("gram/parallel")->Arg(64)->Arg(256);
BENCHMARK(bm_sym_eig)->Arg(32)->Arg(128);

BENCHMARK_MAIN();
