#include <benchmark/benchmark.h>

#include "wt/ops.hpp"
#include "wt/rng.hpp"

using namespace wt;

namespace {

template <class T>
Tensor<T> rand_tensor(Shape shape, uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) (*t.data)[i] = static_cast<T>(rng.normal());
  return t;
}

void BM_matmul_f32(benchmark::State& state) {
  const int64_t n = state.range(0);
  auto a = rand_tensor<float>({n, n}, 1);
  auto b = rand_tensor<float>({n, n}, 2);
  for (auto _ : state) {
    auto c = matmul(a, b);
    benchmark::DoNotOptimize(c.values());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_matmul_f32)->Arg(256)->Arg(512)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
