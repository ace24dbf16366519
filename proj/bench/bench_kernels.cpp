// Parallel kernels against the serial reference on the desk backbone's shapes.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cmssl/kernels.hpp"

namespace {

using cmssl::kernels::ConvGeom;

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> d(0.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

ConvGeom geom_for(int layer, int batch) {
  // Desk backbone conv shapes: stem, first block (a, b), second block (a, b).
  switch (layer) {
    case 0: return {batch, 1, 28, 28, 8, 3, 2, 1};
    case 1: return {batch, 8, 14, 14, 16, 3, 2, 1};
    case 2: return {batch, 16, 7, 7, 16, 3, 1, 1};
    case 3: return {batch, 16, 7, 7, 32, 3, 2, 1};
    default: return {batch, 32, 4, 4, 32, 3, 1, 1};
  }
}

template <bool Reference>
void BM_ConvForward(benchmark::State& state) {
  const ConvGeom g = geom_for(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const auto x = random_vec(static_cast<std::size_t>(g.n) * g.in_size(), 1);
  const auto w = random_vec(g.weight_size(), 2);
  std::vector<float> y(static_cast<std::size_t>(g.n) * g.out_size());
  for (auto _ : state) {
    if constexpr (Reference)
      cmssl::kernels::reference::conv2d_forward<float>(g, x, w, y);
    else
      cmssl::kernels::conv2d_forward<float>(g, x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
  const double flops = 2.0 * g.n * g.out_h() * g.out_w() * g.cout * g.cin * g.k * g.k;
  state.counters["GFLOP/s"] =
      benchmark::Counter(flops, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Reference>
void BM_ConvBackward(benchmark::State& state) {
  const ConvGeom g = geom_for(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const auto x = random_vec(static_cast<std::size_t>(g.n) * g.in_size(), 1);
  const auto w = random_vec(g.weight_size(), 2);
  const auto dy = random_vec(static_cast<std::size_t>(g.n) * g.out_size(), 3);
  std::vector<float> dx(x.size()), dw(w.size());
  for (auto _ : state) {
    if constexpr (Reference)
      cmssl::kernels::reference::conv2d_backward<float>(g, x, w, dy, dx, dw);
    else
      cmssl::kernels::conv2d_backward<float>(g, x, w, dy, dx, dw);
    benchmark::DoNotOptimize(dw.data());
  }
  const double flops = 4.0 * g.n * g.out_h() * g.out_w() * g.cout * g.cin * g.k * g.k;
  state.counters["GFLOP/s"] =
      benchmark::Counter(flops, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

void conv_args(benchmark::internal::Benchmark* b) {
  for (int layer = 0; layer < 5; ++layer) b->Args({layer, 256});
}

void BM_BatchNormTrain(benchmark::State& state) {
  const int n = 256, c = 16, hw = 196;
  const auto x = random_vec(static_cast<std::size_t>(n) * c * hw, 4);
  std::vector<float> gamma(c, 1.f), beta(c, 0.f), y(x.size()), mean(c), invstd(c);
  for (auto _ : state) {
    if (state.range(0))
      cmssl::kernels::reference::batchnorm_forward_train<float>(n, c, hw, x, gamma, beta, 1e-5f, y,
                                                                mean, invstd);
    else
      cmssl::kernels::batchnorm_forward_train<float>(n, c, hw, x, gamma, beta, 1e-5f, y, mean,
                                                     invstd);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Apply(conv_args)->Name("conv_forward/parallel");
BENCHMARK(BM_ConvForward<true>)->Apply(conv_args)->Name("conv_forward/reference");
BENCHMARK(BM_ConvBackward<false>)->Apply(conv_args)->Name("conv_backward/parallel");
BENCHMARK(BM_ConvBackward<true>)->Apply(conv_args)->Name("conv_backward/reference");
BENCHMARK(BM_BatchNormTrain)->Arg(0)->Arg(1)->Name("batchnorm_train");

BENCHMARK_MAIN();
