// Serial reference kernels against the OpenMP kernels on training-sized shapes.

#include <benchmark/benchmark.h>

#include <vector>

#include "dcal/kernels.hpp"
#include "dcal/rng.hpp"

namespace k = dcal::kernels;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  dcal::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

// rows, in_channels, out_channels, side
k::ConvShape conv_shape(const benchmark::State& st) {
  return {static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1)),
          static_cast<std::size_t>(st.range(2)), static_cast<std::size_t>(st.range(3)),
          static_cast<std::size_t>(st.range(3))};
}

void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({512, 3, 16, 16})->Args({512, 16, 16, 8})->Args({64, 32, 32, 16})->Unit(benchmark::kMillisecond);
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& st) {
  const auto s = conv_shape(st);
  const auto x = filled(s.input_size(), 1), w = filled(s.kernel_size(), 2);
  std::vector<double> y(s.output_size());
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::conv3x3_forward(s, x, w, y);
    else k::reference::conv3x3_forward(s, x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
  st.SetItemsProcessed(static_cast<int64_t>(st.iterations() * s.output_size() * s.in_channels * 9));
}

template <bool Parallel>
void BM_ConvBackwardInput(benchmark::State& st) {
  const auto s = conv_shape(st);
  const auto dy = filled(s.output_size(), 3), w = filled(s.kernel_size(), 4);
  std::vector<double> dx(s.input_size());
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::conv3x3_backward_input(s, dy, w, dx);
    else k::reference::conv3x3_backward_input(s, dy, w, dx);
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Parallel>
void BM_ConvBackwardKernel(benchmark::State& st) {
  const auto s = conv_shape(st);
  const auto x = filled(s.input_size(), 5), dy = filled(s.output_size(), 6);
  std::vector<double> dk(s.kernel_size());
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::conv3x3_backward_kernel(s, x, dy, dk);
    else k::reference::conv3x3_backward_kernel(s, x, dy, dk);
    benchmark::DoNotOptimize(dk.data());
  }
}

template <bool Parallel>
void BM_DenseForward(benchmark::State& st) {
  const k::DenseShape s{static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1)),
                        static_cast<std::size_t>(st.range(2))};
  const auto x = filled(s.rows * s.in, 7), w = filled(s.out * s.in, 8);
  std::vector<double> y(s.rows * s.out);
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::dense_forward(s, x, w, y);
    else k::reference::dense_forward(s, x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_Matmul(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = filled(n * n, 9), b = filled(n * n, 10);
  std::vector<double> c(n * n);
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::matmul(n, n, n, a, b, c);
    else k::reference::matmul(n, n, n, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(static_cast<int64_t>(st.iterations() * 2 * n * n * n));
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Apply(conv_args);
BENCHMARK(BM_ConvForward<true>)->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<false>)->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<true>)->Apply(conv_args);
BENCHMARK(BM_ConvBackwardKernel<false>)->Apply(conv_args);
BENCHMARK(BM_ConvBackwardKernel<true>)->Apply(conv_args);
BENCHMARK(BM_DenseForward<false>)->Args({512, 16, 10})->Args({256, 256, 256});
BENCHMARK(BM_DenseForward<true>)->Args({512, 16, 10})->Args({256, 256, 256});
BENCHMARK(BM_Matmul<false>)->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
