// Parallel kernels against the serial reference on the toy extractor's layer shapes.

#include <benchmark/benchmark.h>

#include <random>

#include "savs/kernels.hpp"

using namespace savs;
using savs::kernels::ConvShape;

namespace {

struct Layer {
  int size, kernel, stride, cin, cout;
};

// Toy 64x64 stack: k4s4c32, k3s2c64, k1s1c128.
constexpr Layer kLayers[] = {{64, 4, 4, 3, 32}, {16, 3, 2, 32, 64}, {7, 1, 1, 64, 128}};

struct Fixture {
  ConvShape shape;
  FeatureMap in, out, dout, din;
  std::vector<double> weight, bias, dweight, dbias;

  explicit Fixture(const Layer& l) {
    shape = {l.kernel, l.stride, l.cin, l.cout};
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    in = FeatureMap(l.size, l.size, l.cin);
    for (double& v : in.values) v = u(rng);
    const int o = kernels::conv_output_extent(l.size, l.kernel, l.stride);
    dout = FeatureMap(o, o, l.cout);
    for (double& v : dout.values) v = u(rng);
    weight.resize(shape.weight_count());
    for (double& v : weight) v = u(rng);
    bias.assign(l.cout, 0.1);
    dweight.assign(weight.size(), 0.0);
    dbias.assign(l.cout, 0.0);
    din = FeatureMap(l.size, l.size, l.cin);
  }
};

template <bool kParallel>
void BM_Forward(benchmark::State& state) {
  Fixture f(kLayers[state.range(0)]);
  for (auto _ : state) {
    if constexpr (kParallel) kernels::conv2d_forward(f.in, f.weight, f.bias, f.shape, f.out);
    else kernels::reference::conv2d_forward(f.in, f.weight, f.bias, f.shape, f.out);
    benchmark::DoNotOptimize(f.out.values.data());
  }
}

template <bool kParallel>
void BM_BackwardWeight(benchmark::State& state) {
  Fixture f(kLayers[state.range(0)]);
  for (auto _ : state) {
    if constexpr (kParallel) kernels::conv2d_backward_weight(f.in, f.dout, f.shape, f.dweight, f.dbias);
    else kernels::reference::conv2d_backward_weight(f.in, f.dout, f.shape, f.dweight, f.dbias);
    benchmark::DoNotOptimize(f.dweight.data());
  }
}

template <bool kParallel>
void BM_BackwardInput(benchmark::State& state) {
  Fixture f(kLayers[state.range(0)]);
  for (auto _ : state) {
    if constexpr (kParallel) kernels::conv2d_backward_input(f.dout, f.weight, f.shape, f.din);
    else kernels::reference::conv2d_backward_input(f.dout, f.weight, f.shape, f.din);
    benchmark::DoNotOptimize(f.din.values.data());
  }
}

}  // namespace

BENCHMARK(BM_Forward<false>)->Name("forward/reference")->DenseRange(0, 2);
BENCHMARK(BM_Forward<true>)->Name("forward/parallel")->DenseRange(0, 2);
BENCHMARK(BM_BackwardWeight<false>)->Name("backward_weight/reference")->DenseRange(0, 2);
BENCHMARK(BM_BackwardWeight<true>)->Name("backward_weight/parallel")->DenseRange(0, 2);
BENCHMARK(BM_BackwardInput<false>)->Name("backward_input/reference")->DenseRange(0, 2);
BENCHMARK(BM_BackwardInput<true>)->Name("backward_input/parallel")->DenseRange(0, 2);

BENCHMARK_MAIN();
