#include <omp.h>

#include <random>
#include <vector>

#include "doctest.h"
#include "savs/kernels.hpp"
#include "test_util.hpp"

using namespace savs;
using namespace savs::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

struct Case {
  int h, w;
  ConvShape shape;
};

const Case kCases[] = {
    {64, 64, {4, 4, 3, 32}}, {16, 16, {3, 2, 32, 64}}, {7, 7, {1, 1, 64, 128}},
    {9, 11, {3, 1, 5, 6}},   {10, 10, {2, 3, 4, 7}},   {8, 8, {8, 8, 2, 3}},
};

}  // namespace

TEST_CASE("output extent of an unpadded strided convolution") {
  CHECK(conv_output_extent(64, 4, 4) == 16);
  CHECK(conv_output_extent(16, 3, 2) == 7);
  CHECK(conv_output_extent(7, 1, 1) == 7);
  CHECK(conv_output_extent(224, 4, 4) == 56);
  CHECK_THROWS_AS(conv_output_extent(3, 4, 1), std::invalid_argument);
  CHECK_THROWS_AS(conv_output_extent(8, 2, 0), std::invalid_argument);
}

TEST_CASE("single-channel convolution matches a hand computation") {
  FeatureMap in(3, 3, 1);
  in.values = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  const std::vector<double> w{1, 0, 0, -1};
  const std::vector<double> b{0.5};
  FeatureMap out;
  conv2d_forward(in, w, b, {2, 1, 1, 1}, out);
  REQUIRE(out.height == 2);
  REQUIRE(out.width == 2);
  // Each output is x[y][x] - x[y+1][x+1] + 0.5 = -4 + 0.5.
  for (double v : out.values) CHECK(v == -3.5);
}

TEST_CASE("parallel kernels agree bitwise with the serial reference") {
  std::mt19937_64 rng(17);
  for (int threads : {1, 3}) {
    omp_set_num_threads(threads);
    for (const auto& c : kCases) {
      CAPTURE(threads);
      CAPTURE(c.shape.kernel);
      CAPTURE(c.shape.stride);
      const FeatureMap in = testing::random_map(c.h, c.w, c.shape.in_channels, rng);
      const auto w = random_vec(c.shape.weight_count(), rng);
      const auto b = random_vec(c.shape.out_channels, rng);

      FeatureMap out_par, out_ref;
      conv2d_forward(in, w, b, c.shape, out_par);
      reference::conv2d_forward(in, w, b, c.shape, out_ref);
      CHECK(out_par == out_ref);

      FeatureMap g = testing::random_map(out_ref.height, out_ref.width, out_ref.channels, rng);
      // Sprinkle exact zeros, as a ReLU mask would.
      for (std::size_t i = 0; i < g.values.size(); i += 3) g.values[i] = 0.0;

      std::vector<double> dw_par(w.size(), 0.25), dw_ref(w.size(), 0.25);
      std::vector<double> db_par(b.size(), -1.0), db_ref(b.size(), -1.0);
      conv2d_backward_weight(in, g, c.shape, dw_par, db_par);
      reference::conv2d_backward_weight(in, g, c.shape, dw_ref, db_ref);
      CHECK(dw_par == dw_ref);
      CHECK(db_par == db_ref);

      FeatureMap din_par(c.h, c.w, c.shape.in_channels, 9.0), din_ref(c.h, c.w, c.shape.in_channels, 9.0);
      conv2d_backward_input(g, w, c.shape, din_par);
      reference::conv2d_backward_input(g, w, c.shape, din_ref);
      CHECK(din_par == din_ref);
    }
  }
  omp_set_num_threads(1);
}

TEST_CASE("input gradient is the adjoint of the forward map") {
  std::mt19937_64 rng(3);
  for (const auto& c : kCases) {
    const FeatureMap x = testing::random_map(c.h, c.w, c.shape.in_channels, rng);
    const auto w = random_vec(c.shape.weight_count(), rng);
    const std::vector<double> zero_bias(c.shape.out_channels, 0.0);
    FeatureMap y;
    conv2d_forward(x, w, zero_bias, c.shape, y);
    const FeatureMap g = testing::random_map(y.height, y.width, y.channels, rng);
    FeatureMap dx(c.h, c.w, c.shape.in_channels);
    conv2d_backward_input(g, w, c.shape, dx);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.values.size(); ++i) lhs += y.values[i] * g.values[i];
    for (std::size_t i = 0; i < x.values.size(); ++i) rhs += x.values[i] * dx.values[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("weight gradient matches finite differences") {
  std::mt19937_64 rng(5);
  const ConvShape shape{3, 2, 2, 3};
  const FeatureMap x = testing::random_map(7, 7, 2, rng);
  auto w = random_vec(shape.weight_count(), rng);
  const auto b = random_vec(3, rng);
  FeatureMap y;
  conv2d_forward(x, w, b, shape, y);
  const FeatureMap g = testing::random_map(y.height, y.width, y.channels, rng);
  auto objective = [&](const std::vector<double>& ww) {
    FeatureMap out;
    conv2d_forward(x, ww, b, shape, out);
    double s = 0;
    for (std::size_t i = 0; i < out.values.size(); ++i) s += out.values[i] * g.values[i];
    return s;
  };
  std::vector<double> dw(w.size(), 0.0), db(3, 0.0);
  conv2d_backward_weight(x, g, shape, dw, db);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double keep = w[i];
    w[i] = keep + 1e-6;
    const double up = objective(w);
    w[i] = keep - 1e-6;
    const double down = objective(w);
    w[i] = keep;
    CHECK(dw[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-6));
  }
  for (int co = 0; co < 3; ++co) {
    double s = 0;
    for (std::size_t p = 0; p < y.positions(); ++p) s += g.values[p * 3 + co];
    CHECK(db[co] == doctest::Approx(s));
  }
}

TEST_CASE("relu and its backward mask") {
  std::vector<double> v{-1.0, 0.0, 2.0, -0.0, 3.5};
  const std::vector<double> pre = v;
  relu_inplace(v);
  CHECK(v == std::vector<double>{0.0, 0.0, 2.0, 0.0, 3.5});
  std::vector<double> g{1, 1, 1, 1, 1};
  relu_backward(pre, g);
  CHECK(g == std::vector<double>{0, 0, 1, 0, 1});
}

TEST_CASE("shape errors are reported") {
  FeatureMap in(4, 4, 2);
  FeatureMap out;
  const std::vector<double> w(ConvShape{2, 2, 3, 1}.weight_count(), 0.0);
  const std::vector<double> b(1, 0.0);
  CHECK_THROWS_AS(conv2d_forward(in, w, b, {2, 2, 3, 1}, out), std::invalid_argument);
  const std::vector<double> w2(5, 0.0);
  CHECK_THROWS_AS(conv2d_forward(in, w2, b, {2, 2, 2, 1}, out), std::invalid_argument);
}
