#pragma once

#include <span>

#include "savs/tensor.hpp"

// Convolution kernels used by the feature extractors. The top-level functions
// are OpenMP-parallel; savs::kernels::reference holds straight serial loops
// kept as the test oracle and the benchmark baseline. Each output element is
// accumulated in the same order on both paths, so results agree bitwise for
// any thread count.
namespace savs::kernels {

/// Unpadded strided square convolution. Weights are laid out
/// [out_channels][kernel][kernel][in_channels].
struct ConvShape {
  int kernel = 1;
  int stride = 1;
  int in_channels = 1;
  int out_channels = 1;

  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * kernel * kernel * in_channels;
  }
};

/// Output extent along one axis; throws if the kernel does not fit.
int conv_output_extent(int input, int kernel, int stride);

void conv2d_forward(const FeatureMap& in, std::span<const double> weight, std::span<const double> bias,
                    const ConvShape& shape, FeatureMap& out);

/// Accumulates into dweight and dbias.
void conv2d_backward_weight(const FeatureMap& in, const FeatureMap& dout, const ConvShape& shape,
                            std::span<double> dweight, std::span<double> dbias);

/// Overwrites din, which must already have the input's dimensions.
void conv2d_backward_input(const FeatureMap& dout, std::span<const double> weight, const ConvShape& shape,
                           FeatureMap& din);

void relu_inplace(std::span<double> values);
/// Zeroes grad wherever the pre-activation was not positive.
void relu_backward(std::span<const double> pre_activation, std::span<double> grad);

namespace reference {

void conv2d_forward(const FeatureMap& in, std::span<const double> weight, std::span<const double> bias,
                    const ConvShape& shape, FeatureMap& out);
void conv2d_backward_weight(const FeatureMap& in, const FeatureMap& dout, const ConvShape& shape,
                            std::span<double> dweight, std::span<double> dbias);
void conv2d_backward_input(const FeatureMap& dout, std::span<const double> weight, const ConvShape& shape,
                           FeatureMap& din);

}  // namespace reference

}  // namespace savs::kernels
