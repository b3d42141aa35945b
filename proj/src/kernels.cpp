#include "savs/kernels.hpp"

#include <stdexcept>
#include <string>

namespace savs::kernels {

namespace {

void check_forward_args(const FeatureMap& in, std::span<const double> weight, std::span<const double> bias,
                        const ConvShape& shape) {
  if (in.channels != shape.in_channels) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(in.channels) + " channels, expected " +
                                std::to_string(shape.in_channels));
  }
  if (weight.size() != shape.weight_count() || bias.size() != static_cast<std::size_t>(shape.out_channels)) {
    throw std::invalid_argument("conv2d: parameter size mismatch");
  }
}

FeatureMap make_output(const FeatureMap& in, const ConvShape& shape) {
  return FeatureMap(conv_output_extent(in.height, shape.kernel, shape.stride),
                    conv_output_extent(in.width, shape.kernel, shape.stride), shape.out_channels);
}

}  // namespace

int conv_output_extent(int input, int kernel, int stride) {
  if (kernel < 1 || stride < 1 || input < kernel) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kernel) + " does not fit input extent " +
                                std::to_string(input));
  }
  return (input - kernel) / stride + 1;
}

void conv2d_forward(const FeatureMap& in, std::span<const double> weight, std::span<const double> bias,
                    const ConvShape& shape, FeatureMap& out) {
  check_forward_args(in, weight, bias, shape);
  out = make_output(in, shape);
  const int k = shape.kernel, s = shape.stride, cin = shape.in_channels, cout = shape.out_channels;
  const int ow = out.width;
  const int npos = out.height * out.width;
  const std::size_t row = static_cast<std::size_t>(in.width) * cin;

#pragma omp parallel for schedule(static)
  for (int pos = 0; pos < npos; ++pos) {
    const int oy = pos / ow, ox = pos % ow;
    const double* base = in.values.data() + static_cast<std::size_t>(oy * s) * row + static_cast<std::size_t>(ox * s) * cin;
    double* dst = out.values.data() + static_cast<std::size_t>(pos) * cout;
    for (int co = 0; co < cout; ++co) {
      const double* w = weight.data() + static_cast<std::size_t>(co) * k * k * cin;
      double acc = bias[co];
      for (int ky = 0; ky < k; ++ky) {
        const double* src = base + ky * row;
        for (int j = 0; j < k * cin; ++j) acc += w[j] * src[j];
        w += k * cin;
      }
      dst[co] = acc;
    }
  }
}

void conv2d_backward_weight(const FeatureMap& in, const FeatureMap& dout, const ConvShape& shape,
                            std::span<double> dweight, std::span<double> dbias) {
  const int k = shape.kernel, s = shape.stride, cin = shape.in_channels, cout = shape.out_channels;
  if (dout.channels != cout || dweight.size() != shape.weight_count()) {
    throw std::invalid_argument("conv2d_backward_weight: shape mismatch");
  }
  const int ow = dout.width;
  const int npos = dout.height * dout.width;
  const std::size_t row = static_cast<std::size_t>(in.width) * cin;

#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    double* dw = dweight.data() + static_cast<std::size_t>(co) * k * k * cin;
    for (int pos = 0; pos < npos; ++pos) {
      const double g = dout.values[static_cast<std::size_t>(pos) * cout + co];
      dbias[co] += g;
      if (g == 0.0) continue;
      const int oy = pos / ow, ox = pos % ow;
      const double* base =
          in.values.data() + static_cast<std::size_t>(oy * s) * row + static_cast<std::size_t>(ox * s) * cin;
      for (int ky = 0; ky < k; ++ky) {
        const double* src = base + ky * row;
        double* d = dw + static_cast<std::size_t>(ky) * k * cin;
        for (int j = 0; j < k * cin; ++j) d[j] += g * src[j];
      }
    }
  }
}

void conv2d_backward_input(const FeatureMap& dout, std::span<const double> weight, const ConvShape& shape,
                           FeatureMap& din) {
  const int k = shape.kernel, s = shape.stride, cin = shape.in_channels, cout = shape.out_channels;
  if (din.channels != cin || dout.channels != cout) {
    throw std::invalid_argument("conv2d_backward_input: shape mismatch");
  }
  const int iw = din.width;
  const int npos = din.height * din.width;

  // Gather form: for an input pixel, visit contributing outputs in ascending
  // (oy, ox) order, which is the scatter order of the reference loop.
#pragma omp parallel for schedule(static)
  for (int pos = 0; pos < npos; ++pos) {
    const int iy = pos / iw, ix = pos % iw;
    double* d = din.values.data() + static_cast<std::size_t>(pos) * cin;
    for (int c = 0; c < cin; ++c) d[c] = 0.0;
    for (int ky = k - 1; ky >= 0; --ky) {
      const int ty = iy - ky;
      if (ty < 0 || ty % s != 0 || ty / s >= dout.height) continue;
      const int oy = ty / s;
      for (int kx = k - 1; kx >= 0; --kx) {
        const int tx = ix - kx;
        if (tx < 0 || tx % s != 0 || tx / s >= dout.width) continue;
        const int ox = tx / s;
        const double* g = dout.values.data() + (static_cast<std::size_t>(oy) * dout.width + ox) * cout;
        for (int co = 0; co < cout; ++co) {
          if (g[co] == 0.0) continue;
          const double* w = weight.data() + ((static_cast<std::size_t>(co) * k + ky) * k + kx) * cin;
          for (int c = 0; c < cin; ++c) d[c] += g[co] * w[c];
        }
      }
    }
  }
}

void relu_inplace(std::span<double> values) {
  for (double& v : values) v = v > 0.0 ? v : 0.0;
}

void relu_backward(std::span<const double> pre_activation, std::span<double> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(pre_activation[i] > 0.0)) grad[i] = 0.0;
  }
}

namespace reference {

void conv2d_forward(const FeatureMap& in, std::span<const double> weight, std::span<const double> bias,
                    const ConvShape& shape, FeatureMap& out) {
  check_forward_args(in, weight, bias, shape);
  out = make_output(in, shape);
  const int k = shape.kernel, s = shape.stride, cin = shape.in_channels;
  for (int oy = 0; oy < out.height; ++oy) {
    for (int ox = 0; ox < out.width; ++ox) {
      for (int co = 0; co < shape.out_channels; ++co) {
        double acc = bias[co];
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            for (int ci = 0; ci < cin; ++ci) {
              acc += weight[((static_cast<std::size_t>(co) * k + ky) * k + kx) * cin + ci] *
                     in.at(oy * s + ky, ox * s + kx, ci);
            }
          }
        }
        out.at(oy, ox, co) = acc;
      }
    }
  }
}

void conv2d_backward_weight(const FeatureMap& in, const FeatureMap& dout, const ConvShape& shape,
                            std::span<double> dweight, std::span<double> dbias) {
  const int k = shape.kernel, s = shape.stride, cin = shape.in_channels;
  for (int oy = 0; oy < dout.height; ++oy) {
    for (int ox = 0; ox < dout.width; ++ox) {
      for (int co = 0; co < shape.out_channels; ++co) {
        const double g = dout.at(oy, ox, co);
        dbias[co] += g;
        if (g == 0.0) continue;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            for (int ci = 0; ci < cin; ++ci) {
              dweight[((static_cast<std::size_t>(co) * k + ky) * k + kx) * cin + ci] +=
                  g * in.at(oy * s + ky, ox * s + kx, ci);
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_input(const FeatureMap& dout, std::span<const double> weight, const ConvShape& shape,
                           FeatureMap& din) {
  const int k = shape.kernel, s = shape.stride, cin = shape.in_channels;
  std::fill(din.values.begin(), din.values.end(), 0.0);
  for (int oy = 0; oy < dout.height; ++oy) {
    for (int ox = 0; ox < dout.width; ++ox) {
      for (int co = 0; co < shape.out_channels; ++co) {
        const double g = dout.at(oy, ox, co);
        if (g == 0.0) continue;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            for (int ci = 0; ci < cin; ++ci) {
              din.at(oy * s + ky, ox * s + kx, ci) +=
                  g * weight[((static_cast<std::size_t>(co) * k + ky) * k + kx) * cin + ci];
            }
          }
        }
      }
    }
  }
}

}  // namespace reference

}  // namespace savs::kernels
