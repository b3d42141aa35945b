#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

namespace savs {

/// h×w×C activation grid, channels interleaved (HWC).
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> values;

  FeatureMap() = default;
  FeatureMap(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), values(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t positions() const { return static_cast<std::size_t>(height) * width; }
  double& at(int y, int x, int c) { return values[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const FeatureMap&) const = default;
};

using Embedding = std::vector<double>;

/// Named parameter array. Shape is informational for the archive codec;
/// data is always flat.
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::string n, std::vector<int> s)
      : name(std::move(n)), shape(std::move(s)), data(element_count(shape), 0.0) {}

  static std::size_t element_count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }
  bool operator==(const Tensor&) const = default;
};

}  // namespace savs
