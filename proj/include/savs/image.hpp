#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace savs {

/// Row-major H×W grid of small integer labels.
template <typename Tag>
struct LabelGrid {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  LabelGrid() = default;
  LabelGrid(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return values.size(); }
  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  bool same_shape(int h, int w) const { return height == h && width == w; }
  bool operator==(const LabelGrid&) const = default;
};

struct RawLabelTag {};
struct SemanticTag {};
struct BinaryTag {};

/// Labels in a parser's native label space.
using RawLabelMap = LabelGrid<RawLabelTag>;
/// Labels in the canonical seven-class space, see CanonicalClass.
using SemanticMap = LabelGrid<SemanticTag>;
/// 0/1 per pixel.
using BinaryMask = LabelGrid<BinaryTag>;

enum CanonicalClass : std::uint8_t {
  kBackground = 0,
  kHead = 1,
  kTorso = 2,
  kPants = 3,
  kArms = 4,
  kLegs = 5,
  kBelongings = 6,
};
inline constexpr int kNumCanonicalClasses = 7;

using Rgb = std::array<double, 3>;

/// H×W×3 image, interleaved channels, values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  std::size_t num_pixels() const { return static_cast<std::size_t>(height) * width; }
  Rgb pixel(std::size_t i) const { return {pixels[3 * i], pixels[3 * i + 1], pixels[3 * i + 2]}; }
  void set_pixel(std::size_t i, const Rgb& c) {
    pixels[3 * i] = c[0];
    pixels[3 * i + 1] = c[1];
    pixels[3 * i + 2] = c[2];
  }
  bool operator==(const Image&) const = default;
};

template <typename Tag>
void require_same_shape(const Image& img, const LabelGrid<Tag>& grid, const char* what) {
  if (!grid.same_shape(img.height, img.width)) {
    throw std::invalid_argument(std::string(what) + ": image is " + std::to_string(img.height) + "x" +
                                std::to_string(img.width) + " but map is " + std::to_string(grid.height) +
                                "x" + std::to_string(grid.width));
  }
}

}  // namespace savs
