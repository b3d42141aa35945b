#pragma once

#include <filesystem>

#include "savs/image.hpp"

namespace savs {

/// 8-bit RGB (palette/gray/alpha inputs are converted); values scaled to [0,1].
Image read_rgb_png(const std::filesystem::path& path);
/// Quantises to 8 bits with rounding and clamping.
void write_rgb_png(const std::filesystem::path& path, const Image& img);

/// 8-bit single channel; multi-channel files are rejected.
RawLabelMap read_label_png(const std::filesystem::path& path);
template <typename Tag>
void write_label_png(const std::filesystem::path& path, const LabelGrid<Tag>& grid);

void write_gray_png_bytes(const std::filesystem::path& path, int height, int width, const std::uint8_t* data);

template <typename Tag>
void write_label_png(const std::filesystem::path& path, const LabelGrid<Tag>& grid) {
  write_gray_png_bytes(path, grid.height, grid.width, grid.values.data());
}

}  // namespace savs
