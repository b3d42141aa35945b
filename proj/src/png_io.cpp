#include "savs/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace savs {

namespace {

std::vector<std::uint8_t> decode(const std::filesystem::path& path, png_uint_32 format, int& height, int& width) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw std::runtime_error("cannot read PNG " + path.string() + ": " + image.message);
  }
  if (format == PNG_FORMAT_GRAY && (image.format & PNG_FORMAT_FLAG_COLOR)) {
    png_image_free(&image);
    throw std::runtime_error(path.string() + ": expected a single-channel mask");
  }
  image.format = format;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + image.message);
  }
  height = static_cast<int>(image.height);
  width = static_cast<int>(image.width);
  return bytes;
}

void encode(const std::filesystem::path& path, int height, int width, png_uint_32 format, const std::uint8_t* data) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr)) {
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace

Image read_rgb_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto bytes = decode(path, PNG_FORMAT_RGB, h, w);
  Image img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

void write_rgb_png(const std::filesystem::path& path, const Image& img) {
  std::vector<std::uint8_t> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(img.pixels[i], 0.0, 1.0);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  encode(path, img.height, img.width, PNG_FORMAT_RGB, bytes.data());
}

RawLabelMap read_label_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto bytes = decode(path, PNG_FORMAT_GRAY, h, w);
  RawLabelMap m(h, w);
  m.values = std::move(bytes);
  return m;
}

void write_gray_png_bytes(const std::filesystem::path& path, int height, int width, const std::uint8_t* data) {
  encode(path, height, width, PNG_FORMAT_GRAY, data);
}

}  // namespace savs
