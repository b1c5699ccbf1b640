#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gazeclr/errors.hpp"

namespace gazeclr {

/// RGB image with interleaved float channels in [0, 1], row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // height * width * 3

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool empty() const noexcept { return data.empty(); }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
};

/// 8-bit RGB image as stored on disk; the compact form kept in memory caches.
struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Image to_float() const {
    Image out(height, width);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<float>(data[i]) / 255.0f;
    return out;
  }

  static ImageU8 quantize(const Image& img) {
    ImageU8 out{img.height, img.width, std::vector<std::uint8_t>(img.data.size())};
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      const float v = std::clamp(img.data[i], 0.0f, 1.0f);
      out.data[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
  }
};

inline ImageU8 read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw DataError("cannot read image '" + path.string() + "': " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  ImageU8 out;
  out.height = static_cast<int>(image.height);
  out.width = static_cast<int>(image.width);
  out.data.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError("cannot decode image '" + path.string() + "': " + msg);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const ImageU8& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.data.data(), 0, nullptr)) {
    throw DataError("cannot write image '" + path.string() + "': " + image.message);
  }
}

/// ITU-R 601 luma.
inline float luminance(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

}  // namespace gazeclr
