#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cle/errors.hpp"

namespace cle {

/// Row-major single-channel raster; x is the column index, y the row index.
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> pixels;

  Image() = default;
  Image(int w, int h, T fill = T(0)) : width(w), height(h), pixels(static_cast<size_t>(w) * h, fill) {}

  T& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
  const T& at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }

  bool operator==(const Image&) const = default;
};

using Image16 = Image<uint16_t>;
using ImageF = Image<float>;
using Image8 = Image<uint8_t>;

ImageF to_float(const Image16& img);

/// Bilinear sample with coordinates clamped to the image.
float sample_bilinear(const ImageF& img, double x, double y);

/// Box-filter (area) resampling to an arbitrary size.
ImageF resize_area(const ImageF& img, int width, int height);

/// Rotation by `angle` radians about (cx, cy), bilinear.
ImageF rotate(const ImageF& img, double angle, double cx, double cy);

/// Rotation by k quarter turns (lossless), counter-clockwise, square images only.
template <typename T>
Image<T> rotate_quarter(const Image<T>& img, int k) {
  if (img.width != img.height) throw ConfigError("quarter rotation needs a square image");
  const int n = img.width;
  Image<T> out(n, n);
  k = ((k % 4) + 4) % 4;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      int sx = x, sy = y;
      switch (k) {
        case 1: sx = n - 1 - y; sy = x; break;
        case 2: sx = n - 1 - x; sy = n - 1 - y; break;
        case 3: sx = y; sy = n - 1 - x; break;
        default: break;
      }
      out.at(x, y) = img.at(sx, sy);
    }
  }
  return out;
}

/// Linear min-max compression to 8 bit using only pixels where `valid` is
/// nonzero for the range; pixels outside the range are clipped.
Image8 compress_to_8bit(const ImageF& img, const std::vector<uint8_t>& valid);

/// Writes an 8-bit grayscale PNG.
void write_png(const std::filesystem::path& path, const Image8& img);
/// Reads an 8-bit grayscale PNG (used by tests and tools).
Image8 read_png(const std::filesystem::path& path);

}  // namespace cle
