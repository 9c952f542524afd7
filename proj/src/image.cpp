#include "cle/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>

namespace cle {

ImageF to_float(const Image16& img) {
  ImageF out(img.width, img.height);
  std::copy(img.pixels.begin(), img.pixels.end(), out.pixels.begin());
  return out;
}

float sample_bilinear(const ImageF& img, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0, fy = y - y0;
  const double top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
  const double bottom = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
  return static_cast<float>(top * (1.0 - fy) + bottom * fy);
}

namespace {

struct Tap {
  int index;
  double weight;
};

// Overlap weights of destination cells [i*s, (i+1)*s) with unit source cells.
std::vector<std::vector<Tap>> area_taps(int src, int dst) {
  std::vector<std::vector<Tap>> taps(static_cast<size_t>(dst));
  const double scale = static_cast<double>(src) / dst;
  for (int i = 0; i < dst; ++i) {
    const double lo = i * scale, hi = (i + 1) * scale;
    for (int s = static_cast<int>(std::floor(lo)); s < std::min(src, static_cast<int>(std::ceil(hi))); ++s) {
      const double w = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
      if (w > 0) taps[static_cast<size_t>(i)].push_back({s, w / scale});
    }
  }
  return taps;
}

}  // namespace

ImageF resize_area(const ImageF& img, int width, int height) {
  if (width < 1 || height < 1) throw ConfigError("resize target must be positive");
  const auto tx = area_taps(img.width, width);
  const auto ty = area_taps(img.height, height);
  ImageF tmp(width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      for (const auto& t : tx[static_cast<size_t>(x)]) acc += t.weight * img.at(t.index, y);
      tmp.at(x, y) = static_cast<float>(acc);
    }
  }
  ImageF out(width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      for (const auto& t : ty[static_cast<size_t>(y)]) acc += t.weight * tmp.at(x, t.index);
      out.at(x, y) = static_cast<float>(acc);
    }
  }
  return out;
}

ImageF rotate(const ImageF& img, double angle, double cx, double cy) {
  ImageF out(img.width, img.height);
  const double c = std::cos(angle), s = std::sin(angle);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx, dy = y - cy;
      // inverse mapping: rotate destination offset by -angle
      out.at(x, y) = sample_bilinear(img, cx + c * dx + s * dy, cy - s * dx + c * dy);
    }
  }
  return out;
}

Image8 compress_to_8bit(const ImageF& img, const std::vector<uint8_t>& valid) {
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    lo = std::min(lo, img.pixels[i]);
    hi = std::max(hi, img.pixels[i]);
  }
  Image8 out(img.width, img.height);
  if (!(hi > lo)) return out;
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = (img.pixels[i] - lo) / (hi - lo) * 255.0;
    out.pixels[i] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image8& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw Error("libpng initialization failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<size_t>(y) * img.width));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image8 read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) throw DecodeError("cannot read png " + path.string());
  image.format = PNG_FORMAT_GRAY;
  Image8 out(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DecodeError("cannot decode png " + path.string());
  }
  return out;
}

}  // namespace cle
