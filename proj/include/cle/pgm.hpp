#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cle/image.hpp"

namespace cle {

inline constexpr int kMaxPgmDimension = 4096;

struct DecodedPgm {
  Image16 image;
  /// Source had maxval 255; samples were widened by x257.
  bool widened_from_8bit = false;
};

/// Binary P5 with maxval 65535, big-endian samples.
std::vector<uint8_t> encode_pgm(const Image16& img);
DecodedPgm decode_pgm(const std::vector<uint8_t>& bytes);

void save_pgm(const std::filesystem::path& path, const Image16& img);
DecodedPgm load_pgm(const std::filesystem::path& path);

}  // namespace cle
