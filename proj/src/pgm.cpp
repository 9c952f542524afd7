#include "cle/pgm.hpp"

#include <cctype>
#include <string>

#include "cle/checkpoint.hpp"

namespace cle {

namespace {

// Parses one whitespace-separated header token, skipping '#' comments.
int read_header_int(const std::vector<uint8_t>& b, size_t& pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= b.size() || !std::isdigit(b[pos])) throw DecodeError("malformed PGM header");
  long value = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    value = value * 10 + (b[pos] - '0');
    if (value > 1'000'000) throw DecodeError("PGM header value out of range");
    ++pos;
  }
  return static_cast<int>(value);
}

}  // namespace

std::vector<uint8_t> encode_pgm(const Image16& img) {
  if (img.width < 1 || img.height < 1 || img.width > kMaxPgmDimension || img.height > kMaxPgmDimension) {
    throw ConfigError("PGM dimensions must be in [1, 4096]");
  }
  const std::string header =
      "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n65535\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.pixels.size() * 2);
  for (uint16_t v : img.pixels) {
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v & 0xff));
  }
  return out;
}

DecodedPgm decode_pgm(const std::vector<uint8_t>& b) {
  if (b.size() < 2 || b[0] != 'P' || b[1] != '5') throw DecodeError("not a binary PGM (expected P5)");
  size_t pos = 2;
  const int width = read_header_int(b, pos);
  const int height = read_header_int(b, pos);
  const int maxval = read_header_int(b, pos);
  if (width < 1 || height < 1 || width > kMaxPgmDimension || height > kMaxPgmDimension) {
    throw DecodeError("PGM dimensions out of range");
  }
  if (maxval < 1 || maxval > 65535) throw DecodeError("PGM maxval out of range");
  if (pos >= b.size() || !std::isspace(b[pos])) throw DecodeError("malformed PGM header");
  ++pos;
  const size_t count = static_cast<size_t>(width) * height;
  const size_t bytes_per_sample = maxval < 256 ? 1 : 2;
  if (b.size() - pos < count * bytes_per_sample) throw DecodeError("truncated PGM payload");
  DecodedPgm out;
  out.image = Image16(width, height);
  for (size_t i = 0; i < count; ++i) {
    uint32_t v = bytes_per_sample == 1 ? b[pos + i] : (static_cast<uint32_t>(b[pos + 2 * i]) << 8) | b[pos + 2 * i + 1];
    if (static_cast<int>(v) > maxval) throw DecodeError("PGM sample exceeds maxval");
    if (maxval == 255) v *= 257;
    out.image.pixels[i] = static_cast<uint16_t>(v);
  }
  out.widened_from_8bit = maxval == 255;
  return out;
}

void save_pgm(const std::filesystem::path& path, const Image16& img) { write_file_bytes(path, encode_pgm(img)); }

DecodedPgm load_pgm(const std::filesystem::path& path) { return decode_pgm(read_file_bytes(path)); }

}  // namespace cle
