#pragma once

#include <algorithm>
#include <cctype>
#include <istream>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mcdit/errors.hpp"

namespace mcdit {

/// H x W x C image, row-major, channel-interleaved, values nominally in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  bool same_shape(const Image& other) const {
    return height == other.height && width == other.width && channels == other.channels;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Nearest 8-bit level, as stored in PPM/PGM files.
inline std::uint8_t to_byte(float v) {
  const float clamped = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

inline float from_byte(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

/// Snaps every value onto the 8-bit grid so that a file round-trip is exact.
inline Image quantize(Image img) {
  for (auto& v : img.pixels) v = from_byte(to_byte(v));
  return img;
}

namespace detail {

inline std::string next_token(std::istream& in) {
  std::string token;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(ch);
  }
  return token;
}

inline Image read_pnm(const std::filesystem::path& path, const std::string& magic, std::size_t channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  if (next_token(in) != magic) throw FormatError(path.string() + ": expected " + magic + " header");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token(in));
    h = std::stoul(next_token(in));
    maxval = std::stoul(next_token(in));
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw FormatError(path.string() + ": only 8-bit images are supported");
  std::vector<unsigned char> raw(w * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw FormatError(path.string() + ": truncated pixel data");
  Image img(h, w, channels);
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = from_byte(raw[i]);
  return img;
}

inline void write_pnm(const std::filesystem::path& path, const Image& img, const std::string& magic) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << magic << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::vector<char> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<char>(to_byte(img.pixels[i]));
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
}

}  // namespace detail

/// Binary P6, 8-bit, mapped linearly to [0,1].
inline Image read_ppm(const std::filesystem::path& path) { return detail::read_pnm(path, "P6", 3); }

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 3) throw ContractError("write_ppm expects 3 channels");
  detail::write_pnm(path, img, "P6");
}

/// Binary P5 mask; bytes >= 128 read as 1, the rest as 0.
inline Image read_mask_pgm(const std::filesystem::path& path) {
  auto img = detail::read_pnm(path, "P5", 1);
  for (auto& v : img.pixels) v = to_byte(v) >= 128 ? 1.0f : 0.0f;
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1) throw ContractError("write_pgm expects 1 channel");
  detail::write_pnm(path, img, "P5");
}

}  // namespace mcdit
