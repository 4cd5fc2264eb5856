#pragma once

// Checkpoint layout (all integers u32 little-endian):
//   "MCDT" | version | entry count | per entry:
//     name length | UTF-8 name | rank | dims... | f32 data (little-endian)
// Entries are written in name order.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mcdit/param_store.hpp"

namespace mcdit {

inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'C', 'D', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string text(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated");
  }

  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const ParamStore<float>& store) {
  std::vector<char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, entry] : store.entries()) {
    if (!entry.tensor.all_finite()) throw NumericError("refusing to checkpoint non-finite parameter " + name);
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(entry.tensor.rank()));
    for (auto d : entry.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : entry.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

/// Entries come back frozen; callers decide what trains.
inline ParamStore<float> decode_checkpoint(const std::vector<char>& bytes) {
  detail::ByteReader in(bytes);
  if (in.text(4) != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const auto version = in.u32();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = in.u32();
  ParamStore<float> store;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name = in.text(in.u32());
    const auto rank = in.u32();
    if (rank == 0 || rank > 8) throw FormatError("bad rank for " + name);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(in.u32());
      if (shape.back() == 0) throw FormatError("zero dimension in " + name);
    }
    std::vector<float> data(numel_of(shape));
    for (auto& v : data) v = std::bit_cast<float>(in.u32());
    store.add(name, Tensor(std::move(shape), std::move(data)), false);
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint entries");
  return store;
}

inline void save_checkpoint(const ParamStore<float>& store, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(store);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

inline ParamStore<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace mcdit
