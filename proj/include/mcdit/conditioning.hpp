#pragma once

// Building the unified token sequence [noisy; garment; masked person; text].

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "mcdit/image.hpp"
#include "mcdit/ops.hpp"

namespace mcdit {

enum class TokenGroup { Noisy = 0, Garment = 1, MaskedPerson = 2, Text = 3 };
inline constexpr std::size_t kTokenGroupCount = 4;

inline const char* to_string(TokenGroup g) {
  switch (g) {
    case TokenGroup::Noisy:
      return "noisy";
    case TokenGroup::Garment:
      return "garment";
    case TokenGroup::MaskedPerson:
      return "masked_person";
    case TokenGroup::Text:
      return "text";
  }
  return "?";
}

/// 2-D rotary position of one token. Text tokens carry no spatial position
/// and are rotated by a zero angle.
struct PositionIndex {
  int i = 0;
  int j = 0;
  bool is_text = false;

  friend bool operator==(const PositionIndex&, const PositionIndex&) = default;
  friend auto operator<=>(const PositionIndex&, const PositionIndex&) = default;
};

template <class T>
struct LatentGrid {
  std::size_t h_tok = 0;
  std::size_t w_tok = 0;
  BasicTensor<T> tokens;  // [h_tok * w_tok x d_model]

  std::size_t count() const { return h_tok * w_tok; }
};

/// Flattens each p x p x C patch (row, column, channel order) into the leading
/// C*p*p channels of one token; remaining channels are zero.
template <class T = float>
LatentGrid<T> patchify_encode(const Image& image, std::size_t patch, std::size_t d_model) {
  if (patch == 0 || image.height % patch != 0 || image.width % patch != 0) {
    throw DimensionError("patchify: " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " image is not divisible by patch " + std::to_string(patch));
  }
  const auto per_token = image.channels * patch * patch;
  if (per_token > d_model) {
    throw DimensionError("patchify: " + std::to_string(per_token) + " values per patch exceed d_model " +
                         std::to_string(d_model));
  }
  LatentGrid<T> grid;
  grid.h_tok = image.height / patch;
  grid.w_tok = image.width / patch;
  Buffer<T> tokens(grid.count() * d_model, T(0));
  for (std::size_t r = 0; r < grid.h_tok; ++r) {
    for (std::size_t c = 0; c < grid.w_tok; ++c) {
      T* dst = tokens.data() + (r * grid.w_tok + c) * d_model;
      std::size_t k = 0;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px)
          for (std::size_t ch = 0; ch < image.channels; ++ch)
            dst[k++] = static_cast<T>(image.at(r * patch + py, c * patch + px, ch));
    }
  }
  grid.tokens = BasicTensor<T>({grid.count(), d_model}, std::move(tokens));
  return grid;
}

/// Exact inverse of patchify_encode.
template <class T>
Image unpatchify_decode(const LatentGrid<T>& grid, std::size_t patch, std::size_t channels) {
  const auto per_token = channels * patch * patch;
  if (grid.tokens.rank() != 2 || grid.tokens.rows() != grid.count() || grid.tokens.cols() < per_token) {
    throw DimensionError("unpatchify: tokens " + shape_str(grid.tokens.shape()) + " cannot hold " +
                         std::to_string(per_token) + " channels per token for a " + std::to_string(grid.h_tok) +
                         "x" + std::to_string(grid.w_tok) + " grid");
  }
  const auto d_model = grid.tokens.cols();
  Image image(grid.h_tok * patch, grid.w_tok * patch, channels);
  const auto src = grid.tokens.data();
  for (std::size_t r = 0; r < grid.h_tok; ++r) {
    for (std::size_t c = 0; c < grid.w_tok; ++c) {
      const T* tok = src.data() + (r * grid.w_tok + c) * d_model;
      std::size_t k = 0;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px)
          for (std::size_t ch = 0; ch < channels; ++ch)
            image.at(r * patch + py, c * patch + px, ch) = static_cast<float>(tok[k++]);
    }
  }
  return image;
}

// Pixel values live in [0,1]; the flow runs on data channels recentred to
// [-1,1] so they sit at the same scale as unit Gaussian noise.
template <class T = float>
LatentGrid<T> encode_latent(const Image& image, std::size_t patch, std::size_t d_model) {
  auto grid = patchify_encode<T>(image, patch, d_model);
  const auto used = image.channels * patch * patch;
  auto values = grid.tokens.mutable_data();
  for (std::size_t r = 0; r < grid.count(); ++r)
    for (std::size_t k = 0; k < used; ++k) values[r * d_model + k] = T(2) * values[r * d_model + k] - T(1);
  return grid;
}

template <class T>
Image decode_latent(const LatentGrid<T>& grid, std::size_t patch, std::size_t channels) {
  auto image = unpatchify_decode(grid, patch, channels);
  for (auto& v : image.pixels) v = std::clamp(0.5f * v + 0.5f, 0.0f, 1.0f);
  return image;
}

inline constexpr float kMaskFill = 0.5f;

/// Replaces pixels under mask=1 with mid-gray.
inline Image make_masked_person(const Image& person, const Image& mask) {
  if (mask.channels != 1 || mask.height != person.height || mask.width != person.width) {
    throw ContractError("mask must be a single-channel image matching the person canvas");
  }
  Image out = person;
  for (std::size_t y = 0; y < person.height; ++y) {
    for (std::size_t x = 0; x < person.width; ++x) {
      const float m = mask.at(y, x, 0);
      if (m != 0.0f && m != 1.0f) throw ContractError("mask values must be 0 or 1");
      if (m == 1.0f)
        for (std::size_t c = 0; c < person.channels; ++c) out.at(y, x, c) = kMaskFill;
    }
  }
  return out;
}

/// Row-major (i = row, j = column + j_offset) indices for an h x w grid.
inline std::vector<PositionIndex> assign_positions(std::size_t h, std::size_t w, int j_offset) {
  if (j_offset < 0) throw ContractError("j_offset must be non-negative");
  std::vector<PositionIndex> out;
  out.reserve(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out.push_back({static_cast<int>(r), static_cast<int>(c) + j_offset, false});
  return out;
}

struct GroupRange {
  std::size_t begin = 0;
  std::size_t count = 0;
};

/// The unified sequence. Groups are contiguous, in the order noisy, garment,
/// masked person, text.
template <class T>
struct TokenAssembly {
  BasicTensor<T> tokens;  // [n x d_model]
  std::vector<TokenGroup> groups;
  std::vector<PositionIndex> positions;
  std::array<GroupRange, kTokenGroupCount> ranges{};
  std::size_t noisy_h = 0, noisy_w = 0;

  std::size_t size() const { return groups.size(); }
  const GroupRange& range(TokenGroup g) const { return ranges[static_cast<std::size_t>(g)]; }
  std::size_t image_token_count() const { return size() - range(TokenGroup::Text).count; }
};

/// Concatenates [x_p; x_g; x_mp; text]. Noisy and masked-person tokens keep
/// their native positions (spatially aligned); garment columns are shifted by
/// the person grid width so the two never overlap.
template <class T>
TokenAssembly<T> assemble(const LatentGrid<T>& x_p, const LatentGrid<T>& x_g, const LatentGrid<T>& x_mp,
                          const BasicTensor<T>& text) {
  if (x_p.h_tok != x_mp.h_tok || x_p.w_tok != x_mp.w_tok) {
    throw ContractError("noisy and masked-person grids differ: " + std::to_string(x_p.h_tok) + "x" +
                        std::to_string(x_p.w_tok) + " vs " + std::to_string(x_mp.h_tok) + "x" +
                        std::to_string(x_mp.w_tok));
  }
  if (x_p.count() == 0) throw ContractError("empty noisy group");
  const auto d = x_p.tokens.cols();
  if (x_g.tokens.cols() != d || x_mp.tokens.cols() != d || text.numel() != d) {
    throw DimensionError("assemble: token widths disagree");
  }
  TokenAssembly<T> a;
  a.noisy_h = x_p.h_tok;
  a.noisy_w = x_p.w_tok;
  a.tokens = concat<T>({x_p.tokens, x_g.tokens, x_mp.tokens, reshape(text, {1, d})}, 0);
  auto append = [&a](TokenGroup g, const std::vector<PositionIndex>& pos) {
    a.ranges[static_cast<std::size_t>(g)] = {a.groups.size(), pos.size()};
    for (const auto& p : pos) {
      a.groups.push_back(g);
      a.positions.push_back(p);
    }
  };
  append(TokenGroup::Noisy, assign_positions(x_p.h_tok, x_p.w_tok, 0));
  append(TokenGroup::Garment, assign_positions(x_g.h_tok, x_g.w_tok, static_cast<int>(x_p.w_tok)));
  append(TokenGroup::MaskedPerson, assign_positions(x_mp.h_tok, x_mp.w_tok, 0));
  append(TokenGroup::Text, {PositionIndex{0, 0, true}});
  return a;
}

}  // namespace mcdit
