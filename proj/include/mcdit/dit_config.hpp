#pragma once

#include <cstddef>
#include <string>

#include "mcdit/errors.hpp"

namespace mcdit {

struct DiTConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 4;
  std::size_t mlp_ratio = 4;
  double rope_base = 10000.0;
  std::size_t patch = 4;
  std::size_t image_size = 32;
  std::size_t channels = 3;

  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t grid_side() const { return image_size / patch; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || n_blocks == 0 || mlp_ratio == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (d_head() % 4 != 0) throw ConfigError("d_head must be divisible by 4 (two rotary axes, pairwise rotation)");
    if (patch == 0 || image_size % patch != 0) throw ConfigError("image_size must be divisible by patch");
    if (channels * patch * patch > d_model) throw ConfigError("channels * patch^2 must not exceed d_model");
    if (rope_base <= 1.0) throw ConfigError("rope_base must exceed 1");
  }
};

/// Closed-form size of the base network (everything except adapters and
/// discriminator heads).
inline std::size_t backbone_param_count(const DiTConfig& c) {
  const auto d = c.d_model;
  const auto hidden = d * c.mlp_ratio;
  const auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
  std::size_t n = 0;
  n += linear(d, d);                      // input embedding
  n += 2 * linear(d, d);                  // timestep MLP
  n += d;                                 // text stub
  const std::size_t per_block = linear(d, 12 * d)  // modulation, 2 streams x 6 vectors
                                + 4 * linear(d, d)  // q, k, v, out
                                + linear(d, hidden) + linear(hidden, d);
  n += c.n_blocks * per_block;
  n += linear(d, 2 * d) + linear(d, d);  // final modulation + output projection
  return n;
}

}  // namespace mcdit
