#pragma once

// Fixtures shared by the unit tests and the acceptance binary.

#include <cstdint>
#include <string>

#include "mcdit/dit.hpp"

namespace mcdit::testing {

/// d_model 32, 2 heads, 2 blocks, patch 2.
inline DiTConfig tiny_config() {
  DiTConfig c;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_blocks = 2;
  c.mlp_ratio = 2;
  c.patch = 2;
  return c;
}

/// Overwrites every parameter whose name starts with `prefix` with
/// N(0, stddev^2) draws, standing in for a trained model.
template <class T>
void randomize(ParamStore<T>& store, std::uint64_t seed, double stddev = 0.2, const std::string& prefix = {}) {
  Rng rng(seed);
  for (auto& [name, entry] : store.entries()) {
    if (!name.starts_with(prefix)) continue;
    for (auto& v : entry.tensor.mutable_data()) v = static_cast<T>(stddev * rng.normal());
  }
}

template <class T>
LatentGrid<T> random_grid(std::size_t h, std::size_t w, std::size_t d, Rng& rng) {
  return {h, w, BasicTensor<T>::randn({h * w, d}, rng)};
}

/// noisy h x w, garment gh x gw, masked person h x w, one text token.
template <class T>
TokenAssembly<T> random_assembly(std::size_t d, std::size_t h, std::size_t w, std::size_t gh, std::size_t gw,
                                 std::uint64_t seed) {
  Rng rng(seed);
  const auto p = random_grid<T>(h, w, d, rng);
  const auto g = random_grid<T>(gh, gw, d, rng);
  const auto mp = random_grid<T>(h, w, d, rng);
  return assemble(p, g, mp, BasicTensor<T>::randn({1, d}, rng));
}

/// The 20-token sequence used for whole-model gradient checks: 6 noisy,
/// 7 garment, 6 masked person, 1 text.
template <class T>
TokenAssembly<T> twenty_token_assembly(std::size_t d, std::uint64_t seed) {
  return random_assembly<T>(d, 2, 3, 1, 7, seed);
}

/// Fixed random weights for reducing an output to a scalar.
template <class T>
BasicTensor<T> probe_weights(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return BasicTensor<T>::randn(shape, rng);
}

}  // namespace mcdit::testing
