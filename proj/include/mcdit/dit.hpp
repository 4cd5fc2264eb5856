#pragma once

// Miniature diffusion transformer over the unified token sequence: AdaLN-Zero
// modulation from timestep + text embeddings, 2-D rotary positions on Q/K,
// one softmax attention over all tokens, gated MLP.

#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "mcdit/adapters.hpp"
#include "mcdit/conditioning.hpp"
#include "mcdit/dit_config.hpp"
#include "mcdit/ops.hpp"
#include "mcdit/param_store.hpp"

namespace mcdit {

// ---------------------------------------------------------------------------
// Rotary position embedding
// ---------------------------------------------------------------------------

/// Per-token cos/sin factors tiled over heads, both [n x n_heads * d_head].
template <class T>
struct RopeTables {
  BasicTensor<T> cos;
  BasicTensor<T> sin;
};

/// Angle frequencies shared by the two spatial axes: base^(-2m / (d_head/2)).
inline std::vector<double> rope_frequencies(std::size_t d_head, double base) {
  const std::size_t pairs_per_axis = d_head / 4;
  std::vector<double> freq(pairs_per_axis);
  const double half = static_cast<double>(d_head) / 2.0;
  for (std::size_t m = 0; m < pairs_per_axis; ++m) freq[m] = std::pow(base, -2.0 * static_cast<double>(m) / half);
  return freq;
}

/// Channel pairs (2m, 2m+1) of the first half of each head rotate by i * w_m,
/// those of the second half by j * w_m. Text tokens get zero angles.
template <class T>
RopeTables<T> rope_tables(const std::vector<PositionIndex>& positions, std::size_t n_heads, std::size_t d_head,
                          double base) {
  if (d_head % 4 != 0) throw ContractError("rope: d_head must be divisible by 4");
  const auto freq = rope_frequencies(d_head, base);
  const auto width = n_heads * d_head;
  const auto n = positions.size();
  Buffer<T> c(n * width), s(n * width);
  std::vector<double> head_angles(d_head);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& p = positions[t];
    for (std::size_t m = 0; m < freq.size(); ++m) {
      const double ai = p.is_text ? 0.0 : p.i * freq[m];
      const double aj = p.is_text ? 0.0 : p.j * freq[m];
      head_angles[2 * m] = head_angles[2 * m + 1] = ai;
      head_angles[d_head / 2 + 2 * m] = head_angles[d_head / 2 + 2 * m + 1] = aj;
    }
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t k = 0; k < d_head; ++k) {
        c[t * width + h * d_head + k] = static_cast<T>(std::cos(head_angles[k]));
        s[t * width + h * d_head + k] = static_cast<T>(std::sin(head_angles[k]));
      }
    }
  }
  return {BasicTensor<T>({n, width}, std::move(c)), BasicTensor<T>({n, width}, std::move(s))};
}

/// Constant P with (x P)[2m] = -x[2m+1], (x P)[2m+1] = x[2m].
template <class T>
BasicTensor<T> pair_swap_matrix(std::size_t width) {
  Buffer<T> p(width * width, T(0));
  for (std::size_t m = 0; m + 1 < width; m += 2) {
    p[(m + 1) * width + m] = T(-1);
    p[m * width + (m + 1)] = T(1);
  }
  return BasicTensor<T>({width, width}, std::move(p));
}

/// x * cos + (x P) * sin: the pairwise rotation written with vocabulary ops.
template <class T>
BasicTensor<T> apply_rope(const BasicTensor<T>& x, const RopeTables<T>& tables, const BasicTensor<T>& swap) {
  return add(mul(x, tables.cos), mul(matmul(x, swap), tables.sin));
}

/// Rotates x ([n x h x d_h] or [n x h*d_h]) by each token's position.
template <class T>
BasicTensor<T> rope_rotate(const BasicTensor<T>& x, const std::vector<PositionIndex>& positions, std::size_t n_heads,
                           double base) {
  const auto n = x.dim(0);
  if (positions.size() != n) throw DimensionError("rope_rotate: one position per token required");
  const auto width = x.numel() / n;
  if (width % n_heads != 0) throw DimensionError("rope_rotate: channels not divisible by heads");
  const auto flat = reshape(x, {n, width});
  const auto tables = rope_tables<T>(positions, n_heads, width / n_heads, base);
  return reshape(apply_rope(flat, tables, pair_swap_matrix<T>(width)), x.shape());
}

// ---------------------------------------------------------------------------
// Modulation
// ---------------------------------------------------------------------------

/// alpha * layer_norm(x) + beta, alpha/beta broadcast over tokens.
template <class T>
BasicTensor<T> adaln_modulate(const BasicTensor<T>& x, const BasicTensor<T>& alpha, const BasicTensor<T>& beta) {
  return add(mul(layer_norm(x), alpha), beta);
}

/// Scale, shift and residual gate for one stream of one sublayer.
template <class T>
struct StreamModulation {
  BasicTensor<T> alpha;  // 1 + raw scale
  BasicTensor<T> beta;
  BasicTensor<T> gate;
};

enum class Stream { Image, Text };

template <class T>
struct ModulationParams {
  StreamModulation<T> attn_image, attn_text, mlp_image, mlp_text;

  const StreamModulation<T>& attn(Stream s) const { return s == Stream::Image ? attn_image : attn_text; }
  const StreamModulation<T>& mlp(Stream s) const { return s == Stream::Image ? mlp_image : mlp_text; }
};

template <class T>
struct Linear {
  BasicTensor<T> weight;  // [in x out]
  BasicTensor<T> bias;    // [1 x out]

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return add(matmul(x, weight), bias); }
};

// Splits the 12 d-wide chunks of a block's modulation output.
template <class T>
ModulationParams<T> split_modulation(const BasicTensor<T>& raw, std::size_t d) {
  auto chunk = [&](std::size_t i) { return slice_cols(raw, i * d, d); };
  auto stream = [&](std::size_t first) {
    return StreamModulation<T>{add_scalar(chunk(first + 1), T(1)), chunk(first), chunk(first + 2)};
  };
  return {stream(0), stream(6), stream(3), stream(9)};
}

/// Sinusoidal features of t in [0,1] (scaled by 1000), width d.
template <class T>
BasicTensor<T> timestep_features(double t, std::size_t d) {
  const auto half = d / 2;
  Buffer<T> out(d, T(0));
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    const double arg = 1000.0 * t * freq;
    out[k] = static_cast<T>(std::cos(arg));
    out[half + k] = static_cast<T>(std::sin(arg));
  }
  return BasicTensor<T>({1, d}, std::move(out));
}

// ---------------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------------

template <class T>
struct BlockParams {
  Linear<T> modulation;  // d -> 12 d, zero-initialized
  Linear<T> q, k, v, out;
  Linear<T> fc1, fc2;
};

/// Optional probes filled by forward().
template <class T>
struct ForwardTrace {
  bool keep_attention = false;
  std::vector<BasicTensor<T>> block_outputs;           // post-residual, all tokens
  std::vector<std::vector<BasicTensor<T>>> attention;  // [block][head] probabilities
};

template <class T>
struct DenoiserOutput {
  BasicTensor<T> eps;       // noise prediction at the noisy tokens
  BasicTensor<T> velocity;  // d x_t / dt implied by eps
};

inline std::string block_name(std::size_t k, const char* part) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "b%02zu", k);
  return std::string("blocks.") + buf + "." + part;
}

inline bool is_backbone_param(const std::string& name) {
  return !name.starts_with("lora.") && !name.starts_with("disc.");
}

template <class T>
class DiT {
 public:
  DiT(const DiTConfig& config, const AdapterConfig& adapter_config, std::uint64_t seed)
      : config_(config), adapters_(adapter_config), swap_(pair_swap_matrix<T>(config.d_model)) {
    config_.validate();
    Rng rng(derive_seed(seed, 0xD17));
    const auto d = config_.d_model;
    const auto hidden = d * config_.mlp_ratio;
    const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
    auto normal = [&](const std::string& name, Shape shape, double stddev) {
      return params_.add(name, BasicTensor<T>::randn(std::move(shape), rng, stddev), true);
    };
    auto zeros = [&](const std::string& name, Shape shape) {
      return params_.add(name, BasicTensor<T>::zeros(std::move(shape)), true);
    };
    auto linear = [&](const std::string& name, std::size_t in, std::size_t out, double stddev) {
      Linear<T> l;
      l.weight = stddev > 0 ? normal(name + ".w", {in, out}, stddev) : zeros(name + ".w", {in, out});
      l.bias = zeros(name + ".b", {1, out});
      return l;
    };
    embed_ = linear("embed.in", d, d, s_in);
    time_fc1_ = linear("time.fc1", d, d, s_in);
    time_fc2_ = linear("time.fc2", d, d, s_in);
    text_stub_ = normal("text.stub", {1, d}, 1.0);
    for (std::size_t k = 0; k < config_.n_blocks; ++k) {
      BlockParams<T> b;
      b.modulation = linear(block_name(k, "mod"), d, 12 * d, 0.0);
      b.q = linear(block_name(k, "attn.q"), d, d, s_in);
      b.k = linear(block_name(k, "attn.k"), d, d, s_in);
      b.v = linear(block_name(k, "attn.v"), d, d, s_in);
      b.out = linear(block_name(k, "attn.out"), d, d, s_in);
      b.fc1 = linear(block_name(k, "mlp.fc1"), d, hidden, s_in);
      b.fc2 = linear(block_name(k, "mlp.fc2"), hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)));
      blocks_.push_back(std::move(b));
    }
    final_mod_ = linear("final.mod", d, 2 * d, 0.0);
    final_out_ = linear("final.out", d, d, 0.02);
    adapters_.materialize(BankId::G, params_, config_, rng);
    adapters_.materialize(BankId::MP, params_, config_, rng);
    adapters_.apply(stage1_switches(), params_);
  }

  DiT(const DiT&) = delete;
  DiT& operator=(const DiT&) = delete;
  DiT(DiT&&) = default;
  DiT& operator=(DiT&&) = default;

  const DiTConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  AdapterSet<T>& adapters() { return adapters_; }
  const AdapterSet<T>& adapters() const { return adapters_; }
  const BasicTensor<T>& text_stub() const { return text_stub_; }
  const BlockParams<T>& block(std::size_t k) const { return blocks_.at(k); }

  void set_backbone_trainable(bool trainable) {
    for (const auto& name : params_.names())
      if (is_backbone_param(name)) params_.set_trainable(name, trainable);
  }

  void set_switch(BankId b, SwitchState s) { adapters_.set_switch(b, s, params_); }
  void apply_switches(const SwitchSet& s) { adapters_.apply(s, params_); }
  SwitchSet switches() const { return adapters_.switches(); }

  /// Creates the Distill bank (zero `up`, so the student starts equal to the
  /// teacher).
  void materialize_distill(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xD157));
    adapters_.materialize(BankId::Distill, params_, config_, rng);
  }

  /// Replaces parameter values from a loaded store. Distill entries found
  /// there are attached to the Distill bank.
  void load(const ParamStore<T>& loaded) {
    for (const auto& [name, entry] : loaded.entries()) {
      if (is_backbone_param(name) || name.starts_with(bank_prefix(BankId::G)) ||
          name.starts_with(bank_prefix(BankId::MP))) {
        if (!params_.contains(name)) throw FormatError("checkpoint has unexpected entry " + name);
      }
    }
    for (const auto& name : params_.names()) {
      if (!loaded.contains(name)) throw FormatError("checkpoint is missing entry " + name);
    }
    const auto state = switches();
    params_.assign_from(loaded);
    if (loaded.contains(adapter_name(BankId::Distill, 0, Projection::Q, "down")) &&
        !adapters_.bank(BankId::Distill).materialized()) {
      adapters_.attach(BankId::Distill, params_, config_);
    }
    apply_switches(state);
  }

  /// Conditioning vector fed to every modulation MLP: gelu(time MLP + text).
  BasicTensor<T> condition(double t) const {
    const auto temb = time_fc2_(gelu(time_fc1_(timestep_features<T>(t, config_.d_model))));
    return gelu(add(temb, text_stub_));
  }

  ModulationParams<T> modulation(std::size_t k, const BasicTensor<T>& cond) const {
    return split_modulation(blocks_.at(k).modulation(cond), config_.d_model);
  }

  /// Applies a per-stream function to the image rows and the text rows.
  template <class F>
  BasicTensor<T> per_stream(const BasicTensor<T>& h, std::size_t n_image, F&& f) const {
    const auto n = h.dim(0);
    if (n_image == n) return f(h, Stream::Image);
    if (n_image == 0) return f(h, Stream::Text);
    return concat<T>({f(slice_rows(h, 0, n_image), Stream::Image), f(slice_rows(h, n_image, n - n_image), Stream::Text)},
                     0);
  }

  /// Multi-head attention over the whole sequence with group-routed Q/K/V.
  BasicTensor<T> mm_attention(const BasicTensor<T>& x, const TokenAssembly<T>& assembly, const RopeTables<T>& rope,
                              std::size_t k, const SwitchSet& switches,
                              std::vector<BasicTensor<T>>* attention = nullptr) const {
    const auto& b = blocks_.at(k);
    auto project = [&](const Linear<T>& lin, Projection proj) {
      std::vector<BasicTensor<T>> parts;
      for (std::size_t g = 0; g < kTokenGroupCount; ++g) {
        const auto& r = assembly.ranges[g];
        if (r.count == 0) continue;
        parts.push_back(routed_project(slice_rows(x, r.begin, r.count), static_cast<TokenGroup>(g), lin.weight, lin.bias,
                                       adapters_, switches, k, proj));
      }
      return parts.size() == 1 ? parts[0] : concat(parts, 0);
    };
    const auto q = apply_rope(project(b.q, Projection::Q), rope, swap_);
    const auto key = apply_rope(project(b.k, Projection::K), rope, swap_);
    const auto v = project(b.v, Projection::V);
    const auto dh = config_.d_head();
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<BasicTensor<T>> heads;
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
      const auto qh = slice_cols(q, h * dh, dh);
      const auto kh = slice_cols(key, h * dh, dh);
      const auto vh = slice_cols(v, h * dh, dh);
      const auto probs = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
      if (attention) attention->push_back(probs);
      heads.push_back(matmul(probs, vh));
    }
    return b.out(heads.size() == 1 ? heads[0] : concat(heads, 1));
  }

  /// h + gate * attn(mod(h)), then h + gate * mlp(mod(h)).
  BasicTensor<T> transformer_block(const BasicTensor<T>& h, const TokenAssembly<T>& assembly,
                                   const RopeTables<T>& rope, const ModulationParams<T>& mod, std::size_t k,
                                   const SwitchSet& switches, std::vector<BasicTensor<T>>* attention = nullptr) const {
    const auto n_image = assembly.image_token_count();
    const auto attn_in = per_stream(h, n_image, [&](const BasicTensor<T>& x, Stream s) {
      return adaln_modulate(x, mod.attn(s).alpha, mod.attn(s).beta);
    });
    const auto attn = mm_attention(attn_in, assembly, rope, k, switches, attention);
    auto out = add(h, per_stream(attn, n_image, [&](const BasicTensor<T>& x, Stream s) { return mul(x, mod.attn(s).gate); }));
    const auto& b = blocks_.at(k);
    const auto mlp_in = per_stream(out, n_image, [&](const BasicTensor<T>& x, Stream s) {
      return adaln_modulate(x, mod.mlp(s).alpha, mod.mlp(s).beta);
    });
    const auto mlp = b.fc2(gelu(b.fc1(mlp_in)));
    return add(out, per_stream(mlp, n_image, [&](const BasicTensor<T>& x, Stream s) { return mul(x, mod.mlp(s).gate); }));
  }

  /// Prediction at the noisy tokens. The head outputs a velocity F and the
  /// noise prediction is eps = x_t + (1 - t) F, which keeps x0 recovery and
  /// Euler steps free of the 1/(1 - t) blow-up near t = 1.
  DenoiserOutput<T> forward(const TokenAssembly<T>& assembly, double t, const SwitchSet& switches,
                            ForwardTrace<T>* trace = nullptr) const {
    const auto& noisy = assembly.range(TokenGroup::Noisy);
    if (noisy.count == 0) throw ContractError("dit_forward: empty noisy group");
    if (assembly.tokens.cols() != config_.d_model) throw DimensionError("dit_forward: token width != d_model");
    const auto n = assembly.size();
    const auto n_image = assembly.image_token_count();
    const auto cond = condition(t);
    const auto rope = rope_tables<T>(assembly.positions, config_.n_heads, config_.d_head(), config_.rope_base);
    auto h = embed_(slice_rows(assembly.tokens, 0, n_image));
    if (n_image < n) h = concat<T>({h, slice_rows(assembly.tokens, n_image, n - n_image)}, 0);
    for (std::size_t k = 0; k < config_.n_blocks; ++k) {
      std::vector<BasicTensor<T>>* attention = nullptr;
      if (trace && trace->keep_attention) attention = &trace->attention.emplace_back();
      h = transformer_block(h, assembly, rope, modulation(k, cond), k, switches, attention);
      if (trace) trace->block_outputs.push_back(h);
    }
    const auto fmod = final_mod_(cond);
    const auto d = config_.d_model;
    const auto shift = slice_cols(fmod, 0, d);
    const auto alpha = add_scalar(slice_cols(fmod, d, d), T(1));
    const auto velocity = final_out_(adaln_modulate(slice_rows(h, noisy.begin, noisy.count), alpha, shift));
    const auto x_t = slice_rows(assembly.tokens, noisy.begin, noisy.count);
    return {add(x_t, scale(velocity, static_cast<T>(1.0 - t))), velocity};
  }

 private:
  DiTConfig config_;
  ParamStore<T> params_;
  AdapterSet<T> adapters_;
  BasicTensor<T> swap_;
  Linear<T> embed_, time_fc1_, time_fc2_, final_mod_, final_out_;
  BasicTensor<T> text_stub_;
  std::vector<BlockParams<T>> blocks_;
};

}  // namespace mcdit
