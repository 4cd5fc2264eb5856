#pragma once

// Stage-2 adversarial distillation in token space. The teacher is the Stage-1
// model with the Distill bank disabled; the student is the same network with
// the Distill bank training. Discriminator heads read the teacher's block
// outputs at the noisy tokens.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mcdit/flow.hpp"

namespace mcdit {

enum class RealSource { Teacher, Dataset };
enum class GradPath { Full, Last };

inline const char* to_string(RealSource r) { return r == RealSource::Teacher ? "teacher" : "dataset"; }
inline const char* to_string(GradPath g) { return g == GradPath::Full ? "full" : "last"; }

inline RealSource parse_real_source(const std::string& s) {
  if (s == "teacher") return RealSource::Teacher;
  if (s == "dataset") return RealSource::Dataset;
  throw ConfigError("real_source must be teacher or dataset, got '" + s + "'");
}

inline GradPath parse_grad_path(const std::string& s) {
  if (s == "full") return GradPath::Full;
  if (s == "last") return GradPath::Last;
  throw ConfigError("grad_path must be full or last, got '" + s + "'");
}

struct DistillConfig {
  double gamma = 1e-5;
  double t_min = 0.1;
  double t_max = 0.9;
  int teacher_steps = 50;
  int student_steps = 8;
  bool condition_real_branch = false;
  RealSource real_source = RealSource::Teacher;
  GradPath grad_path = GradPath::Full;
  std::size_t head_hidden = 0;  // 0 selects d_model
  double r1_fd_step = 1e-2;

  void validate() const {
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    if (!(t_min >= 0.0 && t_min <= t_max && t_max <= 1.0)) throw ConfigError("t_disc range must satisfy 0 <= min <= max <= 1");
    if (teacher_steps < 1 || student_steps < 1) throw ConfigError("sampler step counts must be >= 1");
    if (!(r1_fd_step > 0.0)) throw ConfigError("r1_fd_step must be positive");
  }
};

inline std::string head_name(std::size_t k, const char* part) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "b%02zu", k);
  return std::string("disc.") + buf + "." + part;
}

/// One small MLP per transformer block: d_model -> hidden -> gelu -> 1, mean
/// over the noisy tokens.
template <class T>
class DiscriminatorHeads {
 public:
  DiscriminatorHeads() = default;

  /// Adds fresh head entries to `store` (trainable).
  static DiscriminatorHeads create(ParamStore<T>& store, const DiTConfig& cfg, std::size_t hidden, std::uint64_t seed) {
    if (hidden == 0) hidden = cfg.d_model;
    Rng rng(derive_seed(seed, 0xD15C));
    DiscriminatorHeads h;
    const double s1 = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (std::size_t k = 0; k < cfg.n_blocks; ++k) {
      Head head;
      head.fc1.weight = store.add(head_name(k, "fc1.w"), BasicTensor<T>::randn({cfg.d_model, hidden}, rng, s1), true);
      head.fc1.bias = store.add(head_name(k, "fc1.b"), BasicTensor<T>::zeros({1, hidden}), true);
      head.fc2.weight = store.add(head_name(k, "fc2.w"), BasicTensor<T>::randn({hidden, 1}, rng, s2), true);
      head.fc2.bias = store.add(head_name(k, "fc2.b"), BasicTensor<T>::zeros({1, 1}), true);
      h.heads_.push_back(head);
    }
    return h;
  }

  /// Binds to head entries already in `store`.
  static DiscriminatorHeads attach(ParamStore<T>& store, const DiTConfig& cfg) {
    DiscriminatorHeads h;
    for (std::size_t k = 0; k < cfg.n_blocks; ++k) {
      Head head;
      head.fc1 = {store.get(head_name(k, "fc1.w")), store.get(head_name(k, "fc1.b"))};
      head.fc2 = {store.get(head_name(k, "fc2.w")), store.get(head_name(k, "fc2.b"))};
      h.heads_.push_back(head);
    }
    return h;
  }

  static bool present(const ParamStore<T>& store) { return store.contains(head_name(0, "fc1.w")); }

  std::size_t size() const { return heads_.size(); }

  /// One logit per head from per-block features at the rows in `rows`.
  std::vector<BasicTensor<T>> logits(const std::vector<BasicTensor<T>>& block_outputs, const GroupRange& rows) const {
    if (block_outputs.size() != heads_.size()) {
      throw DimensionError("discriminator: " + std::to_string(block_outputs.size()) + " block outputs for " +
                           std::to_string(heads_.size()) + " heads");
    }
    std::vector<BasicTensor<T>> out;
    for (std::size_t k = 0; k < heads_.size(); ++k) {
      const auto feats = slice_rows(block_outputs[k], rows.begin, rows.count);
      out.push_back(mean(heads_[k].fc2(gelu(heads_[k].fc1(feats)))));
    }
    return out;
  }

 private:
  struct Head {
    Linear<T> fc1, fc2;
  };
  std::vector<Head> heads_;
};

inline bool is_head_param(const std::string& name) { return name.starts_with("disc."); }

namespace detail {

inline void require_teacher_banks(const SwitchSet& s) {
  if (state_of(s, BankId::G) != SwitchState::Frozen || state_of(s, BankId::MP) != SwitchState::Frozen) {
    throw ConfigError("distillation requires the G and MP banks to be frozen");
  }
}

}  // namespace detail

/// Teacher sample: Distill disabled for this call whatever the model's own
/// state, n-step Euler, no graph.
template <class T>
BasicTensor<T> teacher_generate(const DiT<T>& model, const Conditions<T>& cond, std::uint64_t seed, int n_steps = 50) {
  detail::require_teacher_banks(model.switches());
  NoGradGuard no_grad;
  SamplerConfig sc;
  sc.n_steps = n_steps;
  return euler_sample(conditioned_denoiser(model, cond, teacher_switches()), noisy_shape(model, cond), sc, seed);
}

/// Student sample with the Distill bank active. Gradients reach the Distill
/// bank through every step (GradPath::Full) or only through the last one.
template <class T>
BasicTensor<T> student_generate(const DiT<T>& model, const Conditions<T>& cond, std::uint64_t seed, int n_steps = 8,
                                GradPath path = GradPath::Full) {
  detail::require_teacher_banks(model.switches());
  if (state_of(model.switches(), BankId::Distill) != SwitchState::Training) {
    throw ConfigError("student generation requires the Distill bank to be training");
  }
  const auto denoiser = conditioned_denoiser(model, cond, student_switches());
  SamplerConfig sc;
  sc.n_steps = n_steps;
  if (path == GradPath::Full || n_steps == 1) return euler_sample(denoiser, noisy_shape(model, cond), sc, seed);
  const auto grid = time_grid(n_steps);
  auto x = standard_noise<T>(noisy_shape(model, cond), seed);
  {
    NoGradGuard no_grad;
    for (std::size_t k = 0; k + 2 < grid.size(); ++k)
      x = add(x, scale(denoiser(x, grid[k]).velocity, static_cast<T>(grid[k + 1] - grid[k])));
  }
  const auto last = grid.size() - 2;
  return add(x, scale(denoiser(x, grid[last]).velocity, static_cast<T>(grid[last + 1] - grid[last])));
}

/// Noisy and text tokens only, for the unconditioned real branch.
template <class T>
TokenAssembly<T> assemble_unconditioned(const LatentGrid<T>& x_p, const BasicTensor<T>& text) {
  const auto d = x_p.tokens.cols();
  TokenAssembly<T> a;
  a.noisy_h = x_p.h_tok;
  a.noisy_w = x_p.w_tok;
  a.tokens = concat<T>({x_p.tokens, reshape(text, {1, d})}, 0);
  a.ranges[static_cast<std::size_t>(TokenGroup::Noisy)] = {0, x_p.count()};
  a.ranges[static_cast<std::size_t>(TokenGroup::Garment)] = {x_p.count(), 0};
  a.ranges[static_cast<std::size_t>(TokenGroup::MaskedPerson)] = {x_p.count(), 0};
  a.ranges[static_cast<std::size_t>(TokenGroup::Text)] = {x_p.count(), 1};
  for (const auto& p : assign_positions(x_p.h_tok, x_p.w_tok, 0)) {
    a.groups.push_back(TokenGroup::Noisy);
    a.positions.push_back(p);
  }
  a.groups.push_back(TokenGroup::Text);
  a.positions.push_back({0, 0, true});
  return a;
}

/// Renoises x at t with eps, runs the teacher (Distill disabled) and applies
/// head k to block k's post-residual output at the noisy tokens. A null
/// `cond` drops the garment and masked-person tokens.
template <class T>
std::vector<BasicTensor<T>> disc_logits(const DiT<T>& model, const DiscriminatorHeads<T>& heads,
                                        const BasicTensor<T>& x, double t, const BasicTensor<T>& eps,
                                        const Conditions<T>* cond) {
  const auto x_t = noise_sample(x, t, eps).x_t;
  const auto side = model.config().grid_side();
  const LatentGrid<T> grid{side, side, x_t};
  const auto assembly = cond ? assemble(grid, cond->garment, cond->masked_person, model.text_stub())
                             : assemble_unconditioned(grid, model.text_stub());
  ForwardTrace<T> trace;
  model.forward(assembly, t, teacher_switches(), &trace);
  return heads.logits(trace.block_outputs, assembly.range(TokenGroup::Noisy));
}

template <class T>
BasicTensor<T> sum_logits(const std::vector<BasicTensor<T>>& logits) {
  if (logits.empty()) throw ContractError("no logits");
  auto s = logits[0];
  for (std::size_t k = 1; k < logits.size(); ++k) s = add(s, logits[k]);
  return s;
}

/// -sum_k D_k(fake).
template <class T>
BasicTensor<T> gen_loss(const std::vector<BasicTensor<T>>& fake_logits) {
  return scale(sum_logits(fake_logits), T(-1));
}

/// sum_k max(0, 1 - D_k(real)) + gamma * R1 + sum_k max(0, 1 + D_k(fake)).
template <class T>
BasicTensor<T> disc_loss(const std::vector<BasicTensor<T>>& real_logits, const std::vector<BasicTensor<T>>& fake_logits,
                         const BasicTensor<T>& r1, double gamma) {
  if (real_logits.size() != fake_logits.size()) throw DimensionError("disc_loss: head counts differ");
  auto total = BasicTensor<T>::zeros({1});
  for (std::size_t k = 0; k < real_logits.size(); ++k) {
    total = add(total, relu(add_scalar(scale(real_logits[k], T(-1)), T(1))));
    total = add(total, relu(add_scalar(fake_logits[k], T(1))));
  }
  if (gamma != 0.0) total = add(total, scale(reshape(r1, {1}), static_cast<T>(gamma)));
  return total;
}

template <class T>
struct R1Result {
  double value = 0;      // ||d D / d x||^2, exact
  BasicTensor<T> term;   // scalar whose value is `value`; its parameter gradient is a surrogate
};

/// R1 = ||grad_x D(x)||^2 for a scalar discriminator D. The value is exact.
/// The parameter gradient 2 (d g / d phi)^T g is obtained from a central
/// difference of D along u = g / ||g||:  S = 2 ||g|| (D(x + h u) - D(x - h u)) / 2h,
/// and the returned term is value + (S - stop_gradient(S)).
template <class T>
R1Result<T> r1_penalty(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& disc, const BasicTensor<T>& x,
                       double fd_step = 1e-2) {
  BasicTensor<T> g;
  {
    auto leaf = x.detach();
    leaf.set_requires_grad(true);
    const auto d = disc(leaf);
    if (d.numel() != 1) throw ContractError("r1_penalty: discriminator output must be scalar");
    g = gradients(d, {leaf})[0];
  }
  double sq = 0;
  for (T v : g.data()) sq += static_cast<double>(v) * v;
  R1Result<T> r;
  r.value = sq;
  const auto constant = BasicTensor<T>::scalar(static_cast<T>(sq));
  const double norm = std::sqrt(sq);
  if (norm == 0.0 || !grad_enabled()) {
    r.term = constant;
    return r;
  }
  const auto u = scale(g, static_cast<T>(fd_step / norm));
  const auto base = x.detach();
  const auto plus = disc(add(base, u));
  const auto minus = disc(add(base, scale(u, T(-1))));
  const auto s = reshape(scale(sub(plus, minus), static_cast<T>(norm / fd_step)), {1});
  r.term = add(constant, sub(s, s.detach()));
  return r;
}

// ---------------------------------------------------------------------------
// Stage-2 step
// ---------------------------------------------------------------------------

template <class T>
struct DistillExample {
  Conditions<T> conditions;
  BasicTensor<T> real;  // teacher 50-step sample or encoded ground truth
};

struct Stage2Stats {
  double gen_loss = 0;
  double disc_loss = 0;
  double r1 = 0;
  double real_logit_mean = 0;
  double fake_logit_mean = 0;
};

inline constexpr const char* kDistillScope = "lora.distill.";
inline constexpr const char* kHeadScope = "disc.";

/// Puts a Stage-1 model into the Stage-2 roles: backbone frozen, G and MP
/// frozen, Distill training (created if absent), heads created if absent.
template <class T>
DiscriminatorHeads<T> prepare_stage2(DiT<T>& model, const DistillConfig& cfg, std::uint64_t seed) {
  model.set_backbone_trainable(false);
  if (!model.adapters().bank(BankId::Distill).materialized()) model.materialize_distill(seed);
  model.apply_switches(student_switches());
  auto heads = DiscriminatorHeads<T>::present(model.params())
                   ? DiscriminatorHeads<T>::attach(model.params(), model.config())
                   : DiscriminatorHeads<T>::create(model.params(), model.config(), cfg.head_hidden, seed);
  model.params().set_trainable_prefix(kHeadScope, true);
  return heads;
}

/// Discriminator update on the heads, then generator update on the Distill
/// bank. Each update sees gradients only on its own parameter set.
template <class T>
Stage2Stats stage2_step(DiT<T>& model, const DiscriminatorHeads<T>& heads, const std::vector<DistillExample<T>>& batch,
                        OptimizerState<T>& gen_opt, OptimizerState<T>& disc_opt, const DistillConfig& cfg,
                        std::uint64_t step_seed) {
  if (batch.empty()) throw ContractError("stage2_step: empty batch");
  if (heads.size() != model.config().n_blocks) throw StateError("discriminator heads are not attached");
  detail::require_teacher_banks(model.switches());
  if (state_of(model.switches(), BankId::Distill) != SwitchState::Training) {
    throw StateError("stage2_step: Distill bank is not training");
  }
  auto& store = model.params();
  Rng rng(step_seed);
  const auto n = static_cast<double>(batch.size());
  const T inv_n = static_cast<T>(1.0 / n);
  const auto k_heads = static_cast<double>(heads.size());

  struct Draw {
    double t;
    BasicTensor<T> eps_real, eps_fake;
    BasicTensor<T> fake;
  };
  std::vector<Draw> draws;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Draw d;
    d.t = rng.uniform(cfg.t_min, cfg.t_max);
    const auto shape = batch[i].real.shape();
    d.eps_real = BasicTensor<T>::randn(shape, rng);
    d.eps_fake = BasicTensor<T>::randn(shape, rng);
    d.fake = student_generate(model, batch[i].conditions, rng.next_u64(), cfg.student_steps, cfg.grad_path);
    draws.push_back(std::move(d));
  }

  Stage2Stats stats;
  // Discriminator step: the student sample is a constant here.
  store.zero_grad();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = batch[i];
    const auto& d = draws[i];
    const Conditions<T>* real_cond = cfg.condition_real_branch ? &ex.conditions : nullptr;
    const auto real_logits = disc_logits(model, heads, ex.real, d.t, d.eps_real, real_cond);
    const auto fake_logits = disc_logits(model, heads, d.fake.detach(), d.t, d.eps_fake, &ex.conditions);
    R1Result<T> r1;
    if (cfg.gamma > 0.0) {
      const std::function<BasicTensor<T>(const BasicTensor<T>&)> real_disc = [&](const BasicTensor<T>& x) {
        return sum_logits(disc_logits(model, heads, x, d.t, d.eps_real, real_cond));
      };
      r1 = r1_penalty(real_disc, ex.real, cfg.r1_fd_step);
    } else {
      r1.term = BasicTensor<T>::zeros({1});
    }
    const auto loss = disc_loss(real_logits, fake_logits, r1.term, cfg.gamma);
    if (!std::isfinite(loss.item())) throw NumericError("discriminator loss is not finite");
    backward(scale(loss, inv_n));
    stats.disc_loss += loss.item() / n;
    stats.r1 += r1.value / n;
    stats.real_logit_mean += sum_logits(real_logits).item() / (n * k_heads);
  }
  adam_step(store, disc_opt);

  // Generator step: heads are held fixed so their gradients stay empty.
  store.set_trainable_prefix(kHeadScope, false);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& d = draws[i];
    const auto fake_logits = disc_logits(model, heads, d.fake, d.t, d.eps_fake, &batch[i].conditions);
    const auto loss = gen_loss(fake_logits);
    if (!std::isfinite(loss.item())) throw NumericError("generator loss is not finite");
    backward(scale(loss, inv_n));
    stats.gen_loss += loss.item() / n;
    stats.fake_logit_mean += sum_logits(fake_logits).item() / (n * k_heads);
  }
  adam_step(store, gen_opt);
  store.set_trainable_prefix(kHeadScope, true);
  return stats;
}

}  // namespace mcdit
