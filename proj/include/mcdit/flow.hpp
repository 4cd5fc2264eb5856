#pragma once

// Rectified flow: x_t = (1 - t) x_0 + t eps, the noise-prediction objective,
// and a fixed-grid Euler sampler from t = 1 down to t = 0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mcdit/dit.hpp"
#include "mcdit/ops.hpp"
#include "mcdit/param_store.hpp"

namespace mcdit {

template <class T>
struct NoisySample {
  BasicTensor<T> x_t;
  double t = 0.0;
  BasicTensor<T> eps;
};

struct SamplerConfig {
  int n_steps = 50;
  double t_clamp = 1.0 - 1e-3;
};

/// Counts recoveries that had to clamp t.
struct ClampCounter {
  std::uint64_t count = 0;
};

template <class T>
NoisySample<T> noise_sample(const BasicTensor<T>& x0, double t, const BasicTensor<T>& eps) {
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("noise_sample: t must lie in [0, 1], got " + std::to_string(t));
  if (x0.shape() != eps.shape()) {
    throw DimensionError("noise_sample: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  const auto x_t = add(scale(x0, static_cast<T>(1.0 - t)), scale(eps, static_cast<T>(t)));
  return {x_t, t, eps};
}

/// w * mean((eps_hat - eps)^2) over tokens and channels.
template <class T>
BasicTensor<T> flow_loss(const BasicTensor<T>& eps_hat, const BasicTensor<T>& eps, double weight = 1.0) {
  if (eps_hat.shape() != eps.shape()) {
    throw DimensionError("flow_loss: " + shape_str(eps_hat.shape()) + " vs " + shape_str(eps.shape()));
  }
  const auto diff = sub(eps_hat, eps);
  return scale(mean(mul(diff, diff)), static_cast<T>(weight));
}

/// (x_t - t eps_hat) / (1 - t), with t clamped to t_clamp.
template <class T>
BasicTensor<T> predict_x0(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_hat, double t, double t_clamp = 1.0 - 1e-3,
                          ClampCounter* counter = nullptr) {
  if (t > t_clamp) {
    t = t_clamp;
    if (counter) ++counter->count;
  }
  return scale(sub(x_t, scale(eps_hat, static_cast<T>(t))), static_cast<T>(1.0 / (1.0 - t)));
}

/// Velocity implied by a bare noise prediction: (eps_hat - x_t) / (1 - t).
template <class T>
BasicTensor<T> velocity_from_eps(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_hat, double t, double t_clamp,
                                 ClampCounter* counter = nullptr) {
  if (t > t_clamp) {
    t = t_clamp;
    if (counter) ++counter->count;
  }
  return scale(sub(eps_hat, x_t), static_cast<T>(1.0 / (1.0 - t)));
}

/// Anything that maps (x_t, t) to a prediction at the noisy tokens.
template <class T>
using Denoiser = std::function<DenoiserOutput<T>(const BasicTensor<T>& x_t, double t)>;

/// Uniform time grid 1 = t_0 > t_1 > ... > t_n = 0.
inline std::vector<double> time_grid(int n_steps) {
  if (n_steps < 1) throw ConfigError("sampler needs at least one step");
  std::vector<double> grid(static_cast<std::size_t>(n_steps) + 1);
  for (int k = 0; k <= n_steps; ++k) grid[static_cast<std::size_t>(k)] = 1.0 - static_cast<double>(k) / n_steps;
  return grid;
}

/// Euler integration of dx/dt = v from t = 1 (x = noise) to t = 0. Records a
/// graph when gradients are enabled and the denoiser has trainable inputs.
template <class T>
BasicTensor<T> euler_sample(const Denoiser<T>& denoiser, const BasicTensor<T>& noise, const SamplerConfig& cfg,
                            ClampCounter* counter = nullptr) {
  const auto grid = time_grid(cfg.n_steps);
  auto x = noise;
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const double t = grid[k];
    const auto pred = denoiser(x, t);
    const auto v = pred.velocity.defined() ? pred.velocity : velocity_from_eps(x, pred.eps, t, cfg.t_clamp, counter);
    x = add(x, scale(v, static_cast<T>(grid[k + 1] - t)));
  }
  return x;
}

template <class T>
BasicTensor<T> standard_noise(const Shape& shape, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x401E));
  return BasicTensor<T>::randn(shape, rng);
}

template <class T>
BasicTensor<T> euler_sample(const Denoiser<T>& denoiser, const Shape& shape, const SamplerConfig& cfg,
                            std::uint64_t seed, ClampCounter* counter = nullptr) {
  return euler_sample(denoiser, standard_noise<T>(shape, seed), cfg, counter);
}

// ---------------------------------------------------------------------------
// Conditioned sampling with the DiT
// ---------------------------------------------------------------------------

/// The two conditional image inputs, already tokenized.
template <class T>
struct Conditions {
  LatentGrid<T> garment;
  LatentGrid<T> masked_person;
};

template <class T>
LatentGrid<T> with_tokens(const LatentGrid<T>& like, BasicTensor<T> tokens) {
  return {like.h_tok, like.w_tok, std::move(tokens)};
}

/// Binds a model, its conditions and a switch view into a Denoiser.
template <class T>
Denoiser<T> conditioned_denoiser(const DiT<T>& model, const Conditions<T>& cond, SwitchSet switches) {
  return [&model, &cond, switches](const BasicTensor<T>& x_t, double t) {
    const auto assembly =
        assemble(with_tokens(cond.masked_person, x_t), cond.garment, cond.masked_person, model.text_stub());
    return model.forward(assembly, t, switches);
  };
}

template <class T>
Shape noisy_shape(const DiT<T>& model, const Conditions<T>& cond) {
  return {cond.masked_person.count(), model.config().d_model};
}

// ---------------------------------------------------------------------------
// Stage-1 training
// ---------------------------------------------------------------------------

template <class T>
struct TrainingExample {
  LatentGrid<T> target;  // clean person-wearing-garment tokens
  Conditions<T> conditions;
};

enum class LossWeighting {
  Constant,  // w(t) = weight
  Velocity,  // w(t) = weight / (1 - t)^2, t clamped; turns the noise error into a velocity error
};

inline const char* to_string(LossWeighting w) { return w == LossWeighting::Constant ? "constant" : "velocity"; }

inline LossWeighting parse_weighting(const std::string& s) {
  if (s == "constant") return LossWeighting::Constant;
  if (s == "velocity") return LossWeighting::Velocity;
  throw ConfigError("loss weighting must be constant or velocity, got '" + s + "'");
}

struct FlowConfig {
  double weight = 1.0;
  LossWeighting weighting = LossWeighting::Constant;
  int teacher_steps = 50;
  int student_steps = 8;
  double t_clamp = 1.0 - 1e-3;

  double w(double t) const {
    if (weighting == LossWeighting::Constant) return weight;
    const double s = 1.0 - std::min(t, t_clamp);
    return weight / (s * s);
  }
};

struct StepStats {
  double loss = 0.0;
  double t_mean = 0.0;
  double grad_norm = 0.0;
};

/// One optimizer update on the denoising objective. The loss is read at the
/// noisy tokens only; t ~ U(0,1) and eps ~ N(0,1) per example.
template <class T>
StepStats stage1_step(DiT<T>& model, const std::vector<TrainingExample<T>>& batch, OptimizerState<T>& opt,
                      const FlowConfig& flow, std::uint64_t step_seed) {
  if (state_of(model.switches(), BankId::Distill) != SwitchState::Disabled) {
    throw ConfigError("stage-1 requires the Distill bank to be disabled");
  }
  if (batch.empty()) throw ContractError("stage1_step: empty batch");
  Rng rng(step_seed);
  model.params().zero_grad();
  StepStats stats;
  const T inv_batch = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  for (const auto& ex : batch) {
    const double t = rng.uniform();
    const auto eps = BasicTensor<T>::randn(ex.target.tokens.shape(), rng);
    const auto noisy = noise_sample(ex.target.tokens, t, eps);
    const auto assembly = assemble(with_tokens(ex.target, noisy.x_t), ex.conditions.garment,
                                   ex.conditions.masked_person, model.text_stub());
    const auto pred = model.forward(assembly, t, model.switches());
    const auto loss = flow_loss(pred.eps, eps, flow.w(t));
    if (!std::isfinite(loss.item())) throw NumericError("stage-1 loss is not finite");
    backward(scale(loss, inv_batch));
    stats.loss += loss.item();
    stats.t_mean += t;
  }
  stats.loss /= static_cast<double>(batch.size());
  stats.t_mean /= static_cast<double>(batch.size());
  stats.grad_norm = model.params().grad_norm();
  if (!std::isfinite(stats.grad_norm)) throw NumericError("stage-1 gradient is not finite");
  adam_step(model.params(), opt);
  return stats;
}

}  // namespace mcdit
