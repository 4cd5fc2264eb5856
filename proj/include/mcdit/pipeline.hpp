#pragma once

// Training loops, sampling and evaluation wired to a RunConfig.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "mcdit/bench.hpp"
#include "mcdit/checkpoint.hpp"
#include "mcdit/config.hpp"
#include "mcdit/distill.hpp"
#include "mcdit/flow.hpp"

namespace mcdit {

using Model = DiT<float>;

inline Model make_model(const RunConfig& cfg) { return Model(cfg.model, cfg.adapters, derive_seed(cfg.seed, 0x30DE1)); }

inline Conditions<float> encode_conditions(const DiTConfig& m, const Image& garment, const Image& masked_person) {
  return {encode_latent(garment, m.patch, m.d_model), encode_latent(masked_person, m.patch, m.d_model)};
}

inline TrainingExample<float> make_example(const DiTConfig& m, const TryOnSample& s) {
  return {encode_latent(s.truth, m.patch, m.d_model), encode_conditions(m, s.garment, s.masked_person)};
}

inline std::vector<TrainingExample<float>> make_training_set(const RunConfig& cfg) {
  std::vector<TrainingExample<float>> out;
  out.reserve(cfg.data.n_train);
  for (std::size_t i = 0; i < cfg.data.n_train; ++i) out.push_back(make_example(cfg.model, gen_sample(train_seed(cfg.data, i))));
  return out;
}

/// Sampling noise for a query is a function of the query seed alone.
inline std::uint64_t sample_noise_seed(std::uint64_t query_seed) { return derive_seed(query_seed, 0x5A3B1E); }

/// Switches for inference: G and MP on; Distill on when the model has one.
inline SwitchSet inference_switches(const Model& model, bool use_distill = true) {
  const bool distill = use_distill && model.adapters().bank(BankId::Distill).materialized();
  return {SwitchState::Frozen, SwitchState::Frozen, distill ? SwitchState::Frozen : SwitchState::Disabled};
}

inline Image generate_image(const Model& model, const Image& garment, const Image& masked_person, int n_steps,
                            std::uint64_t seed, const SwitchSet& switches) {
  const auto& m = model.config();
  if (garment.height != m.image_size || garment.width != m.image_size || garment.channels != m.channels ||
      !garment.same_shape(masked_person)) {
    throw DimensionError("inputs must be " + std::to_string(m.image_size) + "x" + std::to_string(m.image_size) +
                         " RGB images");
  }
  NoGradGuard no_grad;
  const auto cond = encode_conditions(m, garment, masked_person);
  SamplerConfig sc;
  sc.n_steps = n_steps;
  const auto x = euler_sample(conditioned_denoiser(model, cond, switches), noisy_shape(model, cond), sc, seed);
  return decode_latent(with_tokens(cond.masked_person, x), m.patch, m.channels);
}

inline TryOnGenerator model_generator(const Model& model, int n_steps, SwitchSet switches) {
  return [&model, n_steps, switches](const TryOnQuery& q) {
    return generate_image(model, q.garment, q.masked_person, n_steps, sample_noise_seed(q.seed), switches);
  };
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

using StepObserver = std::function<void(std::int64_t step)>;

struct Stage1Log {
  std::ostream* csv = nullptr;   // step,t_mean,loss,grad_norm,wall_ms
  StepObserver after_step;       // called after each completed update
};

inline void write_stage1_header(std::ostream& out) { out << "step,t_mean,loss,grad_norm,wall_ms\n"; }

/// Runs max_steps updates. Each update draws batch * accumulation training
/// examples with replacement; the draw and the noise depend only on
/// (seed, step). A NumericError leaves the parameters at the last finite
/// update.
inline void train_stage1(Model& model, OptimizerState<float>& opt, const std::vector<TrainingExample<float>>& data,
                         const RunConfig& cfg, const Stage1Log& log = {}, std::int64_t first_step = 0) {
  if (data.empty()) throw ContractError("train_stage1: empty training set");
  model.apply_switches(stage1_switches());
  const auto per_update = cfg.stage1.batch * cfg.stage1.accumulation;
  const auto start = std::chrono::steady_clock::now();
  std::vector<TrainingExample<float>> batch;
  for (std::int64_t step = first_step; step < cfg.stage1.max_steps; ++step) {
    const auto step_u = static_cast<std::uint64_t>(step);
    Rng pick(derive_seed(cfg.seed, 0xBA7C0000ULL + step_u));
    batch.clear();
    for (std::size_t i = 0; i < per_update; ++i)
      batch.push_back(data[static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))]);
    const auto stats = stage1_step(model, batch, opt, cfg.flow, derive_seed(cfg.seed, 0x57E90000ULL + step_u));
    if (log.csv) {
      const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      *log.csv << step + 1 << ',' << std::setprecision(9) << stats.t_mean << ',' << stats.loss << ','
               << stats.grad_norm << ',' << std::setprecision(6) << ms << '\n';
    }
    if (log.after_step) log.after_step(step + 1);
  }
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

inline void write_stage2_header(std::ostream& out) {
  out << "step,gen_loss,disc_loss,r1,real_logit_mean,fake_logit_mean\n";
}

/// Conditions of the first pool_size training samples with their real
/// targets. Teacher targets are 50-step samples drawn once; the teacher never
/// changes during Stage 2, so caching them is exact.
inline std::vector<DistillExample<float>> make_distill_pool(const Model& model, const RunConfig& cfg) {
  std::vector<DistillExample<float>> pool;
  const auto n = std::min(cfg.stage2.pool_size, cfg.data.n_train);
  pool.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = gen_sample(train_seed(cfg.data, i));
    DistillExample<float> ex;
    ex.conditions = encode_conditions(cfg.model, s.garment, s.masked_person);
    if (cfg.distill.real_source == RealSource::Teacher) {
      ex.real = teacher_generate(model, ex.conditions, derive_seed(s.seed, 0x7EAC), cfg.flow.teacher_steps);
    } else {
      ex.real = encode_latent(s.truth, cfg.model.patch, cfg.model.d_model).tokens;
    }
    pool.push_back(std::move(ex));
  }
  return pool;
}

struct Stage2Optimizers {
  OptimizerState<float> gen, disc;
};

inline Stage2Optimizers make_stage2_optimizers(const RunConfig& cfg) {
  Stage2Optimizers o;
  o.gen.config = cfg.optimizer;
  o.gen.config.lr = cfg.stage2.lr_gen;
  o.gen.scope = {kDistillScope};
  o.disc.config = cfg.optimizer;
  o.disc.config.lr = cfg.stage2.lr_disc;
  o.disc.scope = {kHeadScope};
  return o;
}

inline void train_stage2(Model& model, const DiscriminatorHeads<float>& heads, Stage2Optimizers& opt,
                         const std::vector<DistillExample<float>>& pool, const RunConfig& cfg,
                         std::ostream* csv = nullptr, const StepObserver& after_step = {}) {
  if (pool.empty()) throw ContractError("train_stage2: empty pool");
  DistillConfig dc = cfg.distill;
  dc.student_steps = cfg.flow.student_steps;
  std::vector<DistillExample<float>> batch;
  for (std::int64_t step = 0; step < cfg.stage2.max_steps; ++step) {
    const auto step_u = static_cast<std::uint64_t>(step);
    Rng pick(derive_seed(cfg.seed, 0xD1570000ULL + step_u));
    batch.clear();
    for (std::size_t i = 0; i < cfg.stage2.batch; ++i)
      batch.push_back(pool[static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))]);
    const auto s = stage2_step(model, heads, batch, opt.gen, opt.disc, dc, derive_seed(cfg.seed, 0xADD0000ULL + step_u));
    if (csv) {
      *csv << step + 1 << ',' << std::setprecision(9) << s.gen_loss << ',' << s.disc_loss << ',' << s.r1 << ','
           << s.real_logit_mean << ',' << s.fake_logit_mean << '\n';
    }
    if (after_step) after_step(step + 1);
  }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline ParamReport model_param_report(const Model& model) {
  const auto& p = model.params();
  bool backbone_trainable = false;
  for (const auto& [name, entry] : p.entries())
    if (is_backbone_param(name) && entry.trainable) backbone_trainable = true;
  AdapterConfig ac;
  for (auto b : kAllBanks) ac.bank(b).rank = model.adapters().bank(b).rank;
  return count_params(model.config(), ac, model.switches(), backbone_trainable);
}

}  // namespace mcdit
