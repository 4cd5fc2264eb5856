#include <gtest/gtest.h>

#include <cmath>

#include "mcdit/flow.hpp"
#include "support.hpp"

using namespace mcdit;
using namespace mcdit::testing;

namespace {

Tensor randn(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng);
}

/// Knows the one straight line from x0 (t = 0) to eps (t = 1): its velocity
/// is eps - x0 everywhere and its noise prediction is the true eps.
Denoiser<float> line_oracle(const Tensor& x0, const Tensor& eps) {
  const auto v = sub(eps, x0);
  return [v](const Tensor& x_t, double t) {
    return DenoiserOutput<float>{add(x_t, scale(v, static_cast<float>(1.0 - t))), v};
  };
}

std::vector<TrainingExample<float>> toy_set(std::size_t n, std::uint64_t seed) {
  // Targets are a fixed function of the two conditions.
  Rng rng(seed);
  std::vector<TrainingExample<float>> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto mp = random_grid<float>(4, 4, 32, rng);
    auto g = random_grid<float>(4, 4, 32, rng);
    auto target = with_tokens(mp, scale(add(mp.tokens, g.tokens), 0.5f));
    out.push_back({target, {g, mp}});
  }
  return out;
}

}  // namespace

TEST(NoiseSample, Endpoints) {
  const auto x0 = randn({4, 8}, 1), eps = randn({4, 8}, 2);
  EXPECT_TRUE(bit_equal(noise_sample(x0, 0.0, eps).x_t, x0));
  EXPECT_TRUE(bit_equal(noise_sample(x0, 1.0, eps).x_t, eps));
  const auto mid = noise_sample(x0, 0.5, eps).x_t;
  for (std::size_t i = 0; i < 32; ++i) EXPECT_FLOAT_EQ(mid[i], (x0[i] + eps[i]) / 2);
}

TEST(NoiseSample, OutOfRangeTimeIsContractError) {
  const auto x = Tensor::zeros({2});
  EXPECT_THROW(noise_sample(x, 1.5, x), ContractError);
  EXPECT_THROW(noise_sample(x, -0.1, x), ContractError);
  EXPECT_THROW(noise_sample(x, std::nan(""), x), ContractError);
}

TEST(FlowLoss, Examples) {
  const auto eps = randn({3, 5}, 3);
  EXPECT_EQ(flow_loss(eps, eps).item(), 0.0f);
  EXPECT_FLOAT_EQ(flow_loss(add_scalar(eps, 1.0f), eps).item(), 1.0f);
  const auto e2 = randn({3, 5}, 4);
  EXPECT_FLOAT_EQ(flow_loss(e2, eps, 2.0).item(), 2.0f * flow_loss(e2, eps).item());
}

TEST(FlowLoss, VelocityWeightingMatchesVelocityError) {
  FlowConfig c;
  EXPECT_EQ(c.w(0.7), 1.0);
  c.weighting = LossWeighting::Velocity;
  EXPECT_NEAR(c.w(0.5), 4.0, 1e-12);
  EXPECT_NEAR(c.w(1.0), 1.0 / (1e-3 * 1e-3), 1e-3);
  EXPECT_EQ(parse_weighting("velocity"), LossWeighting::Velocity);
  EXPECT_THROW(parse_weighting("cosine"), ConfigError);
}

TEST(PredictX0, InvertsNoiseSample) {
  const auto x0 = randn({6, 8}, 5), eps = randn({6, 8}, 6);
  for (double t : {0.0, 0.1, 0.5, 0.9, 0.99}) {
    const auto back = predict_x0(noise_sample(x0, t, eps).x_t, eps, t);
    for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(back[i], x0[i], 1e-5 / (1 - t)) << t;
  }
}

TEST(PredictX0, AtTimeZeroReturnsInput) {
  const auto x = randn({2, 3}, 7);
  EXPECT_TRUE(bit_equal(predict_x0(x, randn({2, 3}, 8), 0.0), x));
}

TEST(PredictX0, MatchesScalarRecomputation) {
  const auto x = randn({4, 4}, 9), e = randn({4, 4}, 10);
  const auto y = predict_x0(x, e, 0.5);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[i], (double(x[i]) - 0.5 * e[i]) / 0.5, 1e-5);
}

TEST(PredictX0, ClampsNearOneAndCounts) {
  const auto x = randn({2}, 11), e = randn({2}, 12);
  ClampCounter counter;
  const auto y = predict_x0(x, e, 1.0, 1.0 - 1e-3, &counter);
  EXPECT_EQ(counter.count, 1u);
  EXPECT_TRUE(y.all_finite());
  EXPECT_TRUE(bit_equal(y, predict_x0(x, e, 1.0 - 1e-3)));
}

TEST(Euler, TimeGrid) {
  const auto g = time_grid(4);
  EXPECT_EQ(g, (std::vector<double>{1.0, 0.75, 0.5, 0.25, 0.0}));
  EXPECT_THROW(time_grid(0), ConfigError);
}

TEST(Euler, StraightLineIsExactForAnyStepCount) {
  const auto x0 = randn({5, 8}, 13), eps = randn({5, 8}, 14);
  for (int n : {1, 2, 8, 50}) {
    SamplerConfig cfg;
    cfg.n_steps = n;
    const auto out = euler_sample(line_oracle(x0, eps), eps, cfg);
    for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(out[i], x0[i], 1e-4) << n;
  }
}

TEST(Euler, BareNoisePredictionRecoversLineVelocity) {
  const auto x0 = randn({3, 4}, 15), eps = randn({3, 4}, 16);
  const auto x_t = noise_sample(x0, 0.3, eps).x_t;
  const auto v = velocity_from_eps(x_t, eps, 0.3, 1.0 - 1e-3);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(v[i], eps[i] - x0[i], 1e-5);
}

TEST(Euler, ModelSamplingIsDeterministicAndStepCountMatters) {
  DiT<float> model(tiny_config(), AdapterConfig{}, 17);
  Rng rng(18);
  const Conditions<float> cond{random_grid<float>(4, 4, 32, rng), random_grid<float>(4, 4, 32, rng)};
  const auto den = conditioned_denoiser(model, cond, model.switches());
  SamplerConfig c50, c8;
  c8.n_steps = 8;
  const auto shape = noisy_shape(model, cond);
  EXPECT_EQ(shape, (Shape{16, 32}));
  const auto a = euler_sample(den, shape, c50, 5);
  EXPECT_TRUE(bit_equal(a, euler_sample(den, shape, c50, 5)));
  EXPECT_FALSE(bit_equal(a, euler_sample(den, shape, c8, 5)));
  EXPECT_FALSE(bit_equal(a, euler_sample(den, shape, c50, 6)));
  EXPECT_THROW(euler_sample(den, shape, SamplerConfig{0}, 5), ConfigError);
}

TEST(FlowLoss, ZeroPredictionCostsAboutOne) {
  Rng rng(19);
  FlowConfig flow;
  double total = 0;
  for (int draw = 0; draw < 1000; ++draw) {
    const double t = rng.uniform();
    const auto eps = Tensor::randn({16, 32}, rng);
    total += flow_loss(Tensor::zeros({16, 32}), eps, flow.w(t)).item();
  }
  EXPECT_NEAR(total / 1000, 1.0, 0.05);
}

TEST(Stage1, DistillBankMustBeDisabled) {
  DiT<float> model(tiny_config(), AdapterConfig{}, 20);
  model.materialize_distill(21);
  model.set_switch(BankId::Distill, SwitchState::Frozen);
  OptimizerState<float> opt;
  EXPECT_THROW(stage1_step(model, toy_set(2, 22), opt, FlowConfig{}, 1), ConfigError);
}

TEST(Stage1, OnlyTrainableEntriesMove) {
  DiT<float> model(tiny_config(), AdapterConfig{}, 23);
  randomize(model.params(), 24, 0.2, "blocks.");  // stands in for pretrained weights
  model.set_backbone_trainable(false);
  ParamStore<float> before;
  for (const auto& [name, entry] : model.params().entries()) before.add(name, entry.tensor.detach(), false);
  OptimizerState<float> opt;
  const auto data = toy_set(4, 25);
  for (int step = 0; step < 2; ++step) stage1_step(model, data, opt, FlowConfig{}, 26 + step);
  for (const auto& [name, entry] : model.params().entries()) {
    const bool adapter = name.starts_with("lora.g.") || name.starts_with("lora.mp.");
    // conditioning-token queries of the last block never reach the output
    if (adapter && name.find(".b01.q.up") != std::string::npos) {
      for (float v : entry.tensor.data()) EXPECT_EQ(v, 0.0f) << name;
      continue;
    }
    EXPECT_EQ(bit_equal(entry.tensor, before.get(name)), !adapter) << name;
  }
}

TEST(Stage1, LossFallsOnSmallToySet) {
  DiT<float> model(tiny_config(), AdapterConfig{}, 27);
  // one shared target, so the achievable loss is far below the x_t baseline
  auto data = toy_set(64, 28);
  for (auto& ex : data) ex.target = data[0].target;
  OptimizerState<float> opt;
  opt.config.lr = 1e-3;
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    Rng pick(derive_seed(29, step));
    std::vector<TrainingExample<float>> batch;
    for (int i = 0; i < 8; ++i) batch.push_back(data[pick.uniform_int(0, 63)]);
    losses.push_back(stage1_step(model, batch, opt, FlowConfig{}, derive_seed(30, step)).loss);
  }
  const auto avg = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 40; ++i) s += losses[i];
    return s / 40;
  };
  EXPECT_LT(avg(160), 0.9 * avg(0));
}
