#pragma once

// Run configuration: an INI file with [model], [adapters], [flow], [distill],
// [data], [optimizer] and [run] sections. Every key has a default, so an empty
// or absent file is a valid configuration.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mcdit/adapters.hpp"
#include "mcdit/bench.hpp"
#include "mcdit/distill.hpp"
#include "mcdit/dit_config.hpp"
#include "mcdit/flow.hpp"
#include "mcdit/param_store.hpp"

namespace mcdit {

struct Stage1Settings {
  std::size_t batch = 16;
  std::size_t accumulation = 1;  // micro-batches per update
  std::int64_t max_steps = 5000;
};

struct Stage2Settings {
  std::size_t batch = 4;
  std::int64_t max_steps = 600;
  std::size_t pool_size = 256;  // training conditions with a cached teacher sample
  double lr_gen = 1e-4;
  double lr_disc = 1e-4;
};

struct RunConfig {
  DiTConfig model;
  AdapterConfig adapters;
  // The toy teacher trains markedly better with the velocity weighting.
  FlowConfig flow{.weighting = LossWeighting::Velocity};
  DistillConfig distill;
  Stage2Settings stage2;
  SplitConfig data;
  AdamConfig optimizer;
  Stage1Settings stage1;
  std::uint64_t seed = 42;
  std::size_t eval_n = 200;

  void validate() const {
    model.validate();
    if (model.image_size != kCanvas || model.channels != 3) {
      throw ConfigError("the synthetic canvas is " + std::to_string(kCanvas) + "x" + std::to_string(kCanvas) + "x3");
    }
    distill.validate();
    for (auto b : kAllBanks)
      if (adapters.bank(b).rank == 0) throw ConfigError(std::string("adapter rank must be >= 1: ") + to_string(b));
    if (flow.teacher_steps < 1 || flow.student_steps < 1) throw ConfigError("sampler step counts must be >= 1");
    if (!(flow.t_clamp > 0.0 && flow.t_clamp < 1.0)) throw ConfigError("t_clamp must lie in (0, 1)");
    if (!(flow.weight > 0.0)) throw ConfigError("flow weight must be positive");
    if (stage1.batch == 0 || stage1.accumulation == 0) throw ConfigError("batch and accumulation must be >= 1");
    if (stage1.max_steps < 0 || stage2.max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (stage2.batch == 0) throw ConfigError("stage-2 batch must be >= 1");
    if (stage2.pool_size == 0) throw ConfigError("stage-2 pool_size must be >= 1");
    if (data.n_train == 0 || data.n_test == 0) throw ConfigError("dataset sizes must be >= 1");
    if (eval_n == 0) throw ConfigError("eval_n must be >= 1");
    if (!(optimizer.lr > 0.0 && stage2.lr_gen > 0.0 && stage2.lr_disc > 0.0)) {
      throw ConfigError("learning rates must be positive");
    }
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
      throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(optimizer.eps > 0.0) || optimizer.weight_decay < 0.0) throw ConfigError("invalid Adam eps or weight decay");
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class V>
V parse_value(const std::string& key, const std::string& text);

template <>
inline double parse_value<double>(const std::string& key, const std::string& text) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) throw ConfigError(key + ": not a number: '" + text + "'");
  return v;
}

template <class V>
  requires std::is_integral_v<V>
V parse_integer(const std::string& key, const std::string& text) {
  V v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError(key + ": not a valid integer: '" + text + "'");
  }
  return v;
}

template <>
inline std::size_t parse_value<std::size_t>(const std::string& key, const std::string& text) {
  return parse_integer<std::size_t>(key, text);
}

template <>
inline std::int64_t parse_value<std::int64_t>(const std::string& key, const std::string& text) {
  return parse_integer<std::int64_t>(key, text);
}

template <>
inline int parse_value<int>(const std::string& key, const std::string& text) {
  return parse_integer<int>(key, text);
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

/// One table of (key, getter-to-string, setter-from-string) shared by the
/// reader and the writer, so the two cannot drift apart.
struct Field {
  std::string key;  // "section.name"
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class V>
std::string to_text(V v) {
  if constexpr (std::is_same_v<V, double>) {
    return format_double(v);
  } else if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else {
    return std::to_string(v);
  }
}

template <class V, class Access>
Field field(std::string key, Access access) {
  return Field{key, [access](const RunConfig& c) { return to_text<V>(access(const_cast<RunConfig&>(c))); },
               [access, key](RunConfig& c, const std::string& s) { access(c) = parse_value<V>(key, s); }};
}

template <class Parse, class Print, class Access>
Field enum_field(std::string key, Access access, Parse parse, Print print) {
  return Field{key, [access, print](const RunConfig& c) { return std::string(print(access(const_cast<RunConfig&>(c)))); },
               [access, parse](RunConfig& c, const std::string& s) { access(c) = parse(s); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(field<std::size_t>("model.d_model", [](RunConfig& c) -> auto& { return c.model.d_model; }));
    f.push_back(field<std::size_t>("model.n_heads", [](RunConfig& c) -> auto& { return c.model.n_heads; }));
    f.push_back(field<std::size_t>("model.n_blocks", [](RunConfig& c) -> auto& { return c.model.n_blocks; }));
    f.push_back(field<std::size_t>("model.mlp_ratio", [](RunConfig& c) -> auto& { return c.model.mlp_ratio; }));
    f.push_back(field<double>("model.rope_base", [](RunConfig& c) -> auto& { return c.model.rope_base; }));
    f.push_back(field<std::size_t>("model.patch", [](RunConfig& c) -> auto& { return c.model.patch; }));
    f.push_back(field<std::size_t>("adapters.g_rank", [](RunConfig& c) -> auto& { return c.adapters.g.rank; }));
    f.push_back(field<double>("adapters.g_scale", [](RunConfig& c) -> auto& { return c.adapters.g.scale; }));
    f.push_back(field<std::size_t>("adapters.mp_rank", [](RunConfig& c) -> auto& { return c.adapters.mp.rank; }));
    f.push_back(field<double>("adapters.mp_scale", [](RunConfig& c) -> auto& { return c.adapters.mp.scale; }));
    f.push_back(
        field<std::size_t>("adapters.distill_rank", [](RunConfig& c) -> auto& { return c.adapters.distill.rank; }));
    f.push_back(field<double>("adapters.distill_scale", [](RunConfig& c) -> auto& { return c.adapters.distill.scale; }));
    f.push_back(field<double>("flow.weight", [](RunConfig& c) -> auto& { return c.flow.weight; }));
    f.push_back(enum_field(
        "flow.weighting", [](RunConfig& c) -> auto& { return c.flow.weighting; }, parse_weighting,
        [](LossWeighting w) { return to_string(w); }));
    f.push_back(field<int>("flow.teacher_steps", [](RunConfig& c) -> auto& { return c.flow.teacher_steps; }));
    f.push_back(field<int>("flow.student_steps", [](RunConfig& c) -> auto& { return c.flow.student_steps; }));
    f.push_back(field<double>("flow.t_clamp", [](RunConfig& c) -> auto& { return c.flow.t_clamp; }));
    f.push_back(field<double>("distill.gamma", [](RunConfig& c) -> auto& { return c.distill.gamma; }));
    f.push_back(field<double>("distill.t_disc_min", [](RunConfig& c) -> auto& { return c.distill.t_min; }));
    f.push_back(field<double>("distill.t_disc_max", [](RunConfig& c) -> auto& { return c.distill.t_max; }));
    f.push_back(field<bool>("distill.condition_real_branch",
                            [](RunConfig& c) -> auto& { return c.distill.condition_real_branch; }));
    f.push_back(enum_field(
        "distill.real_source", [](RunConfig& c) -> auto& { return c.distill.real_source; }, parse_real_source,
        [](RealSource r) { return to_string(r); }));
    f.push_back(enum_field(
        "distill.grad_path", [](RunConfig& c) -> auto& { return c.distill.grad_path; }, parse_grad_path,
        [](GradPath g) { return to_string(g); }));
    f.push_back(field<std::size_t>("distill.head_hidden", [](RunConfig& c) -> auto& { return c.distill.head_hidden; }));
    f.push_back(field<double>("distill.r1_fd_step", [](RunConfig& c) -> auto& { return c.distill.r1_fd_step; }));
    f.push_back(field<std::size_t>("distill.batch", [](RunConfig& c) -> auto& { return c.stage2.batch; }));
    f.push_back(field<std::int64_t>("distill.max_steps", [](RunConfig& c) -> auto& { return c.stage2.max_steps; }));
    f.push_back(field<std::size_t>("distill.pool_size", [](RunConfig& c) -> auto& { return c.stage2.pool_size; }));
    f.push_back(field<double>("distill.lr_gen", [](RunConfig& c) -> auto& { return c.stage2.lr_gen; }));
    f.push_back(field<double>("distill.lr_disc", [](RunConfig& c) -> auto& { return c.stage2.lr_disc; }));
    f.push_back(field<std::uint64_t>("data.base_seed", [](RunConfig& c) -> auto& { return c.data.base_seed; }));
    f.push_back(field<std::size_t>("data.n_train", [](RunConfig& c) -> auto& { return c.data.n_train; }));
    f.push_back(field<std::size_t>("data.n_test", [](RunConfig& c) -> auto& { return c.data.n_test; }));
    f.push_back(field<double>("optimizer.lr", [](RunConfig& c) -> auto& { return c.optimizer.lr; }));
    f.push_back(field<double>("optimizer.beta1", [](RunConfig& c) -> auto& { return c.optimizer.beta1; }));
    f.push_back(field<double>("optimizer.beta2", [](RunConfig& c) -> auto& { return c.optimizer.beta2; }));
    f.push_back(field<double>("optimizer.eps", [](RunConfig& c) -> auto& { return c.optimizer.eps; }));
    f.push_back(field<double>("optimizer.weight_decay", [](RunConfig& c) -> auto& { return c.optimizer.weight_decay; }));
    f.push_back(field<std::size_t>("optimizer.batch", [](RunConfig& c) -> auto& { return c.stage1.batch; }));
    f.push_back(
        field<std::size_t>("optimizer.accumulation", [](RunConfig& c) -> auto& { return c.stage1.accumulation; }));
    f.push_back(field<std::uint64_t>("run.seed", [](RunConfig& c) -> auto& { return c.seed; }));
    f.push_back(field<std::int64_t>("run.max_steps", [](RunConfig& c) -> auto& { return c.stage1.max_steps; }));
    f.push_back(field<std::size_t>("run.eval_n", [](RunConfig& c) -> auto& { return c.eval_n; }));
    return f;
  }();
  return table;
}

}  // namespace detail

/// Applies `key = value` pairs of an INI stream on top of the defaults.
/// Unknown sections or keys are rejected.
inline RunConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  std::map<std::string, const detail::Field*> by_key;
  for (const auto& f : detail::fields()) by_key[f.key] = &f;
  RunConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key outside a section: " + section);
    for (const auto& [name, value] : body) {
      const auto key = section + "." + name;
      auto it = by_key.find(key);
      if (it == by_key.end()) throw ConfigError("unknown config key: " + key);
      it->second->set(cfg, value.data());
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  return parse_config(in);
}

/// Every key, in a fixed order; parse_config(write_config(c)) == c.
inline std::string write_config(const RunConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : detail::fields()) {
    const auto dot = f.key.find('.');
    const auto sec = f.key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out << '\n';
      out << '[' << sec << "]\n";
      section = sec;
    }
    out << f.key.substr(dot + 1) << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

/// MCDIT_SEED, when set, replaces run.seed.
inline void apply_env_overrides(RunConfig& cfg) {
  if (const char* s = std::getenv("MCDIT_SEED")) {
    cfg.seed = detail::parse_value<std::uint64_t>("MCDIT_SEED", s);
  }
}

}  // namespace mcdit
