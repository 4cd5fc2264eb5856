#pragma once

// Switchable low-rank adapters on the Q/K/V projections, routed by token
// group. Three banks exist: G (garment path), MP (masked-person path) and
// Distill (the few-step student). Each bank has one switch shared by all its
// adapters.

#include <array>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "mcdit/conditioning.hpp"
#include "mcdit/dit_config.hpp"
#include "mcdit/ops.hpp"
#include "mcdit/param_store.hpp"

namespace mcdit {

enum class SwitchState { Disabled, Frozen, Training };
enum class BankId { G = 0, MP = 1, Distill = 2 };
enum class Projection { Q = 0, K = 1, V = 2 };

inline constexpr std::array<BankId, 3> kAllBanks{BankId::G, BankId::MP, BankId::Distill};
inline constexpr std::array<Projection, 3> kAllProjections{Projection::Q, Projection::K, Projection::V};

inline const char* to_string(SwitchState s) {
  switch (s) {
    case SwitchState::Disabled:
      return "disabled";
    case SwitchState::Frozen:
      return "frozen";
    case SwitchState::Training:
      return "training";
  }
  return "?";
}

inline const char* to_string(BankId b) {
  switch (b) {
    case BankId::G:
      return "g";
    case BankId::MP:
      return "mp";
    case BankId::Distill:
      return "distill";
  }
  return "?";
}

inline const char* to_string(Projection p) {
  switch (p) {
    case Projection::Q:
      return "q";
    case Projection::K:
      return "k";
    case Projection::V:
      return "v";
  }
  return "?";
}

/// Switch state of each bank, indexed by BankId.
using SwitchSet = std::array<SwitchState, 3>;

inline SwitchState state_of(const SwitchSet& s, BankId b) { return s[static_cast<std::size_t>(b)]; }

inline SwitchSet stage1_switches() { return {SwitchState::Training, SwitchState::Training, SwitchState::Disabled}; }
inline SwitchSet teacher_switches() { return {SwitchState::Frozen, SwitchState::Frozen, SwitchState::Disabled}; }
inline SwitchSet student_switches() { return {SwitchState::Frozen, SwitchState::Frozen, SwitchState::Training}; }

/// delta(x) = scale * (x * down) * up, with `up` zero at initialization.
template <class T>
struct LoRAAdapter {
  BasicTensor<T> down;  // [d_in x r]
  BasicTensor<T> up;    // [r x d_out]
  T scale = T(1);

  std::size_t rank() const { return down.cols(); }
  BasicTensor<T> delta(const BasicTensor<T>& x) const { return mcdit::scale(matmul(matmul(x, down), up), scale); }
};

struct BankConfig {
  std::size_t rank = 8;
  double scale = 0.0;  // 0 selects 1/rank

  double effective_scale() const { return scale > 0.0 ? scale : 1.0 / static_cast<double>(rank); }
};

struct AdapterConfig {
  BankConfig g{8};
  BankConfig mp{4};
  BankConfig distill{16};

  const BankConfig& bank(BankId b) const {
    switch (b) {
      case BankId::G:
        return g;
      case BankId::MP:
        return mp;
      case BankId::Distill:
        return distill;
    }
    return g;
  }

  BankConfig& bank(BankId b) { return const_cast<BankConfig&>(std::as_const(*this).bank(b)); }
};

/// Which banks act on each token group's projections.
struct RoutingPolicy {
  std::array<std::array<bool, 3>, kTokenGroupCount> table{};

  bool routes(TokenGroup g, BankId b) const {
    return table[static_cast<std::size_t>(g)][static_cast<std::size_t>(b)];
  }

  /// Garment -> G, masked person -> MP, noisy -> neither; Distill reaches
  /// every group whenever it is not disabled.
  static RoutingPolicy standard() {
    RoutingPolicy p;
    p.table[static_cast<std::size_t>(TokenGroup::Garment)] = {true, false, true};
    p.table[static_cast<std::size_t>(TokenGroup::MaskedPerson)] = {false, true, true};
    p.table[static_cast<std::size_t>(TokenGroup::Noisy)] = {false, false, true};
    p.table[static_cast<std::size_t>(TokenGroup::Text)] = {false, false, true};
    return p;
  }
};

template <class T>
struct AdapterBank {
  BankId id = BankId::G;
  std::size_t rank = 0;
  T scale = T(0);
  SwitchState state = SwitchState::Disabled;
  std::vector<std::array<LoRAAdapter<T>, 3>> blocks;  // [block][projection]

  bool materialized() const { return !blocks.empty(); }
  const LoRAAdapter<T>& adapter(std::size_t block, Projection p) const {
    return blocks.at(block)[static_cast<std::size_t>(p)];
  }
};

inline std::string bank_prefix(BankId b) { return std::string("lora.") + to_string(b) + "."; }

inline std::string adapter_name(BankId b, std::size_t block, Projection p, const char* part) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "b%02zu", block);
  return bank_prefix(b) + buf + "." + to_string(p) + "." + part;
}

template <class T>
class AdapterSet {
 public:
  AdapterSet() = default;
  AdapterSet(const AdapterConfig& config, RoutingPolicy policy = RoutingPolicy::standard()) : policy_(policy) {
    for (auto b : kAllBanks) {
      auto& bank = banks_[static_cast<std::size_t>(b)];
      bank.id = b;
      bank.rank = config.bank(b).rank;
      bank.scale = static_cast<T>(config.bank(b).effective_scale());
      if (bank.rank == 0) throw ConfigError(std::string("adapter rank must be >= 1 for bank ") + to_string(b));
    }
  }

  /// Creates the bank's parameters in `store` (down ~ N(0, 1/d_in), up = 0).
  /// Entries start frozen; set_switch decides what trains.
  void materialize(BankId b, ParamStore<T>& store, const DiTConfig& cfg, Rng& rng) {
    auto& bank = banks_[static_cast<std::size_t>(b)];
    if (bank.materialized()) throw StateError(std::string("bank already materialized: ") + to_string(b));
    const auto d = cfg.d_model;
    const double std_down = 1.0 / std::sqrt(static_cast<double>(d));
    bank.blocks.resize(cfg.n_blocks);
    for (std::size_t k = 0; k < cfg.n_blocks; ++k) {
      for (auto p : kAllProjections) {
        auto& a = bank.blocks[k][static_cast<std::size_t>(p)];
        a.down = store.add(adapter_name(b, k, p, "down"), BasicTensor<T>::randn({d, bank.rank}, rng, std_down), false);
        a.up = store.add(adapter_name(b, k, p, "up"), BasicTensor<T>::zeros({bank.rank, d}), false);
        a.scale = bank.scale;
      }
    }
  }

  /// Binds an existing bank to tensors already present in `store` (after a
  /// checkpoint load).
  void attach(BankId b, ParamStore<T>& store, const DiTConfig& cfg) {
    auto& bank = banks_[static_cast<std::size_t>(b)];
    bank.blocks.assign(cfg.n_blocks, {});
    for (std::size_t k = 0; k < cfg.n_blocks; ++k) {
      for (auto p : kAllProjections) {
        auto& a = bank.blocks[k][static_cast<std::size_t>(p)];
        a.down = store.get(adapter_name(b, k, p, "down"));
        a.up = store.get(adapter_name(b, k, p, "up"));
        if (a.down.shape() != Shape{cfg.d_model, bank.rank} || a.up.shape() != Shape{bank.rank, cfg.d_model}) {
          throw DimensionError(std::string("stored adapter shape disagrees with configured rank for bank ") +
                               to_string(b));
        }
        a.scale = bank.scale;
      }
    }
  }

  /// Bank-wide switch; Training is exactly the set of trainable entries.
  void set_switch(BankId b, SwitchState state, ParamStore<T>& store) {
    auto& bank = banks_[static_cast<std::size_t>(b)];
    if (state != SwitchState::Disabled && !bank.materialized()) {
      throw StateError(std::string("cannot enable unmaterialized bank ") + to_string(b));
    }
    bank.state = state;
    if (bank.materialized()) store.set_trainable_prefix(bank_prefix(b), state == SwitchState::Training);
  }

  void apply(const SwitchSet& switches, ParamStore<T>& store) {
    for (auto b : kAllBanks) set_switch(b, state_of(switches, b), store);
  }

  SwitchSet switches() const { return {banks_[0].state, banks_[1].state, banks_[2].state}; }

  const AdapterBank<T>& bank(BankId b) const { return banks_[static_cast<std::size_t>(b)]; }
  AdapterBank<T>& bank(BankId b) { return banks_[static_cast<std::size_t>(b)]; }
  const RoutingPolicy& policy() const { return policy_; }

 private:
  std::array<AdapterBank<T>, 3> banks_{};
  RoutingPolicy policy_ = RoutingPolicy::standard();
};

/// y = x W + b + sum over routed, non-disabled banks of the adapter delta.
/// `switches` is the per-call view (the teacher sees Distill disabled even
/// while the student trains it). Disabled banks are skipped outright, which
/// is the zero-scale contract with no floating-point residue.
template <class T>
BasicTensor<T> routed_project(const BasicTensor<T>& x, TokenGroup group, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias, const AdapterSet<T>& adapters, const SwitchSet& switches,
                              std::size_t block, Projection proj) {
  auto y = add(matmul(x, weight), bias);
  for (auto b : kAllBanks) {
    if (state_of(switches, b) == SwitchState::Disabled || !adapters.policy().routes(group, b)) continue;
    const auto& bank = adapters.bank(b);
    if (!bank.materialized()) throw StateError(std::string("bank ") + to_string(b) + " is enabled but empty");
    y = add(y, bank.adapter(block, proj).delta(x));
  }
  return y;
}

struct BankCount {
  BankId bank;
  std::size_t rank;
  std::size_t count;
  bool trainable;
  double ratio;  // count / backbone size
};

struct ParamReport {
  std::vector<BankCount> banks;
  std::size_t backbone = 0;
  bool backbone_trainable = false;
  std::size_t trainable_total = 0;
  double trainable_ratio = 0.0;
};

/// Closed-form adapter accounting: r * (d_in + d_out) per adapted matrix,
/// three matrices (Q, K, V) per block.
inline std::size_t bank_param_count(const DiTConfig& cfg, std::size_t rank) {
  return cfg.n_blocks * 3 * rank * (cfg.d_model + cfg.d_model);
}

inline ParamReport count_params(const DiTConfig& cfg, const AdapterConfig& adapters, const SwitchSet& switches,
                                bool backbone_trainable) {
  ParamReport report;
  report.backbone = backbone_param_count(cfg);
  report.backbone_trainable = backbone_trainable;
  report.trainable_total = backbone_trainable ? report.backbone : 0;
  for (auto b : kAllBanks) {
    const auto rank = adapters.bank(b).rank;
    const auto n = bank_param_count(cfg, rank);
    const bool trains = state_of(switches, b) == SwitchState::Training;
    report.banks.push_back({b, rank, n, trains, static_cast<double>(n) / static_cast<double>(report.backbone)});
    if (trains) report.trainable_total += n;
  }
  report.trainable_ratio = static_cast<double>(report.trainable_total) / static_cast<double>(report.backbone);
  return report;
}

}  // namespace mcdit
