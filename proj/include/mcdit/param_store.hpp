#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mcdit/tensor.hpp"

namespace mcdit {

/// Named parameters in deterministic (sorted) order. Only trainable entries
/// record gradients.
template <class T>
class ParamStore {
 public:
  struct Entry {
    BasicTensor<T> tensor;
    bool trainable = false;
  };

  BasicTensor<T> add(const std::string& name, BasicTensor<T> tensor, bool trainable) {
    if (entries_.contains(name)) throw ContractError("duplicate parameter name: " + name);
    tensor.set_requires_grad(trainable);
    entries_.emplace(name, Entry{tensor, trainable});
    return tensor;
  }

  bool contains(const std::string& name) const { return entries_.contains(name); }

  const BasicTensor<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
    return it->second.tensor;
  }

  BasicTensor<T>& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
    return it->second.tensor;
  }

  bool is_trainable(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
    return it->second.trainable;
  }

  void set_trainable(const std::string& name, bool trainable) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
    it->second.trainable = trainable;
    it->second.tensor.set_requires_grad(trainable);
    if (!trainable) it->second.tensor.clear_grad();
  }

  /// Applies `trainable` to every entry whose name starts with `prefix`.
  void set_trainable_prefix(std::string_view prefix, bool trainable) {
    for (auto& [name, entry] : entries_) {
      if (name.starts_with(prefix)) set_trainable(name, trainable);
    }
  }

  void set_all_trainable(bool trainable) {
    for (auto& [name, entry] : entries_) set_trainable(name, trainable);
  }

  void zero_grad() {
    for (auto& [name, entry] : entries_) entry.tensor.clear_grad();
  }

  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, entry] : entries_) out.push_back(name);
    return out;
  }

  std::size_t numel(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& [name, entry] : entries_)
      if (name.starts_with(prefix)) n += entry.tensor.numel();
    return n;
  }

  std::size_t trainable_numel(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& [name, entry] : entries_)
      if (entry.trainable && name.starts_with(prefix)) n += entry.tensor.numel();
    return n;
  }

  /// Global L2 norm of the accumulated gradients.
  double grad_norm() const {
    double total = 0;
    for (const auto& [name, entry] : entries_)
      for (T g : entry.tensor.grad()) total += static_cast<double>(g) * g;
    return std::sqrt(total);
  }

  /// Overwrites values of existing entries from `other` (shapes must match);
  /// entries only present in `other` are added as frozen.
  void assign_from(const ParamStore& other) {
    for (const auto& [name, entry] : other.entries_) {
      auto it = entries_.find(name);
      if (it == entries_.end()) {
        add(name, entry.tensor.detach(), false);
        continue;
      }
      if (it->second.tensor.shape() != entry.tensor.shape()) {
        throw DimensionError("parameter " + name + ": stored " + shape_str(entry.tensor.shape()) + " vs model " +
                             shape_str(it->second.tensor.shape()));
      }
      auto dst = it->second.tensor.mutable_data();
      std::copy(entry.tensor.data().begin(), entry.tensor.data().end(), dst.begin());
    }
  }

 private:
  std::map<std::string, Entry> entries_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Moments for the entries one optimizer owns. `scope` lists name prefixes;
/// an empty scope means every trainable entry.
template <class T>
struct OptimizerState {
  struct Moments {
    std::vector<T> first;
    std::vector<T> second;
  };

  AdamConfig config;
  std::vector<std::string> scope;
  std::uint64_t step = 0;
  std::map<std::string, Moments> moments;

  bool owns(const std::string& name) const {
    if (scope.empty()) return true;
    for (const auto& prefix : scope)
      if (name.starts_with(prefix)) return true;
    return false;
  }
};

/// Bias-corrected Adam with decoupled weight decay on the trainable entries in
/// the optimizer's scope; their gradients are then cleared. Frozen entries are
/// never touched.
template <class T>
void adam_step(ParamStore<T>& store, OptimizerState<T>& state) {
  for (auto& [name, entry] : store.entries()) {
    if (entry.trainable && state.owns(name) && !entry.tensor.has_grad()) {
      throw StateError("adam_step: trainable parameter " + name + " has no gradient");
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  for (auto& [name, entry] : store.entries()) {
    if (!entry.trainable || !state.owns(name)) continue;
    auto& m = state.moments[name];
    auto values = entry.tensor.mutable_data();
    const auto grad = entry.tensor.grad();
    if (m.first.size() != values.size()) {
      m.first.assign(values.size(), T(0));
      m.second.assign(values.size(), T(0));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = grad[i];
      m.first[i] = b1 * m.first[i] + (T(1) - b1) * g;
      m.second[i] = b2 * m.second[i] + (T(1) - b2) * g * g;
      const double m_hat = m.first[i] / bias1;
      const double v_hat = m.second[i] / bias2;
      const double update = m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * values[i];
      values[i] = static_cast<T>(values[i] - c.lr * update);
    }
    entry.tensor.zero_grad();
  }
}

}  // namespace mcdit
