#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "mcdit/tensor.hpp"

namespace mcdit {

template <class T>
constexpr T default_fd_step() {
  return sizeof(T) >= 8 ? T(1e-5) : T(1e-3);
}

struct GradCheckOptions {
  /// Central-difference step; 0 picks a default for the scalar type.
  double step = 0.0;
  /// Upper bound on checked entries per tensor (0 = all). Entries are
  /// spread evenly across the tensor.
  std::size_t max_entries = 0;
};

namespace detail {

template <class T>
T relative_error(T analytic, T numeric) {
  const T denom = std::max({std::abs(analytic), std::abs(numeric), T(1e-8)});
  return std::abs(analytic - numeric) / denom;
}

inline std::vector<std::size_t> probe_indices(std::size_t n, std::size_t max_entries) {
  std::vector<std::size_t> idx;
  if (max_entries == 0 || max_entries >= n) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  for (std::size_t k = 0; k < max_entries; ++k) idx.push_back(k * n / max_entries);
  return idx;
}

template <class T>
T eval_scalar(const std::function<BasicTensor<T>()>& f) {
  NoGradGuard guard;
  const auto y = f();
  if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
  return y.item();
}

}  // namespace detail

/// Largest relative error between reverse-mode gradients and central
/// differences of `f` with respect to the leaves in `wrt`. The leaves are
/// perturbed in place and restored bit-exactly.
template <class T>
T grad_check_leaves(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>> wrt,
                    GradCheckOptions options = {}) {
  const T h = options.step > 0 ? static_cast<T>(options.step) : default_fd_step<T>();
  std::vector<bool> saved_flags;
  for (auto& x : wrt) {
    saved_flags.push_back(x.requires_grad());
    x.set_requires_grad(true);
  }
  const T first = detail::eval_scalar(f);
  const T second = detail::eval_scalar(f);
  if (std::memcmp(&first, &second, sizeof(T)) != 0) {
    throw OracleError("grad_check: function is not deterministic");
  }
  std::vector<BasicTensor<T>> analytic;
  {
    const auto y = f();
    if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
    analytic = gradients(y, wrt);
  }
  T worst = 0;
  for (std::size_t t = 0; t < wrt.size(); ++t) {
    auto values = wrt[t].mutable_data();
    for (auto i : detail::probe_indices(values.size(), options.max_entries)) {
      const T original = values[i];
      values[i] = original + h;
      const T plus = detail::eval_scalar(f);
      values[i] = original - h;
      const T minus = detail::eval_scalar(f);
      values[i] = original;
      const T numeric = (plus - minus) / (T(2) * h);
      worst = std::max(worst, detail::relative_error(analytic[t][i], numeric));
    }
  }
  for (std::size_t t = 0; t < wrt.size(); ++t) wrt[t].set_requires_grad(saved_flags[t]);
  return worst;
}

/// Single-input form: max relative gradient error of the scalar function `f`
/// at `x`.
template <class T>
T grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, const BasicTensor<T>& x,
             GradCheckOptions options = {}) {
  auto leaf = x.detach();
  return grad_check_leaves<T>([&] { return f(leaf); }, {leaf}, options);
}

}  // namespace mcdit
