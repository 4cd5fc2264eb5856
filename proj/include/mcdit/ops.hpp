#pragma once

// The differentiable op vocabulary: matmul, add, mul, scale, softmax_rows,
// layer_norm, gelu, relu, sum, mean, reshape, concat, slice, transpose.
// Everything else in the library is composed from these.

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "mcdit/tensor.hpp"

namespace mcdit {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using MutMap = Eigen::Map<RowMatrix<T>>;

template <class T>
std::size_t trailing(const BasicTensor<T>& x) {
  return x.shape().back();
}

enum class Broadcast { Same, Row, Scalar };

template <class T>
Broadcast broadcast_kind(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.numel() == 1) return Broadcast::Scalar;
  const bool row_shaped = b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1);
  if (row_shaped && b.numel() == trailing(a)) return Broadcast::Row;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                       shape_str(a.shape()));
}

}  // namespace detail

/// Matrix product of a [m x k] and b [k x n].
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(m * n);
  detail::MutMap<T>(out.data(), m, n).noalias() =
      detail::ConstMap<T>(a.data().data(), m, k) * detail::ConstMap<T>(b.data().data(), k, n);
  return detail::make_result<T>(
      {m, n}, std::move(out), {a.node(), b.node()},
      [m, k, n](const detail::Node<T>& self, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        detail::ConstMap<T> grad(g.data(), m, n);
        if (gin[0]) {
          detail::MutMap<T>(gin[0]->data(), m, k).noalias() +=
              grad * detail::ConstMap<T>(self.parents[1]->data.data(), k, n).transpose();
        }
        if (gin[1]) {
          detail::MutMap<T>(gin[1]->data(), k, n).noalias() +=
              detail::ConstMap<T>(self.parents[0]->data.data(), m, k).transpose() * grad;
        }
      },
      "matmul");
}

/// Elementwise sum. `b` may also be a row vector (broadcast over rows) or a
/// single value.
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "add");
  const auto n = a.numel();
  const auto width = detail::trailing(a);
  Buffer<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  switch (kind) {
    case detail::Broadcast::Same:
      for (std::size_t i = 0; i < n; ++i) out[i] += bd[i];
      break;
    case detail::Broadcast::Row:
      for (std::size_t i = 0; i < n; i += width)
        for (std::size_t j = 0; j < width; ++j) out[i + j] += bd[j];
      break;
    case detail::Broadcast::Scalar:
      for (auto& v : out) v += bd[0];
      break;
  }
  return detail::make_result<T>(
      a.shape(), std::move(out), {a.node(), b.node()},
      [kind, n, width](const detail::Node<T>&, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        if (gin[0]) {
          auto& ga = *gin[0];
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (gin[1]) {
          auto& gb = *gin[1];
          switch (kind) {
            case detail::Broadcast::Same:
              for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
              break;
            case detail::Broadcast::Row:
              for (std::size_t i = 0; i < n; i += width)
                for (std::size_t j = 0; j < width; ++j) gb[j] += g[i + j];
              break;
            case detail::Broadcast::Scalar: {
              T total = 0;
              for (std::size_t i = 0; i < n; ++i) total += g[i];
              gb[0] += total;
              break;
            }
          }
        }
      },
      "add");
}

/// Elementwise product with the same broadcasting rules as `add`.
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "mul");
  const auto n = a.numel();
  const auto width = detail::trailing(a);
  const auto ad = a.data();
  const auto bd = b.data();
  Buffer<T> out(n);
  auto b_index = [kind, width](std::size_t i) -> std::size_t {
    switch (kind) {
      case detail::Broadcast::Same:
        return i;
      case detail::Broadcast::Row:
        return i % width;
      case detail::Broadcast::Scalar:
        return 0;
    }
    return 0;
  };
  if (kind == detail::Broadcast::Row) {
    for (std::size_t i = 0; i < n; i += width)
      for (std::size_t j = 0; j < width; ++j) out[i + j] = ad[i + j] * bd[j];
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[b_index(i)];
  }
  return detail::make_result<T>(
      a.shape(), std::move(out), {a.node(), b.node()},
      [n, b_index](const detail::Node<T>& self, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        if (gin[0]) {
          auto& ga = *gin[0];
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[b_index(i)];
        }
        if (gin[1]) {
          auto& gb = *gin[1];
          for (std::size_t i = 0; i < n; ++i) gb[b_index(i)] += g[i] * av[i];
        }
      },
      "mul");
}

/// Multiplication by a constant.
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  Buffer<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node()},
      [factor](const detail::Node<T>&, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
      },
      "scale");
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

/// Adds a constant to every element.
template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value) {
  return add(x, BasicTensor<T>::scalar(value));
}

/// Softmax along the last axis, max-subtracted.
template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  if (!x.all_finite()) throw NumericError("softmax_rows: non-finite input");
  const auto width = detail::trailing(x);
  const auto rows = x.numel() / width;
  Buffer<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> in(x.data().data() + r * width, width);
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> row(out.data() + r * width, width);
    row = (in - in.maxCoeff()).exp();
    row /= row.sum();
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node()},
      [rows, width](const detail::Node<T>& self, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        auto& gx = *gin[0];
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = self.data.data() + r * width;
          const T* gy = g.data() + r * width;
          T dot = 0;
          for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
          T* dst = gx.data() + r * width;
          for (std::size_t j = 0; j < width; ++j) dst[j] += y[j] * (gy[j] - dot);
        }
      },
      "softmax_rows");
}

inline constexpr double kLayerNormEps = 1e-5;

/// Standardizes the last axis to zero mean and unit variance. No affine.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x) {
  const auto width = detail::trailing(x);
  if (width < 2) throw ContractError("layer_norm needs a last axis of at least 2, got " + shape_str(x.shape()));
  const auto rows = x.numel() / width;
  Buffer<T> out(x.numel());
  Buffer<T> inv_std(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * width;
    T mean = 0;
    for (std::size_t j = 0; j < width; ++j) mean += in[j];
    mean /= static_cast<T>(width);
    T var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(width);
    const T s = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    inv_std[r] = s;
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = (in[j] - mean) * s;
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node()},
      [rows, width, inv_std = std::move(inv_std)](const detail::Node<T>& self, std::span<const T> g,
                                                  std::span<Buffer<T>* const> gin) {
        auto& gx = *gin[0];
        const T inv_w = T(1) / static_cast<T>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xhat = self.data.data() + r * width;
          const T* gy = g.data() + r * width;
          T mean_g = 0, mean_gx = 0;
          for (std::size_t j = 0; j < width; ++j) {
            mean_g += gy[j];
            mean_gx += gy[j] * xhat[j];
          }
          mean_g *= inv_w;
          mean_gx *= inv_w;
          T* dst = gx.data() + r * width;
          for (std::size_t j = 0; j < width; ++j) dst[j] += inv_std[r] * (gy[j] - mean_g - xhat[j] * mean_gx);
        }
      },
      "layer_norm");
}

/// Exact (erf-based) GELU.
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  Buffer<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node()},
      [inv_sqrt2](const detail::Node<T>& self, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        const T inv_sqrt_2pi = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        const auto& xv = self.parents[0]->data;
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = xv[i];
          const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
          gx[i] += g[i] * (cdf + v * pdf);
        }
      },
      "gelu");
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  Buffer<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node()},
      [](const detail::Node<T>& self, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        const auto& xv = self.parents[0]->data;
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xv[i] > T(0)) gx[i] += g[i];
      },
      "relu");
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return detail::make_result<T>(
      {1}, {total}, {x.node()},
      [](const detail::Node<T>&, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        for (auto& v : *gin[0]) v += g[0];
      },
      "sum");
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  const T inv_n = T(1) / static_cast<T>(x.numel());
  T total = 0;
  for (T v : x.data()) total += v;
  return detail::make_result<T>(
      {1}, {total * inv_n}, {x.node()},
      [inv_n](const detail::Node<T>&, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        for (auto& v : *gin[0]) v += g[0] * inv_n;
      },
      "mean");
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return detail::make_result<T>(
      std::move(shape), Buffer<T>(x.data().begin(), x.data().end()), {x.node()},
      [](const detail::Node<T>&, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      },
      "reshape");
}

namespace detail {

// Views a tensor as [outer x extent x inner] around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Joins tensors along `axis`; all other dimensions must agree.
template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  std::vector<detail::NodePtr<T>> parents;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) {
        throw DimensionError("concat: " + shape_str(p.shape()) + " vs " + shape_str(first) + " off axis " +
                             std::to_string(axis));
      }
    }
    out_shape[axis] += p.dim(axis);
    extents.push_back(p.dim(axis));
    parents.push_back(p.node());
  }
  const auto split = detail::split_at(out_shape, axis);
  Buffer<T> out(numel_of(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto chunk = extents[k] * split.inner;
    const auto src = parts[k].data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src.data() + o * chunk, chunk, out.data() + o * split.extent * split.inner + offset * split.inner);
    }
    offset += extents[k];
  }
  return detail::make_result<T>(
      out_shape, std::move(out), std::move(parents),
      [split, extents](const detail::Node<T>&, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < extents.size(); ++k) {
          const auto chunk = extents[k] * split.inner;
          if (gin[k]) {
            auto& dst = *gin[k];
            for (std::size_t o = 0; o < split.outer; ++o) {
              const T* src = g.data() + o * split.extent * split.inner + offset * split.inner;
              T* d = dst.data() + o * chunk;
              for (std::size_t i = 0; i < chunk; ++i) d[i] += src[i];
            }
          }
          offset += extents[k];
        }
      },
      "concat");
}

/// The half-open range [start, start + length) of `axis`.
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const auto split = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const auto chunk = length * split.inner;
  Buffer<T> out(split.outer * chunk);
  const auto src = x.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(src.data() + o * split.extent * split.inner + start * split.inner, chunk, out.data() + o * chunk);
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x.node()},
      [split, start, chunk](const detail::Node<T>&, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        auto& dst = *gin[0];
        for (std::size_t o = 0; o < split.outer; ++o) {
          T* d = dst.data() + o * split.extent * split.inner + start * split.inner;
          const T* s = g.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) d[i] += s[i];
        }
      },
      "slice");
}

template <class T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t start, std::size_t length) {
  return slice(x, 0, start, length);
}

template <class T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t length) {
  return slice(x, x.rank() - 1, start, length);
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(x.shape()));
  const auto m = x.dim(0), n = x.dim(1);
  Buffer<T> out(m * n);
  detail::MutMap<T>(out.data(), n, m) = detail::ConstMap<T>(x.data().data(), m, n).transpose();
  return detail::make_result<T>(
      {n, m}, std::move(out), {x.node()},
      [m, n](const detail::Node<T>&, std::span<const T> g, std::span<Buffer<T>* const> gin) {
        detail::MutMap<T>(gin[0]->data(), m, n) += detail::ConstMap<T>(g.data(), n, m).transpose();
      },
      "transpose");
}

}  // namespace mcdit
