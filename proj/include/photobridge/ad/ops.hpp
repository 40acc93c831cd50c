#pragma once

// Differentiable primitives. All matrix-shaped ops take rank-2 tensors; a
// rank-1 tensor of length c is accepted wherever a 1 x c row is.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "photobridge/ad/tensor.hpp"

namespace photobridge::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <std::floating_point T>
void require_matrix(const std::string& op, const Tensor<T>& t) {
  if (t.rank() != 2) throw DimensionError(op + ": expected a matrix, got shape " + shape_str(t.shape()));
}

template <std::floating_point T>
void require_same_shape(const std::string& op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(op + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool row_broadcast = a.shape() != b.shape() && a.rank() == 2 && b.size() == a.cols() &&
                             (b.rank() == 1 || (b.rank() == 2 && b.rows() == 1));
  if (!row_broadcast) detail::require_same_shape("add", a, b);
  std::vector<T> v(a.data().begin(), a.data().end());
  const auto bd = b.data();
  const std::size_t c = b.size();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += bd[row_broadcast ? i % c : i];
  return detail::make_result<T>("add", a.shape(), std::move(v), {a, b}, [row_broadcast, c](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i];
    }
    if (auto* gb = detail::grad_of(out, 1)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*gb)[row_broadcast ? i % c : i] += out.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>("sub", a.shape(), std::move(v), {a, b}, [](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i];
    }
    if (auto* gb = detail::grad_of(out, 1)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*gb)[i] -= out.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>("mul", a.shape(), std::move(v), {a, b}, [](Node<T>& out) {
    const auto& av = out.inputs[0]->value;
    const auto& bv = out.inputs[1]->value;
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i] * bv[i];
    }
    if (auto* gb = detail::grad_of(out, 1)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*gb)[i] += out.grad[i] * av[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
  return detail::make_result<T>("scale", a.shape(), std::move(v), {a}, [s](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i] * s;
    }
  });
}

template <std::floating_point T>
Tensor<T> div_scalar(const Tensor<T>& a, T s) {
  if (s == T{0}) throw NumericError("div_scalar: division by zero");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] / s;
  return detail::make_result<T>("div_scalar", a.shape(), std::move(v), {a}, [s](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i] / s;
    }
  });
}

template <std::floating_point T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(a.data()[i]);
  return detail::make_result<T>("log", a.shape(), std::move(v), {a}, [](Node<T>& out) {
    const auto& av = out.inputs[0]->value;
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i] / av[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.data()[i]);
  return detail::make_result<T>("exp", a.shape(), std::move(v), {a}, [](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i] * out.value[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] > T{0} ? a.data()[i] : T{0};
  return detail::make_result<T>("relu", a.shape(), std::move(v), {a}, [](Node<T>& out) {
    const auto& av = out.inputs[0]->value;
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) {
        if (av[i] > T{0}) (*ga)[i] += out.grad[i];
      }
    }
  });
}

// max(x, lo); values below the floor receive no gradient.
template <std::floating_point T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(a.data()[i], lo);
  return detail::make_result<T>("clamp_min", a.shape(), std::move(v), {a}, [lo](Node<T>& out) {
    const auto& av = out.inputs[0]->value;
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) {
        if (av[i] >= lo) (*ga)[i] += out.grad[i];
      }
    }
  });
}

// x * sigmoid(x)
template <std::floating_point T>
Tensor<T> silu(const Tensor<T>& a) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const T x = a.data()[i];
    v[i] = x / (T{1} + std::exp(-x));
  }
  return detail::make_result<T>("silu", a.shape(), std::move(v), {a}, [](Node<T>& out) {
    const auto& av = out.inputs[0]->value;
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) {
        const T s = T{1} / (T{1} + std::exp(-av[i]));
        (*ga)[i] += out.grad[i] * (s + av[i] * s * (T{1} - s));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape plumbing

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T s{0};
  for (const T x : a.data()) s += x;
  return detail::make_result<T>("sum", {}, {s}, {a}, [](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (auto& g : *ga) g += out.grad[0];
    }
  });
}

template <std::floating_point T>
Tensor<T> mean_all(const Tensor<T>& a) {
  const T n = static_cast<T>(a.size());
  T s{0};
  for (const T x : a.data()) s += x;
  return detail::make_result<T>("mean_all", {}, {s / n}, {a}, [n](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (auto& g : *ga) g += out.grad[0] / n;
    }
  });
}

// Mean over axis 0 (-> 1 x c) or axis 1 (-> r x 1).
template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a, int axis) {
  detail::require_matrix("mean", a);
  if (axis != 0 && axis != 1) throw DimensionError("mean: axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  if ((axis == 0 ? r : c) == 0) throw DimensionError("mean: empty axis");
  const auto d = a.data();
  std::vector<T> v(axis == 0 ? c : r, T{0});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) v[axis == 0 ? j : i] += d[i * c + j];
  }
  const T n = static_cast<T>(axis == 0 ? r : c);
  for (auto& x : v) x /= n;
  Shape shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  return detail::make_result<T>("mean", std::move(shape), std::move(v), {a}, [axis, r, c, n](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += out.grad[axis == 0 ? j : i] / n;
      }
    }
  });
}

// Repeats a 1 x c row n times.
template <std::floating_point T>
Tensor<T> broadcast_rows(const Tensor<T>& a, std::size_t n) {
  if (a.rows() != 1) throw DimensionError("broadcast_rows: expected a single row, got " + shape_str(a.shape()));
  const std::size_t c = a.cols();
  std::vector<T> v(n * c);
  for (std::size_t i = 0; i < n; ++i) std::copy(a.data().begin(), a.data().end(), v.begin() + i * c);
  return detail::make_result<T>("broadcast_rows", {n, c}, std::move(v), {a}, [n, c](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*ga)[j] += out.grad[i * c + j];
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> v(a.data().begin(), a.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(v), {a}, [](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i];
    }
  });
}

// Rows indexed by `ids` (the embedding lookup is this op on a table).
template <std::floating_point T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids, const std::string& op = "gather_rows") {
  detail::require_matrix(op, table);
  const std::size_t n_rows = table.rows(), c = table.cols();
  std::vector<T> v(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n_rows) {
      throw RangeError(op + ": index " + std::to_string(ids[i]) + " out of range [0, " + std::to_string(n_rows) + ")");
    }
    const auto src = table.data().subspan(static_cast<std::size_t>(ids[i]) * c, c);
    std::copy(src.begin(), src.end(), v.begin() + i * c);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return detail::make_result<T>(op, {ids.size(), c}, std::move(v), {table}, [idx = std::move(idx), c](Node<T>& out) {
    if (auto* gt = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t base = static_cast<std::size_t>(idx[i]) * c;
        for (std::size_t j = 0; j < c; ++j) (*gt)[base + j] += out.grad[i * c + j];
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  return gather_rows(table, ids, "embedding");
}

template <std::floating_point T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::require_matrix("slice_rows", a);
  if (begin > end || end > a.rows()) throw DimensionError("slice_rows: bad range for " + shape_str(a.shape()));
  const std::size_t c = a.cols();
  std::vector<T> v(a.data().begin() + begin * c, a.data().begin() + end * c);
  return detail::make_result<T>("slice_rows", {end - begin, c}, std::move(v), {a}, [begin, c](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[begin * c + i] += out.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  std::vector<T> v;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
    offsets.push_back(v.size());
    v.insert(v.end(), p.data().begin(), p.data().end());
    r += p.rows();
  }
  return detail::make_result_vec<T>("concat_rows", {r, c}, std::move(v), parts, [offsets](Node<T>& out) {
    for (std::size_t k = 0; k < out.inputs.size(); ++k) {
      if (auto* g = detail::grad_of(out, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[offsets[k] + i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Straight-through plumbing

// Identity forward, zero backward.
template <std::floating_point T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  auto v = FreezeTape<T>::current().freeze(std::vector<T>(a.data().begin(), a.data().end()));
  return Tensor<T>::from(a.shape(), std::move(v));
}

// hard - sg[soft] + soft. The forward value is `hard` bit-for-bit (the
// cancellation is taken symbolically); the backward rule copies the incoming
// gradient to `soft` unchanged.
template <std::floating_point T>
Tensor<T> straight_through(const Tensor<T>& hard, const Tensor<T>& soft) {
  detail::require_same_shape("straight_through", hard, soft);
  std::vector<T> v(hard.data().begin(), hard.data().end());
  auto& tape = FreezeTape<T>::current();
  if (tape.mode() != FreezeTape<T>::Mode::off) {
    const std::vector<T> s(soft.data().begin(), soft.data().end());
    const auto hard0 = tape.freeze(v);
    const auto soft0 = tape.freeze(s);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = hard0[i] - soft0[i] + s[i];
  }
  return detail::make_result<T>("straight_through", hard.shape(), std::move(v), {soft}, [](Node<T>& out) {
    if (auto* gs = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*gs)[i] += out.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> one_hot(std::span<const int> ids, std::size_t width) {
  auto t = Tensor<T>::zeros({ids.size(), width});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= width) {
      throw RangeError("one_hot: id " + std::to_string(ids[i]) + " out of range");
    }
    d[i * width + static_cast<std::size_t>(ids[i])] = T{1};
  }
  return t;
}

// Row-wise argmax; ties resolve to the lowest index.
template <std::floating_point T>
std::vector<int> argmax_rows(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<int> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (a.data()[i * c + j] > a.data()[i * c + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> v(m * n);
  detail::MutMap<T>(v.data(), m, n).noalias() =
      detail::ConstMap<T>(a.data().data(), m, k) * detail::ConstMap<T>(b.data().data(), k, n);
  return detail::make_result<T>("matmul", {m, n}, std::move(v), {a, b}, [m, k, n](Node<T>& out) {
    const detail::ConstMap<T> gc(out.grad.data(), m, n);
    if (auto* ga = detail::grad_of(out, 0)) {
      detail::MutMap<T>(ga->data(), m, k).noalias() +=
          gc * detail::ConstMap<T>(out.inputs[1]->value.data(), k, n).transpose();
    }
    if (auto* gb = detail::grad_of(out, 1)) {
      detail::MutMap<T>(gb->data(), k, n).noalias() +=
          detail::ConstMap<T>(out.inputs[0]->value.data(), m, k).transpose() * gc;
    }
  });
}

template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  if (c == 0) throw DimensionError("softmax: empty last axis");
  std::vector<T> v(a.size());
  const auto d = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, d[i * c + j]);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += (v[i * c + j] = std::exp(d[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= s;
  }
  return detail::make_result<T>("softmax", a.shape(), std::move(v), {a}, [r, c](Node<T>& out) {
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        T dot{0};
        for (std::size_t j = 0; j < c; ++j) dot += out.grad[i * c + j] * out.value[i * c + j];
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += out.value[i * c + j] * (out.grad[i * c + j] - dot);
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_matrix("layer_norm", x);
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c) throw DimensionError("layer_norm: affine width mismatch");
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv = std::make_shared<std::vector<T>>(r);
  std::vector<T> v(x.size());
  const auto d = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += d[i * c + j];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) var += (d[i * c + j] - mu) * (d[i * c + j] - mu);
    var /= static_cast<T>(c);
    (*inv)[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (d[i * c + j] - mu) * (*inv)[i];
      (*xhat)[i * c + j] = h;
      v[i * c + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  return detail::make_result<T>("layer_norm", x.shape(), std::move(v), {x, gamma, beta}, [r, c, xhat, inv](Node<T>& out) {
    const auto& g = out.inputs[1]->value;
    if (auto* gg = detail::grad_of(out, 1)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gg)[j] += out.grad[i * c + j] * (*xhat)[i * c + j];
    }
    if (auto* gb = detail::grad_of(out, 2)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += out.grad[i * c + j];
    }
    if (auto* gx = detail::grad_of(out, 0)) {
      std::vector<T> gh(c);
      for (std::size_t i = 0; i < r; ++i) {
        T m1{0}, m2{0};
        for (std::size_t j = 0; j < c; ++j) {
          gh[j] = out.grad[i * c + j] * g[j];
          m1 += gh[j];
          m2 += gh[j] * (*xhat)[i * c + j];
        }
        m1 /= static_cast<T>(c);
        m2 /= static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += (*inv)[i] * (gh[j] - m1 - (*xhat)[i * c + j] * m2);
      }
    }
  });
}

// Multi-head scaled dot-product attention on already-projected q (n x d),
// k and v (m x d). With `causal`, query i attends to keys 0..i (requires n == m).
template <std::floating_point T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads, bool causal) {
  for (const auto* t : {&q, &k, &v}) detail::require_matrix("attention", *t);
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != m) throw DimensionError("attention: q/k/v shapes disagree");
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (causal && n != m) throw DimensionError("attention: causal mask needs square scores");
  if (m == 0) throw DimensionError("attention: no keys");
  const std::size_t dh = d / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<T>>(heads * n * m, T{0});
  std::vector<T> o(n * d, T{0});
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      T* p = probs->data() + (h * n + i) * m;
      const std::size_t lim = causal ? i + 1 : m;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < lim; ++j) {
        T s{0};
        for (std::size_t t = 0; t < dh; ++t) s += qd[i * d + off + t] * kd[j * d + off + t];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      T z{0};
      for (std::size_t j = 0; j < lim; ++j) z += (p[j] = std::exp(p[j] - mx));
      for (std::size_t j = 0; j < lim; ++j) {
        p[j] /= z;
        for (std::size_t t = 0; t < dh; ++t) o[i * d + off + t] += p[j] * vd[j * d + off + t];
      }
    }
  }
  return detail::make_result<T>(
      causal ? "causal_attention" : "attention", {n, d}, std::move(o), {q, k, v},
      [n, m, d, dh, heads, causal, inv_sqrt, probs](Node<T>& out) {
        const auto& qv = out.inputs[0]->value;
        const auto& kv = out.inputs[1]->value;
        const auto& vv = out.inputs[2]->value;
        auto* gq = detail::grad_of(out, 0);
        auto* gk = detail::grad_of(out, 1);
        auto* gv = detail::grad_of(out, 2);
        std::vector<T> dp(m);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < n; ++i) {
            const T* p = probs->data() + (h * n + i) * m;
            const std::size_t lim = causal ? i + 1 : m;
            const T* go = out.grad.data() + i * d + off;
            T dot{0};
            for (std::size_t j = 0; j < lim; ++j) {
              T s{0};
              for (std::size_t t = 0; t < dh; ++t) s += go[t] * vv[j * d + off + t];
              dp[j] = s;
              dot += s * p[j];
              if (gv) {
                for (std::size_t t = 0; t < dh; ++t) (*gv)[j * d + off + t] += p[j] * go[t];
              }
            }
            for (std::size_t j = 0; j < lim; ++j) {
              const T ds = p[j] * (dp[j] - dot) * inv_sqrt;
              if (gq) {
                for (std::size_t t = 0; t < dh; ++t) (*gq)[i * d + off + t] += ds * kv[j * d + off + t];
              }
              if (gk) {
                for (std::size_t t = 0; t < dh; ++t) (*gk)[j * d + off + t] += ds * qv[i * d + off + t];
              }
            }
          }
        }
      });
}

template <std::floating_point T>
struct AttentionWeights {
  Tensor<T> wq, wk, wv, wo;
};

template <std::floating_point T>
Tensor<T> causal_self_attention(const Tensor<T>& x, const AttentionWeights<T>& w, std::size_t heads) {
  return matmul(attention(matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv), heads, true), w.wo);
}

template <std::floating_point T>
Tensor<T> cross_attention(const Tensor<T>& x, const Tensor<T>& memory, const AttentionWeights<T>& w,
                          std::size_t heads) {
  return matmul(attention(matmul(x, w.wq), matmul(memory, w.wk), matmul(memory, w.wv), heads, false), w.wo);
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr int kIgnoreIndex = -1;

// Mean next-token cross-entropy over rows whose target is not kIgnoreIndex.
template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  detail::require_matrix("cross_entropy", logits);
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r) throw DimensionError("cross_entropy: one target per row required");
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  std::size_t count = 0;
  T total{0};
  const auto d = logits.data();
  for (std::size_t i = 0; i < r; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, d[i * c + j]);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) z += ((*probs)[i * c + j] = std::exp(d[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= z;
    if (targets[i] == kIgnoreIndex) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw RangeError("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    }
    total += std::log(z) + mx - d[i * c + static_cast<std::size_t>(targets[i])];
    ++count;
  }
  if (count == 0) throw DataError("cross_entropy: every target is ignored");
  const T n = static_cast<T>(count);
  std::vector<int> tg(targets.begin(), targets.end());
  return detail::make_result<T>("cross_entropy", {}, {total / n}, {logits}, [r, c, n, probs, tg = std::move(tg)](Node<T>& out) {
    if (auto* gl = detail::grad_of(out, 0)) {
      const T g = out.grad[0] / n;
      for (std::size_t i = 0; i < r; ++i) {
        if (tg[i] == kIgnoreIndex) continue;
        for (std::size_t j = 0; j < c; ++j) (*gl)[i * c + j] += g * (*probs)[i * c + j];
        (*gl)[i * c + static_cast<std::size_t>(tg[i])] -= g;
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mse", a, b);
  const T n = static_cast<T>(a.size());
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  return detail::make_result<T>("mse", {}, {s / n}, {a, b}, [n](Node<T>& out) {
    const auto& av = out.inputs[0]->value;
    const auto& bv = out.inputs[1]->value;
    const T g = out.grad[0] * T{2} / n;
    if (auto* ga = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += g * (av[i] - bv[i]);
    }
    if (auto* gb = detail::grad_of(out, 1)) {
      for (std::size_t i = 0; i < av.size(); ++i) (*gb)[i] -= g * (av[i] - bv[i]);
    }
  });
}

}  // namespace photobridge::ad
