#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "photobridge/ad/tensor.hpp"

namespace photobridge::ad {

// 0/1 matrix stored as a sorted coordinate list. Every stored coordinate has
// the implicit value 1; anything absent is 0.
class SparsePattern {
 public:
  using Coord = std::pair<std::uint32_t, std::uint32_t>;

  SparsePattern() = default;
  SparsePattern(std::size_t n_rows, std::size_t n_cols, std::vector<Coord> entries)
      : n_rows_(n_rows), n_cols_(n_cols), entries_(std::move(entries)) {
    std::sort(entries_.begin(), entries_.end());
    entries_.erase(std::unique(entries_.begin(), entries_.end()), entries_.end());
    for (const auto& [r, c] : entries_) {
      if (r >= n_rows_ || c >= n_cols_) {
        throw RangeError("SparsePattern: coordinate (" + std::to_string(r) + "," + std::to_string(c) +
                         ") outside " + std::to_string(n_rows_) + "x" + std::to_string(n_cols_));
      }
    }
  }

  std::size_t n_rows() const { return n_rows_; }
  std::size_t n_cols() const { return n_cols_; }
  std::size_t nnz() const { return entries_.size(); }
  const std::vector<Coord>& entries() const { return entries_; }

  double density() const {
    const double cells = static_cast<double>(n_rows_) * static_cast<double>(n_cols_);
    return cells == 0.0 ? 0.0 : static_cast<double>(nnz()) / cells;
  }

  bool contains(std::uint32_t r, std::uint32_t c) const {
    return std::binary_search(entries_.begin(), entries_.end(), Coord{r, c});
  }

  // Entries of row r, located by binary search.
  std::pair<std::vector<Coord>::const_iterator, std::vector<Coord>::const_iterator> row(std::uint32_t r) const {
    const auto lo = std::lower_bound(entries_.begin(), entries_.end(), Coord{r, 0});
    const auto hi = std::lower_bound(lo, entries_.end(), Coord{r + 1, 0});
    return {lo, hi};
  }

  template <std::floating_point T>
  Tensor<T> densify() const {
    auto t = Tensor<T>::zeros({n_rows_, n_cols_});
    auto d = t.mutable_data();
    for (const auto& [r, c] : entries_) d[static_cast<std::size_t>(r) * n_cols_ + c] = T{1};
    return t;
  }

  bool operator==(const SparsePattern&) const = default;

 private:
  std::size_t n_rows_ = 0;
  std::size_t n_cols_ = 0;
  std::vector<Coord> entries_;
};

// x (m x n_rows) times the pattern (n_rows x n_cols). Forward and backward
// sums run in ascending inner index, so results equal a plain loop-order dense
// product with densify() bit for bit. matmul() may reassociate those sums.
template <std::floating_point T>
Tensor<T> sparse_matmul(const Tensor<T>& x, const SparsePattern& pattern) {
  if (x.rank() != 2 || x.cols() != pattern.n_rows()) {
    throw DimensionError("sparse_matmul: input " + shape_str(x.shape()) + " does not match pattern rows " +
                         std::to_string(pattern.n_rows()));
  }
  const std::size_t m = x.rows(), k = pattern.n_rows(), n = pattern.n_cols();
  std::vector<T> v(m * n, T{0});
  const auto xd = x.data();
  const auto& entries = pattern.entries();
  for (std::size_t i = 0; i < m; ++i) {
    for (const auto& [r, c] : entries) v[i * n + c] += xd[i * k + r];
  }
  return detail::make_result<T>("sparse_matmul", {m, n}, std::move(v), {x}, [m, k, n, pattern](Node<T>& out) {
    if (auto* gx = detail::grad_of(out, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (const auto& [r, c] : pattern.entries()) (*gx)[i * k + r] += out.grad[i * n + c];
      }
    }
  });
}

}  // namespace photobridge::ad
