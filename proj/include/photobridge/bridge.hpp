#pragma once

// Vocabulary transformation matrices between the dialogue-model vocabulary
// (rows) and the image-generator vocabulary (columns), and the pooled
// straight-through re-tokenization that carries gradients across them.
//
// Special tokens never participate in string-equality or word-list alignment.

#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "photobridge/ad/ops.hpp"
#include "photobridge/ad/sparse.hpp"
#include "photobridge/vocab.hpp"

namespace photobridge {

using TransformMatrix = ad::SparsePattern;

// Entry (i, j) iff token strings are equal.
inline TransformMatrix build_static_matrix(const Vocabulary& v_llm, const Vocabulary& v_sd) {
  std::vector<TransformMatrix::Coord> coords;
  for (std::size_t i = kSpecialCount; i < v_llm.size(); ++i) {
    if (const auto j = v_sd.find(v_llm.tokens()[i]); j && !Vocabulary::is_special(*j)) {
      coords.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(*j));
    }
  }
  return TransformMatrix(v_llm.size(), v_sd.size(), std::move(coords));
}

// Every token of encode_llm(w) maps to every token of encode_sd(w), for each
// word w; the union over words is returned.
inline TransformMatrix build_wordlist_matrix(const Vocabulary& v_llm, const Vocabulary& v_sd,
                                             std::span<const std::string> wordlist) {
  if (wordlist.empty()) throw DataError("build_wordlist_matrix: empty word list");
  std::vector<TransformMatrix::Coord> coords;
  for (const auto& raw : wordlist) {
    for (const auto& w : split_words(normalize_text(raw))) {
      const auto a = v_llm.encode_word(w);
      const auto b = v_sd.encode_word(w);
      for (const int i : a)
        for (const int j : b) coords.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
    }
  }
  return TransformMatrix(v_llm.size(), v_sd.size(), std::move(coords));
}

// Full bipartite product of the caption's token sets under both tokenizers.
// `extra_llm_ids` widens the row set, e.g. with sampled ids whose text
// re-tokenizes differently, so every sampled row keeps an alignment.
inline TransformMatrix build_dynamic_matrix(std::string_view caption, const Vocabulary& v_llm, const Vocabulary& v_sd,
                                            std::span<const int> extra_llm_ids = {}) {
  const auto llm = v_llm.encode_ids(caption);
  const auto sd = v_sd.encode_ids(caption);
  if (llm.empty() && extra_llm_ids.empty()) throw DataError("build_dynamic_matrix: empty caption");
  std::set<int> rows(llm.begin(), llm.end());
  rows.insert(extra_llm_ids.begin(), extra_llm_ids.end());
  const std::set<int> cols(sd.begin(), sd.end());
  std::vector<TransformMatrix::Coord> coords;
  coords.reserve(rows.size() * cols.size());
  for (const int i : rows)
    for (const int j : cols) coords.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
  return TransformMatrix(v_llm.size(), v_sd.size(), std::move(coords));
}

// R^LLM M through the sparse product.
template <std::floating_point T>
ad::Tensor<T> transform(const ad::Tensor<T>& r_llm, const TransformMatrix& m) {
  if (r_llm.rank() != 2 || r_llm.cols() != m.n_rows()) {
    throw DimensionError("transform: one-hot width " + std::to_string(r_llm.cols()) + " != matrix rows " +
                         std::to_string(m.n_rows()));
  }
  return ad::sparse_matmul(r_llm, m);
}

struct BridgeOptions {
  // Divide the pooled multi-hot vector by the number of aligned target
  // tokens (|T^SD| for dynamic matrices). Off: raw 0/1 rows are pooled.
  bool normalize_rows = false;
};

// R^SD = R~^SD - sg[avg(R^LLM M)] + avg(R^LLM M).
// Forward value: one-hot rows of encode_sd(caption_text), exactly.
// Backward: the pooled 1 x |V^SD| vector is broadcast over the n_sd rows, so
// its gradient is the column sum of the incoming gradient.
template <std::floating_point T>
ad::Tensor<T> pool_straight_through(const ad::Tensor<T>& r_llm, const TransformMatrix& m, std::string_view caption_text,
                                    const Vocabulary& v_sd, BridgeOptions opts = {}) {
  const auto sd_ids = v_sd.encode_ids(caption_text);
  if (sd_ids.empty()) throw DataError("pool_straight_through: caption decodes to empty text");
  if (m.n_cols() != v_sd.size()) throw DimensionError("pool_straight_through: matrix columns != |V^SD|");
  auto pooled = ad::mean(transform(r_llm, m), 0);
  if (opts.normalize_rows) {
    std::set<std::uint32_t> cols;
    for (const auto& e : m.entries()) cols.insert(e.second);
    if (!cols.empty()) pooled = ad::div_scalar(pooled, static_cast<T>(cols.size()));
  }
  auto soft = ad::broadcast_rows(pooled, sd_ids.size());
  return ad::straight_through(ad::one_hot<T>(sd_ids, v_sd.size()), soft);
}

struct MemoryFootprint {
  std::uint64_t sparse_bytes = 0;
  std::uint64_t dense_bytes_fp16 = 0;
};

// Sparse layout: 16-byte header (two u64 dimensions) + 8 bytes per entry
// (u32 row, u32 col). Dense: one fp16 per cell.
inline constexpr std::uint64_t kSparseHeaderBytes = 16;
inline constexpr std::uint64_t kSparseEntryBytes = 8;

inline MemoryFootprint footprint_for(std::uint64_t n_rows, std::uint64_t n_cols, std::uint64_t entries) {
  return {kSparseHeaderBytes + kSparseEntryBytes * entries, n_rows * n_cols * 2};
}

inline MemoryFootprint memory_footprint(const TransformMatrix& m) {
  return footprint_for(m.n_rows(), m.n_cols(), m.nnz());
}

// Per-epoch memo of dynamic matrices keyed by caption text. Off by default in
// the trainer; clear() at epoch boundaries.
class DynamicMatrixCache {
 public:
  const TransformMatrix& get(const std::string& caption, const Vocabulary& v_llm, const Vocabulary& v_sd,
                             std::span<const int> extra_llm_ids = {}) {
    std::string key = caption;
    for (const int id : extra_llm_ids) key += '\x1f' + std::to_string(id);
    std::lock_guard lock(mu_);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, build_dynamic_matrix(caption, v_llm, v_sd, extra_llm_ids)).first;
    return it->second;
  }
  void clear() {
    std::lock_guard lock(mu_);
    cache_.clear();
  }
  std::size_t size() const { return cache_.size(); }

 private:
  std::mutex mu_;
  std::map<std::string, TransformMatrix> cache_;
};

}  // namespace photobridge
