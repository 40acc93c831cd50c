#pragma once

// Gradient-check suite and DVTM footprint benchmark. Shared by the
// `gradcheck` / `bench-dvtm` subcommands and the acceptance binary.
//
// Every group compares reverse mode (double) against central differences taken
// in long double. Noise is drawn once per instance and passed in as an input,
// so both sides differentiate the same function.

#include <algorithm>
#include <array>
#include <cstddef>
#include <chrono>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "photobridge/ad/gradcheck.hpp"
#include "photobridge/bridge.hpp"
#include "photobridge/data.hpp"
#include "photobridge/models/generator.hpp"
#include "photobridge/models/lm.hpp"
#include "photobridge/models/params.hpp"
#include "photobridge/sampling.hpp"

namespace photobridge::audit {

using ad::Tensor;
using TD = Tensor<double>;

inline constexpr double kGradTolerance = 1e-5;
inline constexpr std::array<std::string_view, 5> kGradGroups = {"gumbel_softmax", "transform", "pool_straight_through",
                                                                "lm_loss", "diffusion_loss"};

struct GradGroup {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;
  bool ok() const { return instances > 0 && max_rel_error <= kGradTolerance; }
};

struct AuditVocabs {
  Vocabulary llm, sd;
};

// Trained on a small procedural corpus so captions segment into several
// pieces under both tokenizers.
inline AuditVocabs audit_vocabs(std::uint64_t seed) {
  data::CorpusConfig cc;
  cc.n_dialogues = 200;
  const auto ds = data::gen_corpus(cc, seed);
  return {train_bpe(data::text_lines(ds), 300, seed), train_bpe(data::caption_lines(ds), 260, seed)};
}

// Half toy captions, half word salad from the toy lexicon and small talk.
inline std::string random_caption(Rng& rng) {
  if (rng.bernoulli(0.5)) return caption_for(Attributes::random(rng));
  static const std::vector<std::string> pool = [] {
    std::vector<std::string> w;
    auto add = [&](std::string_view s) {
      for (auto& x : split_words(normalize_text(s))) w.push_back(x);
    };
    for (auto s : kShapes) add(s);
    for (auto s : kColors) add(s);
    for (auto s : kPositions) add(s);
    for (auto s : data::kSmallTalk) add(s);
    return w;
  }();
  std::string c;
  for (std::size_t i = 0, n = 2 + rng.below(9); i < n; ++i) {
    if (i) c += ' ';
    c += pool[rng.below(pool.size())];
  }
  return c;
}

inline TD random_dense(ad::Shape shape, Rng& rng, double scale = 1.0) {
  return models::normal_init<double>(std::move(shape), rng, scale);
}

inline TD random_onehot_rows(std::size_t m, std::size_t width, Rng& rng, std::vector<int>* ids = nullptr) {
  auto t = TD::zeros({m, width});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = rng.below(width);
    d[i * width + j] = 1.0;
    if (ids) ids->push_back(static_cast<int>(j));
  }
  return t;
}

inline TD random_simplex_rows(std::size_t r, std::size_t c, Rng& rng) {
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += v[i * c + j] = 0.05 + rng.uniform();
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= s;
  }
  return TD::from({r, c}, std::move(v));
}

// Every parameter random, including heads and gates that init() zeroes.
template <class M>
void randomize(M& m, Rng& rng, double scale = 0.3) {
  std::vector<TD> vals;
  for (const auto& t : models::parameters(m)) vals.push_back(random_dense(t.shape(), rng, scale));
  models::assign_parameters(m, vals);
}

namespace detail {

template <class Body>
GradGroup run_group(std::string_view name, std::size_t n, Body&& body) {
  GradGroup g{std::string(name), 0, 0.0, 0.0};
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < n; ++i) {
    g.max_rel_error = std::max(g.max_rel_error, body(i).max_rel_error);
    ++g.instances;
  }
  g.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return g;
}

}  // namespace detail

inline GradGroup check_gumbel_softmax(Rng& rng, std::size_t n) {
  return detail::run_group("gumbel_softmax", n, [&](std::size_t) {
    const std::size_t r = 1 + rng.below(4), c = 2 + rng.below(8);
    const auto p = random_simplex_rows(r, c, rng);
    const auto g = sample_gumbel<double>({r, c}, rng);
    const auto w = random_dense({r, c}, rng);
    const double tau = 0.5 + rng.uniform();
    auto fn = [&]<class T>(const std::vector<Tensor<T>>& xs) {
      return ad::sum(ad::mul(gumbel_softmax(xs[0], xs[1], static_cast<T>(tau)), w.template cast<T>()));
    };
    return ad::finite_diff_check(fn, {p, g});
  });
}

inline GradGroup check_transform(const AuditVocabs& v, Rng& rng, std::size_t n) {
  return detail::run_group("transform", n, [&](std::size_t) {
    const auto m = build_dynamic_matrix(random_caption(rng), v.llm, v.sd);
    const std::size_t rows = 1 + rng.below(4);
    const auto x = random_dense({rows, v.llm.size()}, rng);
    const auto w = random_dense({rows, v.sd.size()}, rng);
    auto fn = [&]<class T>(const std::vector<Tensor<T>>& xs) {
      return ad::sum(ad::mul(transform(xs[0], m), w.template cast<T>()));
    };
    return ad::finite_diff_check(fn, {x});
  });
}

inline GradGroup check_pool_straight_through(const AuditVocabs& v, Rng& rng, std::size_t n) {
  return detail::run_group("pool_straight_through", n, [&](std::size_t) {
    std::string c = random_caption(rng);
    while (v.sd.encode_ids(c).empty()) c = random_caption(rng);
    std::vector<int> ids;
    const auto x = random_onehot_rows(1 + rng.below(5), v.llm.size(), rng, &ids);
    const auto m = build_dynamic_matrix(c, v.llm, v.sd, ids);
    const BridgeOptions opts{.normalize_rows = rng.bernoulli(0.5)};
    const auto w = random_dense({v.sd.encode_ids(c).size(), v.sd.size()}, rng);
    auto fn = [&]<class T>(const std::vector<Tensor<T>>& xs) {
      return ad::sum(ad::mul(pool_straight_through(xs[0], m, c, v.sd, opts), w.template cast<T>()));
    };
    return ad::finite_diff_check(fn, {x});
  });
}

// The model losses sum hundreds of terms, so their roundoff floor swamps
// h = 1e-6 quotients on gradient entries near 1e-10. The five-point stencil
// keeps truncation at O(h^4) with a step that clears that floor.
inline constexpr ad::FdOptions kModelFd{.step = 1e-3, .order = 4};

inline GradGroup check_lm_loss(Rng& rng, std::size_t n) {
  models::LmConfig cfg;
  cfg.vocab_size = 12;
  cfg.d_model = 8;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.max_len = 24;
  cfg.ff_mult = 2;
  return detail::run_group("lm_loss", n, [&](std::size_t) {
    models::LanguageModel<double> lm(cfg);
    randomize(lm, rng);
    const int img = special_id(Special::image);
    std::vector<int> ctx, resp;
    for (std::size_t i = 0, k = 1 + rng.below(4); i < k; ++i) ctx.push_back(6 + static_cast<int>(rng.below(6)));
    ctx.insert(ctx.begin() + static_cast<std::ptrdiff_t>(rng.below(ctx.size() + 1)), img);
    for (std::size_t i = 0, k = 1 + rng.below(4); i < k; ++i) resp.push_back(6 + static_cast<int>(rng.below(6)));
    resp.push_back(special_id(Special::eos));
    const auto ex = models::make_lm_example(ctx, resp, cfg.max_len);
    auto inputs = models::parameters(lm);
    inputs.push_back(random_dense({1 + rng.below(4), cfg.d_model}, rng));
    inputs.push_back(random_dense({1, cfg.d_model}, rng));
    auto fn = [&]<class T>(const std::vector<Tensor<T>>& xs) {
      models::LanguageModel<T> m(cfg);
      models::assign_parameters(m, std::vector<Tensor<T>>(xs.begin(), xs.end() - 2));
      return models::lm_loss(m, ex, models::ImageContext<T>{xs[xs.size() - 2], xs.back()});
    };
    return ad::finite_diff_check(fn, inputs, kModelFd);
  });
}

inline GradGroup check_diffusion_loss(Rng& rng, std::size_t n) {
  models::GenConfig cfg;
  cfg.sd_vocab_size = 9;
  cfg.emb_dim = 4;
  cfg.cond_dim = 4;
  cfg.hidden = 4;
  cfg.temb_dim = 4;
  return detail::run_group("diffusion_loss", n, [&](std::size_t) {
    models::Generator<double> g(cfg);
    randomize(g, rng);
    const auto img = render(Attributes::random(rng));
    const auto d = models::draw_diffusion_noise(cfg, 1, rng);
    std::vector<int> ids;
    auto inputs = models::parameters(g);
    inputs.push_back(random_onehot_rows(1 + rng.below(3), cfg.sd_vocab_size, rng, &ids));
    auto fn = [&]<class T>(const std::vector<Tensor<T>>& xs) {
      models::Generator<T> m(cfg);
      models::assign_parameters(m, std::vector<Tensor<T>>(xs.begin(), xs.end() - 1));
      return models::diffusion_loss(m, xs.back(), img, d.ts, d.eps.template cast<T>());
    };
    return ad::finite_diff_check(fn, inputs, kModelFd);
  });
}

// One named stream per group, so each group is reproducible on its own.
inline std::vector<GradGroup> gradcheck_suite(std::uint64_t seed, std::size_t instances = 20) {
  const Rng root(seed);
  const auto v = audit_vocabs(seed);
  Rng r0 = root.split("gumbel_softmax"), r1 = root.split("transform"), r2 = root.split("pool_straight_through"),
      r3 = root.split("lm_loss"), r4 = root.split("diffusion_loss");
  return {check_gumbel_softmax(r0, instances), check_transform(v, r1, instances),
          check_pool_straight_through(v, r2, instances), check_lm_loss(r3, instances),
          check_diffusion_loss(r4, instances)};
}

// ---------------------------------------------------------------------------
// DVTM footprint.

inline constexpr std::uint64_t kBenchVocab = 40'000;
inline constexpr std::size_t kBenchMaxTokens = 24;
inline constexpr std::uint64_t kSparseBudgetBytes = 16 * 1024;

struct FootprintRow {
  std::string label;
  std::size_t llm_tokens = 0;
  std::size_t sd_tokens = 0;
  std::size_t nnz = 0;
  MemoryFootprint at_bench_vocab;  // both vocabularies at kBenchVocab
  double build_us = 0.0;
};

// Worst case for n tokens per side: every LLM token aligned with every SD
// token, so nnz = n * n. Any caption with at most n distinct tokens per side
// has at most this many entries.
inline FootprintRow worst_case_row(std::size_t n) {
  return {"worst_case_" + std::to_string(n), n, n, n * n, footprint_for(kBenchVocab, kBenchVocab, n * n), 0.0};
}

inline FootprintRow caption_row(std::string_view caption, const AuditVocabs& v) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto m = build_dynamic_matrix(caption, v.llm, v.sd);
  const double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
  auto distinct = [](std::vector<int> ids) {
    std::sort(ids.begin(), ids.end());
    return static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
  };
  return {std::string(caption), distinct(v.llm.encode_ids(caption)), distinct(v.sd.encode_ids(caption)), m.nnz(),
          footprint_for(kBenchVocab, kBenchVocab, m.nnz()), us};
}

struct BenchReport {
  MemoryFootprint empty_at_bench_vocab;
  std::vector<FootprintRow> rows;
  // Dense fp16 size at kBenchVocab is exactly 3.2e9 bytes and every row with
  // at most kBenchMaxTokens tokens per side fits kSparseBudgetBytes.
  bool ok() const {
    if (empty_at_bench_vocab.dense_bytes_fp16 != 3'200'000'000ull) return false;
    for (const auto& r : rows) {
      if (r.at_bench_vocab.dense_bytes_fp16 != 3'200'000'000ull) return false;
      if (r.llm_tokens <= kBenchMaxTokens && r.sd_tokens <= kBenchMaxTokens &&
          r.at_bench_vocab.sparse_bytes > kSparseBudgetBytes)
        return false;
    }
    return true;
  }
};

inline BenchReport bench_dvtm(std::uint64_t seed, std::size_t n_captions = 200) {
  BenchReport b;
  b.empty_at_bench_vocab = memory_footprint(TransformMatrix(kBenchVocab, kBenchVocab, {}));
  for (std::size_t n : {1u, 4u, 8u, 12u, 16u, 24u}) b.rows.push_back(worst_case_row(n));
  const auto v = audit_vocabs(seed);
  Rng rng = Rng(seed).split("captions");
  for (std::size_t i = 0; i < n_captions; ++i) b.rows.push_back(caption_row(random_caption(rng), v));
  return b;
}

inline std::string bench_csv_header() {
  return "label,llm_tokens,sd_tokens,nnz,sparse_bytes,dense_bytes_fp16,build_us";
}

inline std::string bench_csv_row(const FootprintRow& r) {
  std::string label = r.label;
  if (label.find(',') != std::string::npos) label = "\"" + label + "\"";
  return label + "," + std::to_string(r.llm_tokens) + "," + std::to_string(r.sd_tokens) + "," + std::to_string(r.nnz) +
         "," + std::to_string(r.at_bench_vocab.sparse_bytes) + "," + std::to_string(r.at_bench_vocab.dense_bytes_fp16) +
         "," + std::to_string(r.build_us);
}

}  // namespace photobridge::audit
