#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "photobridge/ad/gradcheck.hpp"
#include "photobridge/bridge.hpp"
#include "photobridge/rng.hpp"

namespace photobridge {
namespace {

using ad::Tensor;
using TD = Tensor<double>;
using Coord = TransformMatrix::Coord;

// Base alphabet plus left-to-right merge chains that realise each listed
// piece. Pieces ending in "</w>" are word-final.
Vocabulary segmented_vocab(const std::vector<std::string>& pieces) {
  auto tokens = Vocabulary::base_alphabet();
  std::set<std::string> known(tokens.begin(), tokens.end());
  std::vector<Vocabulary::Merge> merges;
  std::set<Vocabulary::Merge> seen;
  for (const auto& piece : pieces) {
    std::string body = piece;
    const bool final = body.ends_with(kEndOfWord);
    if (final) body.resize(body.size() - kEndOfWord.size());
    std::vector<std::string> sym;
    for (std::size_t i = 0; i < body.size(); ++i) {
      sym.push_back(std::string(1, body[i]) + (final && i + 1 == body.size() ? std::string(kEndOfWord) : ""));
    }
    std::string cur = sym[0];
    for (std::size_t i = 1; i < sym.size(); ++i) {
      if (seen.insert({cur, sym[i]}).second) merges.emplace_back(cur, sym[i]);
      cur += sym[i];
      if (known.insert(cur).second) tokens.push_back(cur);
    }
  }
  return Vocabulary(std::move(tokens), std::move(merges));
}

std::vector<std::string> dialogue_lines() {
  return {"hello there how are you doing today", "i went to the park and saw a red square",
          "can you share a photo of your trip", "sure here is the picture from the beach",
          "that looks lovely what a nice day", "we had a great time with the dogs there"};
}

std::vector<std::string> caption_lines() {
  return {"a small red square in the top left", "a large blue circle in the center",
          "a small green triangle in the bottom right", "a large yellow cross in the middle left",
          "a small purple circle in the top middle", "a large orange square in the bottom middle"};
}

struct VocabPair {
  Vocabulary llm, sd;
};

const VocabPair& trained_pair() {
  static const VocabPair p{train_bpe(dialogue_lines(), 320), train_bpe(caption_lines(), 280)};
  return p;
}

TD random_onehot_rows(std::size_t m, std::size_t width, Rng& rng, std::vector<int>* ids = nullptr) {
  auto t = TD::zeros({m, width});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = rng.below(width);
    d[i * width + j] = 1.0;
    if (ids) ids->push_back(static_cast<int>(j));
  }
  return t;
}

TD random_dense(ad::Shape shape, Rng& rng) {
  std::vector<double> v(ad::shape_size(shape));
  for (auto& x : v) x = rng.normal();
  return TD::from(std::move(shape), std::move(v));
}

TEST(StaticMatrix, IdenticalVocabulariesGiveIdentityOnContentTokens) {
  const auto& v = trained_pair().llm;
  const auto m = build_static_matrix(v, v);
  EXPECT_EQ(m.nnz(), v.size() - kSpecialCount);
  for (const auto& [r, c] : m.entries()) EXPECT_EQ(r, c);
  for (std::uint32_t i = 0; i < kSpecialCount; ++i) EXPECT_FALSE(m.contains(i, i));
}

TEST(StaticMatrix, PermutedVocabularyGivesPermutation) {
  auto toks = std::vector<std::string>{"red", "a", "blue", "x", "qq"};
  auto perm = std::vector<std::string>{"qq", "blue", "red", "x", "a"};
  const Vocabulary a(toks, {}), b(perm, {});
  const auto m = build_static_matrix(a, b);
  EXPECT_EQ(m.nnz(), toks.size());
  std::set<std::uint32_t> rows, cols;
  for (const auto& [r, c] : m.entries()) {
    EXPECT_EQ(a.token(static_cast<int>(r)), b.token(static_cast<int>(c)));
    rows.insert(r);
    cols.insert(c);
  }
  EXPECT_EQ(rows.size(), toks.size());
  EXPECT_EQ(cols.size(), toks.size());
}

TEST(StaticMatrix, DisjointVocabulariesGiveNoEntries) {
  const Vocabulary a({"red", "blue"}, {}), b({"green", "pink", "q"}, {});
  EXPECT_EQ(build_static_matrix(a, b).nnz(), 0u);
}

TEST(StaticMatrix, ConstructedPairMatchesBruteForce) {
  const Vocabulary a({"red", "a", "blue", "x"}, {}), b({"green", "a", "q", "red", "y"}, {});
  const auto m = build_static_matrix(a, b);
  std::vector<Coord> oracle;
  for (std::size_t i = kSpecialCount; i < a.size(); ++i)
    for (std::size_t j = kSpecialCount; j < b.size(); ++j)
      if (a.tokens()[i] == b.tokens()[j]) oracle.emplace_back(i, j);
  EXPECT_EQ(m.entries(), oracle);
  ASSERT_EQ(m.nnz(), 2u);
  EXPECT_TRUE(m.contains(*a.find("red"), *b.find("red")));
  EXPECT_TRUE(m.contains(*a.find("a"), *b.find("a")));
}

TEST(StaticMatrix, AtMostOneEntryPerRowAndColumn) {
  const auto m = build_static_matrix(trained_pair().llm, trained_pair().sd);
  std::set<std::uint32_t> rows, cols;
  for (const auto& [r, c] : m.entries()) {
    EXPECT_TRUE(rows.insert(r).second);
    EXPECT_TRUE(cols.insert(c).second);
  }
}

TEST(WordlistMatrix, WholeWordsGiveOneEntry) {
  const auto a = segmented_vocab({"red</w>"}), b = segmented_vocab({"red</w>"});
  const std::vector<std::string> words{"red"};
  const auto m = build_wordlist_matrix(a, b, words);
  ASSERT_EQ(m.nnz(), 1u);
  EXPECT_TRUE(m.contains(*a.find("red</w>"), *b.find("red</w>")));
}

TEST(WordlistMatrix, SplitPiecesAllMapToWholeWord) {
  const auto a = segmented_vocab({"r", "ed</w>"}), b = segmented_vocab({"red</w>"});
  ASSERT_EQ(a.encode_ids("red").size(), 2u);
  ASSERT_EQ(b.encode_ids("red").size(), 1u);
  const std::vector<std::string> words{"red"};
  const auto m = build_wordlist_matrix(a, b, words);
  ASSERT_EQ(m.nnz(), 2u);
  EXPECT_TRUE(m.contains(*a.find("r"), *b.find("red</w>")));
  EXPECT_TRUE(m.contains(*a.find("ed</w>"), *b.find("red</w>")));
}

TEST(WordlistMatrix, EmptyWordlistIsDataError) {
  const std::vector<std::string> none;
  EXPECT_THROW(build_wordlist_matrix(trained_pair().llm, trained_pair().sd, none), DataError);
}

TEST(WordlistMatrix, OverMapsRelativeToStatic) {
  Rng rng(12);
  std::vector<std::string> words;
  for (int k = 0; k < 1000; ++k) {
    std::string w;
    const auto len = 2 + rng.below(7);
    for (std::uint64_t i = 0; i < len; ++i) w.push_back(static_cast<char>('a' + rng.below(26)));
    words.push_back(w);
  }
  const auto& [llm, sd] = trained_pair();
  EXPECT_GT(build_wordlist_matrix(llm, sd, words).density(), build_static_matrix(llm, sd).density());
}

TEST(WordlistMatrix, SubsetChainOnSingleCharacterVocabularies) {
  const Vocabulary a({"a</w>", "b</w>", "c</w>"}, {}), b({"b</w>", "a</w>", "d</w>"}, {});
  const std::vector<std::string> words{"a", "b"};
  const auto st = build_static_matrix(a, b);
  const auto wl = build_wordlist_matrix(a, b, words);
  const auto dy = build_dynamic_matrix("a b", a, b);
  EXPECT_TRUE(std::includes(wl.entries().begin(), wl.entries().end(), st.entries().begin(), st.entries().end()));
  EXPECT_TRUE(std::includes(dy.entries().begin(), dy.entries().end(), wl.entries().begin(), wl.entries().end()));
  EXPECT_EQ(st.nnz(), 2u);
  EXPECT_EQ(dy.nnz(), 4u);
}

TEST(WordlistMatrix, ContainedInUnionOfDynamicMatrices) {
  const auto& [llm, sd] = trained_pair();
  std::set<Coord> dyn;
  std::vector<std::string> words;
  for (const auto& c : caption_lines()) {
    const auto m = build_dynamic_matrix(c, llm, sd);
    dyn.insert(m.entries().begin(), m.entries().end());
    for (auto& w : split_words(c)) words.push_back(w);
  }
  const auto wl = build_wordlist_matrix(llm, sd, words);
  for (const auto& e : wl.entries()) EXPECT_TRUE(dyn.contains(e));
}

TEST(DynamicMatrix, FullBipartiteProduct) {
  const auto a = segmented_vocab({"a</w>", "red</w>", "squ", "are</w>"});
  const auto b = segmented_vocab({"a</w>", "r", "ed</w>", "squar", "e</w>"});
  ASSERT_EQ(a.encode_ids("a red square").size(), 4u);
  ASSERT_EQ(b.encode_ids("a red square").size(), 5u);
  const auto m = build_dynamic_matrix("a red square", a, b);
  EXPECT_EQ(m.nnz(), 20u);
}

TEST(DynamicMatrix, EntryCountIsProductOfDistinctTokenSets) {
  const auto& [llm, sd] = trained_pair();
  for (const auto& c : caption_lines()) {
    const auto li = llm.encode_ids(c), si = sd.encode_ids(c);
    const std::set<int> ls(li.begin(), li.end()), ss(si.begin(), si.end());
    const auto m = build_dynamic_matrix(c, llm, sd);
    EXPECT_EQ(m.nnz(), ls.size() * ss.size());
    EXPECT_LE(m.nnz(), li.size() * si.size());
  }
}

TEST(DynamicMatrix, UnrelatedCaptionsAreDisjoint) {
  const auto a = segmented_vocab({"red</w>", "square</w>"});
  const auto b = segmented_vocab({"red</w>", "square</w>", "blue</w>", "circle</w>"});
  const auto m1 = build_dynamic_matrix("red square", a, b);
  const auto m2 = build_dynamic_matrix("xyz qwv", a, b);
  std::vector<Coord> both;
  std::set_intersection(m1.entries().begin(), m1.entries().end(), m2.entries().begin(), m2.entries().end(),
                        std::back_inserter(both));
  EXPECT_TRUE(both.empty());
}

TEST(DynamicMatrix, ExtraRowsWidenRowSet) {
  const auto& [llm, sd] = trained_pair();
  const std::vector<int> extra{17};
  const auto base = build_dynamic_matrix("a red square", llm, sd);
  const auto wide = build_dynamic_matrix("a red square", llm, sd, extra);
  const auto [lo, hi] = wide.row(17);
  EXPECT_GT(hi - lo, 0);
  EXPECT_TRUE(std::includes(wide.entries().begin(), wide.entries().end(), base.entries().begin(), base.entries().end()));
  EXPECT_THROW(build_dynamic_matrix("   ", llm, sd), DataError);
}

TEST(DynamicMatrix, CacheReturnsSameMatrix) {
  const auto& [llm, sd] = trained_pair();
  DynamicMatrixCache cache;
  const auto& m1 = cache.get("a red square", llm, sd);
  const auto& m2 = cache.get("a red square", llm, sd);
  EXPECT_EQ(&m1, &m2);
  EXPECT_EQ(m1, build_dynamic_matrix("a red square", llm, sd));
  cache.clear();
  EXPECT_EQ(cache.size(), 0u);
}

TEST(Transform, IdentityAndZeroMatrices) {
  Rng rng(1);
  std::vector<Coord> id;
  for (std::uint32_t i = 0; i < 9; ++i) id.emplace_back(i, i);
  const auto x = random_onehot_rows(4, 9, rng);
  const auto y = transform(x, TransformMatrix(9, 9, id));
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  const auto z = transform(x, TransformMatrix(9, 5, {}));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(transform(x, TransformMatrix(8, 5, {})), DimensionError);
}

TEST(Transform, MatchesDenseOracleBitForBit) {
  const auto& [llm, sd] = trained_pair();
  Rng rng(2);
  for (const auto& c : caption_lines()) {
    const auto m = build_dynamic_matrix(c, llm, sd);
    auto x1 = random_onehot_rows(5, llm.size(), rng).detach(true);
    auto x2 = x1.detach(true);
    const auto w = random_dense({5, sd.size()}, rng);
    auto y1 = transform(x1, m);
    auto y2 = ad::matmul(x2, m.densify<double>());
    EXPECT_TRUE(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
    ad::backward(ad::sum(ad::mul(y1, w)));
    ad::backward(ad::sum(ad::mul(y2, w)));
    EXPECT_EQ(x1.grad(), x2.grad());
  }
}

TEST(PoolStraightThrough, ForwardEqualsTargetOneHotExactly) {
  const auto& [llm, sd] = trained_pair();
  Rng rng(3);
  for (const auto& c : caption_lines()) {
    const auto m = build_dynamic_matrix(c, llm, sd);
    const auto sd_ids = sd.encode_ids(c);
    for (std::size_t rows : {1u, 3u, 9u}) {
      const auto r = pool_straight_through(random_onehot_rows(rows, llm.size(), rng), m, c, sd);
      const auto expect = ad::one_hot<double>(sd_ids, sd.size());
      ASSERT_EQ(r.shape(), expect.shape());
      EXPECT_TRUE(std::equal(r.data().begin(), r.data().end(), expect.data().begin()));
    }
  }
}

// Independent oracle: the relaxed path with a dense product, differentiated
// numerically in long double.
TEST(PoolStraightThrough, GradientMatchesRelaxedPathFiniteDifferences) {
  const auto& [llm, sd] = trained_pair();
  Rng rng(4);
  for (const auto& c : caption_lines()) {
    std::vector<int> ids;
    const auto x = random_onehot_rows(4, llm.size(), rng, &ids);
    const auto m = build_dynamic_matrix(c, llm, sd, ids);
    const auto n_sd = sd.encode_ids(c).size();
    const auto w = random_dense({n_sd, sd.size()}, rng);

    auto leaf = x.detach(true);
    ad::backward(ad::sum(ad::mul(pool_straight_through(leaf, m, c, sd), w)));
    const auto analytic = leaf.grad();

    const auto dense = m.densify<long double>();
    const auto wl = w.cast<long double>();
    auto relaxed = [&](const Tensor<long double>& xl) {
      ad::NoGradGuard ng;
      return ad::sum(ad::mul(ad::broadcast_rows(ad::mean(ad::matmul(xl, dense), 0), n_sd), wl)).item();
    };
    auto xl = x.cast<long double>();
    auto d = xl.mutable_data();
    const long double h = 1e-6L;
    double worst = 0;
    for (std::size_t k = 0; k < d.size(); ++k) {
      const long double x0 = d[k];
      d[k] = x0 + h;
      const long double fp = relaxed(xl);
      d[k] = x0 - h;
      const long double fm = relaxed(xl);
      d[k] = x0;
      worst = std::max(worst, ad::relative_error(analytic[k], static_cast<double>((fp - fm) / (2 * h))));
    }
    EXPECT_LE(worst, 1e-5) << c;

    auto fn = [&]<class T>(const std::vector<Tensor<T>>& xs) {
      return ad::sum(ad::mul(pool_straight_through(xs[0], m, c, sd), w.template cast<T>()));
    };
    EXPECT_LE(ad::finite_diff_check(fn, {x}).max_rel_error, 1e-5) << c;
  }
}

TEST(PoolStraightThrough, DegenerateCaseIsStraightThroughIdentity) {
  const auto v = segmented_vocab({"dog</w>", "cat</w>"});
  std::vector<Coord> id;
  for (std::uint32_t i = 0; i < v.size(); ++i) id.emplace_back(i, i);
  const TransformMatrix m(v.size(), v.size(), id);
  auto x = ad::one_hot<double>(std::vector<int>{*v.find("cat</w>")}, v.size()).detach(true);
  Rng rng(5);
  const auto w = random_dense({1, v.size()}, rng);
  auto r = pool_straight_through(x, m, "cat", v);
  ASSERT_EQ(r.rows(), 1u);
  ad::backward(ad::sum(ad::mul(r, w)));
  for (std::size_t k = 0; k < v.size(); ++k) EXPECT_EQ(x.grad()[k], w.data()[k]);
}

TEST(PoolStraightThrough, GradientReachesSampledRows) {
  const auto& [llm, sd] = trained_pair();
  Rng rng(6);
  std::vector<int> ids;
  auto x = random_onehot_rows(6, llm.size(), rng, &ids).detach(true);
  const std::string text = llm.decode(ids, true);
  const auto m = build_dynamic_matrix(text.empty() ? "x" : text, llm, sd, ids);
  const auto w = random_dense({sd.encode_ids(text.empty() ? "x" : text).size(), sd.size()}, rng);
  ad::backward(ad::sum(ad::mul(pool_straight_through(x, m, text.empty() ? "x" : text, sd), w)));
  double norm = 0;
  for (double g : x.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(PoolStraightThrough, NormalizationScalesGradient) {
  const auto& [llm, sd] = trained_pair();
  const std::string c = "a red square";
  const auto m = build_dynamic_matrix(c, llm, sd);
  std::set<std::uint32_t> cols;
  for (const auto& e : m.entries()) cols.insert(e.second);
  Rng rng(8);
  const auto x = random_onehot_rows(3, llm.size(), rng);
  const auto w = random_dense({sd.encode_ids(c).size(), sd.size()}, rng);
  auto a = x.detach(true), b = x.detach(true);
  ad::backward(ad::sum(ad::mul(pool_straight_through(a, m, c, sd), w)));
  ad::backward(ad::sum(ad::mul(pool_straight_through(b, m, c, sd, {.normalize_rows = true}), w)));
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(b.grad()[k] * cols.size(), a.grad()[k], 1e-12);
}

TEST(PoolStraightThrough, EmptyCaptionIsDataError) {
  const auto& [llm, sd] = trained_pair();
  Rng rng(9);
  const auto m = build_dynamic_matrix("red", llm, sd);
  EXPECT_THROW(pool_straight_through(random_onehot_rows(2, llm.size(), rng), m, "  ", sd), DataError);
}

TEST(Memory, DenseFp16AtFortyThousand) {
  const TransformMatrix m(40000, 40000, {});
  const auto f = memory_footprint(m);
  EXPECT_EQ(f.dense_bytes_fp16, 3'200'000'000ull);
  EXPECT_EQ(f.sparse_bytes, kSparseHeaderBytes);
}

TEST(Memory, TwelveByFourteenCaptionIsKilobyteScale) {
  std::vector<Coord> coords;
  for (std::uint32_t i = 0; i < 12; ++i)
    for (std::uint32_t j = 0; j < 14; ++j) coords.emplace_back(100 + 7 * i, 300 + 11 * j);
  const TransformMatrix m(40000, 40000, coords);
  EXPECT_EQ(m.nnz(), 168u);
  const auto f = memory_footprint(m);
  EXPECT_EQ(f.sparse_bytes, 16u + 168u * 8u);
  EXPECT_LE(f.sparse_bytes, 10240u);
}

}  // namespace
}  // namespace photobridge
