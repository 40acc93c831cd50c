#include <gtest/gtest.h>

#include "photobridge/audit.hpp"

namespace photobridge::audit {
namespace {

TEST(Gradcheck, EveryGroupPassesOnFewInstances) {
  const auto groups = gradcheck_suite(5, 2);
  ASSERT_EQ(groups.size(), kGradGroups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    EXPECT_EQ(groups[i].name, kGradGroups[i]);
    EXPECT_EQ(groups[i].instances, 2u);
    EXPECT_TRUE(groups[i].ok()) << groups[i].name << " " << groups[i].max_rel_error;
  }
}

TEST(Bench, FortyThousandDenseAndWorstCaseSparse) {
  const auto b = bench_dvtm(3, 20);
  EXPECT_TRUE(b.ok());
  EXPECT_EQ(b.empty_at_bench_vocab.dense_bytes_fp16, 3'200'000'000ull);
  const auto w = worst_case_row(24);
  EXPECT_EQ(w.nnz, 576u);
  EXPECT_EQ(w.at_bench_vocab.sparse_bytes, kSparseHeaderBytes + 576u * kSparseEntryBytes);
  EXPECT_LE(w.at_bench_vocab.sparse_bytes, kSparseBudgetBytes);
}

TEST(Bench, CaptionRowsAreBoundedByTokenProduct) {
  const auto b = bench_dvtm(4, 50);
  for (const auto& r : b.rows) {
    EXPECT_LE(r.nnz, r.llm_tokens * r.sd_tokens) << r.label;
    EXPECT_GE(r.nnz, std::max(r.llm_tokens, r.sd_tokens) > 0 ? 1u : 0u) << r.label;
  }
}

TEST(Bench, CsvRowMatchesHeader) {
  const auto cols = [](const std::string& s) { return std::count(s.begin(), s.end(), ',') + 1; };
  EXPECT_EQ(cols(bench_csv_header()), cols(bench_csv_row(worst_case_row(4))));
  EXPECT_EQ(bench_csv_row(worst_case_row(2)), "worst_case_2,2,2,4,48,3200000000,0.000000");
}

}  // namespace
}  // namespace photobridge::audit
