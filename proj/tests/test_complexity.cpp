#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fie/complexity.hpp"

using namespace fie;

TEST(ClosedForm, Vanilla) {
  EXPECT_EQ(pairs_vanilla(1, 1, 1), 1);
  EXPECT_EQ(pairs_vanilla(12, 100, 250), 75000000);
  EXPECT_EQ(pairs_vanilla(2, 3, 4), 96);
}

TEST(ClosedForm, Fie) {
  EXPECT_EQ(pairs_fie(1, 2, 3, 1), 31);
  EXPECT_EQ(pairs_fie(12, 100, 250, 10), 81001200);
  EXPECT_EQ(pairs_fie(3, 4, 5, 0), pairs_vanilla(3, 4, 5));
}

TEST(ClosedForm, FullConcat) {
  EXPECT_EQ(pairs_full_concat(5, 1, 7), pairs_vanilla(5, 1, 7));
  EXPECT_EQ(pairs_full_concat(2, 2, 3), 54);
  EXPECT_EQ(pairs_full_concat(12, 100, 250), 693750000);
}

TEST(ClosedForm, LargeInputsDoNotOverflow) {
  const BigInt v = pairs_full_concat(1000, 1000000, 100000);
  EXPECT_EQ(v, BigInt(999) * 1000000 * 100000 * 100000 + BigInt(100000000000) * 100000000000);
}

TEST(ClosedForm, AlgebraicIdentity) {
  for (std::size_t L = 1; L <= 4; ++L)
    for (std::size_t N = 1; N <= 5; ++N)
      for (std::size_t S = 1; S <= 9; S += 2)
        for (std::size_t G = 0; G <= 4; ++G) {
          const BigInt expanded = BigInt(L) * N * S * S + BigInt(2) * L * N * S * G + BigInt(L) * G * G;
          EXPECT_EQ(pairs_fie(L, N, S, G), expanded);
          EXPECT_EQ(pairs_closed_form(FusionMode::kQueryAsGlobal, {L, N, S, G}),
                    pairs_fie(L, N, S, G));
          EXPECT_EQ(pairs_closed_form(FusionMode::kNone, {L, N, S, G}), pairs_vanilla(L, N, S));
        }
}

TEST(Overhead, PaperConfigurations) {
  auto fie = overhead_ratio(FusionMode::kGlobalTokens, {12, 100, 250, 10});
  EXPECT_NEAR(fie.value, 1.080016, 1e-9);
  EXPECT_NEAR(fie.paper_approx, 1.08, 1e-12);
  EXPECT_DOUBLE_EQ(std::round(fie.paper_approx * 10) / 10, 1.1);
  auto cat = overhead_ratio(FusionMode::kFullConcat, {12, 100, 250, 0});
  EXPECT_EQ(cat.exact, Rational(37, 4));
  EXPECT_NEAR(cat.paper_approx, 1.0 + 99.0 / 12, 1e-12);
  EXPECT_DOUBLE_EQ(std::round(cat.paper_approx * 10) / 10, 9.3);
  EXPECT_EQ(overhead_ratio(FusionMode::kGlobalTokens, {3, 4, 5, 0}).exact, 1);
}

TEST(Overhead, DroppedTermIsExact) {
  for (std::size_t L = 1; L <= 3; ++L)
    for (std::size_t N = 1; N <= 4; ++N)
      for (std::size_t S = 1; S <= 6; ++S)
        for (std::size_t G = 0; G <= 3; ++G) {
          const auto r = overhead_ratio(FusionMode::kGlobalTokens, {L, N, S, G});
          const Rational approx = 1 + Rational(2 * G, S);
          EXPECT_EQ(r.exact - approx, Rational(G * G, N * S * S));
        }
}

TEST(Inputs, RejectZeroDims) {
  EXPECT_THROW((CostInputs{0, 1, 1, 0}).validate(), ConfigError);
  EXPECT_THROW((CostInputs{1, 1, 0, 0}).validate(), ConfigError);
  EXPECT_NO_THROW((CostInputs{1, 1, 1, 0}).validate());
}

TEST(Measured, SpotChecks) {
  EXPECT_EQ(measure_pairs(FusionMode::kGlobalTokens, {1, 2, 3, 1}, 1).total(), 31u);
  EXPECT_EQ(measure_pairs(FusionMode::kFullConcat, {2, 2, 3, 0}, 1).total(), 54u);
  EXPECT_EQ(measure_pairs(FusionMode::kNone, {2, 3, 4, 2}, 1).total(), 96u);
}

TEST(Measured, VerificationGrid) {
  VerifyGrid grid;
  auto report = verify_counts(grid);
  EXPECT_GE(report.checks.size(), 81u);
  EXPECT_TRUE(report.passed()) << report.describe_failures();
}

TEST(Bench, CsvAndOrdering) {
  BenchGrid grid = BenchGrid::small();
  grid.repeats = 5;
  auto report = bench_forward(grid);
  std::ostringstream os;
  report.write_csv(os);
  std::istringstream in(os.str());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, kComplexityCsvHeader);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_EQ(lines, grid.points.size() * grid.modes.size());

  for (auto mode : grid.modes) {
    std::vector<double> medians;
    for (const auto& r : report.rows) {
      if (r.mode != mode) continue;
      EXPECT_EQ(r.pairs_closed, r.pairs_measured);
      EXPECT_TRUE(r.note.empty());
      medians.push_back(r.wall_ms_median);
    }
    ASSERT_EQ(medians.size(), 4u);
    // small points are noisy; the largest N must still dominate the smallest
    EXPECT_GT(medians.back(), medians.front()) << fusion_mode_name(mode);
  }
}

TEST(Bench, MemoryBudgetSkips) {
  BenchGrid grid = BenchGrid::small();
  grid.points.resize(1);
  grid.repeats = 1;
  grid.max_bytes = 16;
  auto report = bench_forward(grid);
  ASSERT_FALSE(report.rows.empty());
  for (const auto& r : report.rows) EXPECT_FALSE(r.note.empty());
}
