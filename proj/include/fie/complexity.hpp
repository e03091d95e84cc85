#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "fie/array.hpp"
#include "fie/encoder.hpp"

namespace fie {

using BigInt = boost::multiprecision::cpp_int;
using Rational = boost::multiprecision::cpp_rational;

// Attention pairs only; feed-forward cost is left out, as in the cost model.
struct CostInputs {
  std::size_t L = 1, N = 1, S = 1, G = 0;
  void validate() const;
};

BigInt pairs_vanilla(std::size_t L, std::size_t N, std::size_t S);
BigInt pairs_fie(std::size_t L, std::size_t N, std::size_t S, std::size_t G);
BigInt pairs_full_concat(std::size_t L, std::size_t N, std::size_t S);
BigInt pairs_cls_to_cls(std::size_t L, std::size_t N, std::size_t S);
BigInt pairs_global_to_cls_only(std::size_t L, std::size_t N, std::size_t S, std::size_t G);

// Closed form for any fusion mode. QUERY_AS_GLOBAL counts like GLOBAL_TOKENS.
BigInt pairs_closed_form(FusionMode mode, const CostInputs& in);

struct OverheadRatio {
  Rational exact;
  double value = 0.0;
  double paper_approx = 0.0;  // 1 + 2G/S, 1 + (N-1)/L, or the exact value otherwise
};

OverheadRatio overhead_ratio(FusionMode mode, const CostInputs& in);

struct CountCheck {
  FusionMode mode;
  CostInputs inputs;
  BigInt closed;
  BigInt measured;
  std::vector<PairCounter::Layer> layers;
  bool equal() const { return closed == measured; }
};

struct VerifyReport {
  std::vector<CountCheck> checks;
  std::size_t failures() const;
  bool passed() const { return failures() == 0; }
  std::string describe_failures() const;
};

struct VerifyGrid {
  std::vector<std::size_t> L{1, 2, 3}, N{1, 2, 4}, S{2, 4, 8}, G{0, 1, 3};
  std::vector<FusionMode> modes = all_fusion_modes();
  std::uint64_t seed = 1;
};

// Counted pairs of one forward pass on a random batch.
PairCounter measure_pairs(FusionMode mode, const CostInputs& in, std::uint64_t seed,
                          std::size_t model_dim = 4, std::size_t num_heads = 1);

VerifyReport verify_counts(const VerifyGrid& grid);

struct BenchRow {
  FusionMode mode;
  CostInputs inputs;
  BigInt pairs_closed;
  BigInt pairs_measured;
  double ratio_exact = 0.0;
  double ratio_paper_approx = 0.0;
  double wall_ms_median = 0.0;
  std::size_t mem_bytes_est = 0;
  std::string note;  // set when a point is skipped
};

struct BenchGrid {
  std::vector<CostInputs> points;
  std::vector<FusionMode> modes{FusionMode::kNone, FusionMode::kGlobalTokens,
                                FusionMode::kFullConcat};
  std::size_t repeats = 5;
  std::size_t model_dim = 32;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 64;
  Precision precision = Precision::kFloat32;
  std::size_t max_bytes = std::size_t{1} << 30;
  std::uint64_t seed = 1;

  static BenchGrid small();
};

struct ComplexityReport {
  std::vector<BenchRow> rows;
  void write_csv(std::ostream& out) const;
};

ComplexityReport bench_forward(const BenchGrid& grid);

inline constexpr const char* kComplexityCsvHeader =
    "mode,L,N,S,G,pairs_closed,pairs_measured,ratio_exact,ratio_paper_approx,wall_ms_median,"
    "mem_bytes_est";

}  // namespace fie
