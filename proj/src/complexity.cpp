#include "fie/complexity.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "fie/error.hpp"

namespace fie {

namespace {

BigInt big(std::size_t v) { return BigInt(static_cast<unsigned long long>(v)); }

TokenizedBatch random_batch(const CostInputs& in, std::mt19937_64& rng) {
  constexpr std::size_t kWords = 16;
  std::uniform_int_distribution<std::size_t> word(Vocabulary::kNumSpecial, kWords - 1);
  const std::size_t q = in.S >= 3 ? 1 : 0;
  std::vector<std::size_t> query;
  for (std::size_t i = 0; i < q; ++i) query.push_back(word(rng));
  std::vector<std::vector<std::size_t>> contexts(in.N);
  for (auto& c : contexts)
    for (std::size_t i = 0; i + q + 2 < in.S; ++i) c.push_back(word(rng));
  std::vector<std::size_t> globals;
  for (std::size_t g = 0; g < in.G; ++g) globals.push_back(kWords + g);
  return TokenizedBatch::from_ids(query, contexts, in.S, globals);
}

FusionConfig bench_config(FusionMode mode, const CostInputs& in, std::size_t d, std::size_t heads,
                          std::size_t ffn) {
  FusionConfig c;
  c.num_layers = in.L;
  c.num_passages = in.N;
  c.seq_len = in.S;
  c.num_global_tokens = in.G;
  c.fusion_mode = mode;
  c.model_dim = d;
  c.num_heads = heads;
  c.ffn_dim = ffn;
  c.validate();
  return c;
}

template <typename T>
void timed_forward(const BenchGrid& grid, FusionMode mode, BenchRow& row) {
  std::mt19937_64 rng(grid.seed);
  ParameterStore<T> store;
  auto config = bench_config(mode, row.inputs, grid.model_dim, grid.num_heads, grid.ffn_dim);
  Encoder<T> enc(config, 16 + row.inputs.G, store, rng);
  const auto batch = random_batch(row.inputs, rng);
  std::vector<double> ms;
  for (std::size_t r = 0; r < std::max<std::size_t>(grid.repeats, 1); ++r) {
    Tape<T> tape(false);
    const auto t0 = std::chrono::steady_clock::now();
    auto res = enc.forward(tape, batch);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (r == 0) {
      row.pairs_measured = BigInt(res.counter.total());
      std::size_t bytes = store.element_count() * sizeof(T);
      for (std::size_t id = 0; id < tape.size(); ++id) bytes += tape.value(id).size() * sizeof(T);
      row.mem_bytes_est = bytes;
    }
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  row.wall_ms_median = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
}

}  // namespace

void CostInputs::validate() const {
  if (L < 1 || N < 1 || S < 1) throw ConfigError("L, N and S must be positive");
}

BigInt pairs_vanilla(std::size_t L, std::size_t N, std::size_t S) {
  return big(L) * big(N) * big(S) * big(S);
}

BigInt pairs_fie(std::size_t L, std::size_t N, std::size_t S, std::size_t G) {
  const BigInt ns = big(N) * big(S);
  return big(L) * (ns * (big(S) + big(G)) + big(G) * (ns + big(G)));
}

BigInt pairs_full_concat(std::size_t L, std::size_t N, std::size_t S) {
  const BigInt ns = big(N) * big(S);
  return (big(L) - 1) * big(N) * big(S) * big(S) + ns * ns;
}

BigInt pairs_cls_to_cls(std::size_t L, std::size_t N, std::size_t S) {
  return big(L) * big(N) * (big(S) * big(S) + big(N) - 1);
}

BigInt pairs_global_to_cls_only(std::size_t L, std::size_t N, std::size_t S, std::size_t G) {
  const BigInt ns = big(N) * big(S);
  return big(L) * (ns * (big(S) + big(G)) + big(G) * (big(N) + big(G)));
}

BigInt pairs_closed_form(FusionMode mode, const CostInputs& in) {
  in.validate();
  switch (mode) {
    case FusionMode::kNone:
      return pairs_vanilla(in.L, in.N, in.S);
    case FusionMode::kGlobalTokens:
    case FusionMode::kQueryAsGlobal:
      return pairs_fie(in.L, in.N, in.S, in.G);
    case FusionMode::kClsToCls:
      return pairs_cls_to_cls(in.L, in.N, in.S);
    case FusionMode::kGlobalToClsOnly:
      return pairs_global_to_cls_only(in.L, in.N, in.S, in.G);
    case FusionMode::kFullConcat:
      return pairs_full_concat(in.L, in.N, in.S);
  }
  throw ModeError("unknown fusion mode");
}

OverheadRatio overhead_ratio(FusionMode mode, const CostInputs& in) {
  const BigInt base = pairs_vanilla(in.L, in.N, in.S);
  if (base == 0) throw DegenerateError("vanilla pair count is zero");
  OverheadRatio r;
  r.exact = Rational(pairs_closed_form(mode, in), base);
  r.value = static_cast<double>(r.exact);
  switch (mode) {
    case FusionMode::kGlobalTokens:
    case FusionMode::kQueryAsGlobal:
      r.paper_approx = 1.0 + 2.0 * static_cast<double>(in.G) / static_cast<double>(in.S);
      break;
    case FusionMode::kFullConcat:
      r.paper_approx = 1.0 + static_cast<double>(in.N - 1) / static_cast<double>(in.L);
      break;
    default:
      r.paper_approx = r.value;
  }
  return r;
}

std::size_t VerifyReport::failures() const {
  return static_cast<std::size_t>(
      std::count_if(checks.begin(), checks.end(), [](const CountCheck& c) { return !c.equal(); }));
}

std::string VerifyReport::describe_failures() const {
  std::ostringstream out;
  for (const auto& c : checks) {
    if (c.equal()) continue;
    out << fusion_mode_name(c.mode) << " L=" << c.inputs.L << " N=" << c.inputs.N
        << " S=" << c.inputs.S << " G=" << c.inputs.G << ": closed " << c.closed << " measured "
        << c.measured << " layers [";
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
      out << (l ? " " : "") << c.layers[l].passage_pairs << "+" << c.layers[l].global_pairs;
    }
    out << "]\n";
  }
  return out.str();
}

PairCounter measure_pairs(FusionMode mode, const CostInputs& in, std::uint64_t seed,
                          std::size_t model_dim, std::size_t num_heads) {
  in.validate();
  std::mt19937_64 rng(seed);
  ParameterStore<double> store;
  Encoder<double> enc(bench_config(mode, in, model_dim, num_heads, model_dim), 16 + in.G, store,
                      rng);
  const auto batch = random_batch(in, rng);
  Tape<double> tape(false);
  return enc.forward(tape, batch).counter;
}

VerifyReport verify_counts(const VerifyGrid& grid) {
  VerifyReport report;
  std::uint64_t seed = grid.seed;
  for (auto L : grid.L)
    for (auto N : grid.N)
      for (auto S : grid.S)
        for (auto G : grid.G)
          for (auto mode : grid.modes) {
            CountCheck c{mode, {L, N, S, G}, 0, 0, {}};
            c.closed = pairs_closed_form(mode, c.inputs);
            auto counter = measure_pairs(mode, c.inputs, seed++);
            c.measured = BigInt(counter.total());
            c.layers = counter.layers;
            report.checks.push_back(std::move(c));
          }
  return report;
}

BenchGrid BenchGrid::small() {
  BenchGrid g;
  for (std::size_t n : {1, 2, 4, 8}) g.points.push_back({2, n, 32, 4});
  return g;
}

ComplexityReport bench_forward(const BenchGrid& grid) {
  ComplexityReport report;
  for (const auto& in : grid.points) {
    in.validate();
    for (auto mode : grid.modes) {
      BenchRow row;
      row.mode = mode;
      row.inputs = in;
      row.pairs_closed = pairs_closed_form(mode, in);
      const auto ratio = overhead_ratio(mode, in);
      row.ratio_exact = ratio.value;
      row.ratio_paper_approx = ratio.paper_approx;
      const std::size_t elem = grid.precision == Precision::kFloat32 ? 4 : 8;
      if (row.pairs_closed * elem * grid.num_heads > BigInt(grid.max_bytes)) {
        row.note = "skipped: attention scores exceed memory budget";
        report.rows.push_back(std::move(row));
        continue;
      }
      if (grid.precision == Precision::kFloat32)
        timed_forward<float>(grid, mode, row);
      else
        timed_forward<double>(grid, mode, row);
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

void ComplexityReport::write_csv(std::ostream& out) const {
  // attention pairs only, feed-forward cost not included
  out << kComplexityCsvHeader << "\n";
  for (const auto& r : rows) {
    out << fusion_mode_name(r.mode) << ',' << r.inputs.L << ',' << r.inputs.N << ','
        << r.inputs.S << ',' << r.inputs.G << ',' << r.pairs_closed << ',';
    if (r.note.empty())
      out << r.pairs_measured;
    out << ',' << std::setprecision(10) << r.ratio_exact << ',' << r.ratio_paper_approx << ',';
    if (r.note.empty())
      out << std::fixed << std::setprecision(4) << r.wall_ms_median << std::defaultfloat << ','
          << r.mem_bytes_est;
    else
      out << ',';
    out << "\n";
  }
}

}  // namespace fie
