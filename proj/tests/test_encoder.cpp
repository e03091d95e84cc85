#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fie/encoder.hpp"
#include "fie/ops.hpp"

using namespace fie;

namespace {

constexpr std::size_t kVocab = 20;

FusionConfig tiny(FusionMode mode, std::size_t N = 2, std::size_t S = 6, std::size_t G = 2,
                  std::size_t L = 2) {
  FusionConfig c;
  c.num_layers = L;
  c.model_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.num_passages = N;
  c.seq_len = S;
  c.num_global_tokens = G;
  c.fusion_mode = mode;
  c.max_answer_len = 3;
  c.init_std = 0.5;
  return c;
}

std::vector<std::size_t> globals(std::size_t G) {
  std::vector<std::size_t> g;
  for (std::size_t i = 0; i < G; ++i) g.push_back(kVocab - G + i);
  return g;
}

TokenizedBatch random_batch(std::mt19937_64& rng, std::size_t N, std::size_t S, std::size_t G,
                            bool ragged = true) {
  std::uniform_int_distribution<std::size_t> word(4, kVocab - 5);
  std::vector<std::size_t> q{word(rng)};
  std::vector<std::vector<std::size_t>> ctx(N);
  for (auto& c : ctx) {
    std::size_t len = S - 3;
    if (ragged) len = 1 + rng() % (S - 3);
    for (std::size_t i = 0; i < len; ++i) c.push_back(word(rng));
  }
  return TokenizedBatch::from_ids(q, ctx, S, globals(G));
}

template <typename T>
struct Fixture {
  ParameterStore<T> store;
  std::mt19937_64 rng;
  Encoder<T> enc;
  Fixture(const FusionConfig& c, std::uint64_t seed = 7) : rng(seed), enc(c, kVocab, store, rng) {}
};

}  // namespace

TEST(FusionConfig, ValidatesHeadsAndNames) {
  auto c = tiny(FusionMode::kGlobalTokens);
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  for (auto m : all_fusion_modes()) EXPECT_EQ(parse_fusion_mode(fusion_mode_name(m)), m);
  EXPECT_THROW(parse_fusion_mode("decoder"), ConfigError);
  EXPECT_EQ(tiny(FusionMode::kNone).active_globals(), 0u);
  EXPECT_EQ(tiny(FusionMode::kClsToCls).active_globals(), 0u);
}

TEST(Embed, EmptyGlobalsAndIdenticalPassages) {
  Fixture<double> f(tiny(FusionMode::kGlobalTokens, 2, 6, 0));
  auto b = TokenizedBatch::from_ids({5}, {{6, 7}, {6, 7}}, 6, {});
  Tape<double> t;
  auto s = f.enc.embed(t, b);
  EXPECT_EQ(s.globals.rows(), 0u);
  const auto& v = s.passages.value();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(v(i, k), v(6 + i, k));
}

TEST(Embed, GlobalsUseTokenEmbeddingsWithoutPosition) {
  Fixture<double> f(tiny(FusionMode::kGlobalTokens));
  auto b = TokenizedBatch::from_ids({5}, {{6}, {7}}, 6, globals(2));
  Tape<double> t;
  auto s = f.enc.embed(t, b);
  const auto& table = f.store.get("embeddings.token").value;
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(s.globals.value()(g, k), table(kVocab - 2 + g, k));
}

TEST(Embed, QueryAsGlobalTakesQueryEmbeddingsCycled) {
  Fixture<double> f(tiny(FusionMode::kQueryAsGlobal, 2, 8, 3));
  auto b = TokenizedBatch::from_ids({9, 11}, {{6}, {7}}, 8, globals(3));
  Tape<double> t;
  auto s = f.enc.embed(t, b);
  const auto& table = f.store.get("embeddings.token").value;
  const std::size_t expect[3] = {9, 11, 9};
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(s.globals.value()(g, k), table(expect[g], k));
}

TEST(Embed, OutOfRangeIdIsVocabularyError) {
  Fixture<double> f(tiny(FusionMode::kNone));
  auto b = TokenizedBatch::from_ids({5}, {{kVocab + 3}, {6}}, 6, {});
  Tape<double> t;
  EXPECT_THROW(f.enc.forward(t, b), VocabularyError);
}

TEST(PassageAttention, IdenticalKeysGiveCommonValue) {
  auto c = tiny(FusionMode::kNone, 1, 5, 0, 1);
  Fixture<double> f(c);
  f.store.get("embeddings.position").value.fill(0.0);
  // every position holds the same token, so all rows are equal
  TokenizedBatch b = TokenizedBatch::from_ids({6}, {{6, 6, 6}}, 5, {});
  b.sequence_ids[0] = {6, 6, 6, 6, 6};
  auto run = [&] {
    Tape<double> t;
    auto s = f.enc.embed(t, b);
    auto p = f.enc.project(t, 0, s);
    return f.enc.passage_attention(t, 0, s, p, b, {}).value();
  };
  const auto before = run();
  auto& wq = f.store.get("layer0.attention.query.weight").value;
  for (auto& v : wq.values()) v *= -3.0;
  const auto after = run();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i], after[i], 1e-12);
}

TEST(PassageAttention, CounterIncrementPerPassage) {
  Fixture<double> f(tiny(FusionMode::kGlobalTokens, 1, 6, 2, 1));
  std::mt19937_64 rng(1);
  auto b = random_batch(rng, 1, 6, 2);
  Tape<double> t;
  auto s = f.enc.embed(t, b);
  auto p = f.enc.project(t, 0, s);
  PairCounter counter;
  counter.reset(1);
  f.enc.passage_attention(t, 0, s, p, b, {&counter, nullptr});
  EXPECT_EQ(counter.layers[0].passage_pairs, 6u * (6 + 2));
  EXPECT_EQ(counter.layers[0].global_pairs, 0u);
  EXPECT_THROW(f.enc.passage_attention(t, 5, s, p, b, {}), ContractError);
}

TEST(GlobalAttention, CounterAndModeErrors) {
  std::mt19937_64 rng(2);
  {
    Fixture<double> f(tiny(FusionMode::kGlobalTokens, 3, 6, 2, 1));
    auto b = random_batch(rng, 3, 6, 2);
    Tape<double> t;
    auto s = f.enc.embed(t, b);
    auto p = f.enc.project(t, 0, s);
    PairCounter counter;
    counter.reset(1);
    f.enc.global_attention(t, 0, s, p, b, {&counter, nullptr});
    EXPECT_EQ(counter.layers[0].global_pairs, 2u * (3 * 6 + 2));
  }
  {
    Fixture<double> f(tiny(FusionMode::kGlobalToClsOnly, 3, 6, 2, 1));
    auto b = random_batch(rng, 3, 6, 2);
    Tape<double> t;
    auto s = f.enc.embed(t, b);
    auto p = f.enc.project(t, 0, s);
    PairCounter counter;
    counter.reset(1);
    f.enc.global_attention(t, 0, s, p, b, {&counter, nullptr});
    EXPECT_EQ(counter.layers[0].global_pairs, 2u * (3 + 2));
  }
  for (auto mode : {FusionMode::kNone, FusionMode::kClsToCls}) {
    Fixture<double> f(tiny(mode, 2, 6, 0, 1));
    auto b = random_batch(rng, 2, 6, 0);
    Tape<double> t;
    auto s = f.enc.embed(t, b);
    auto p = f.enc.project(t, 0, s);
    EXPECT_THROW(f.enc.global_attention(t, 0, s, p, b, {}), ModeError);
    EXPECT_THROW(f.enc.full_concat_attention(t, 0, s, p, b, {}), ModeError);
  }
}

TEST(Forward, ClosedFormCounts) {
  std::mt19937_64 rng(3);
  {
    Fixture<double> f(tiny(FusionMode::kFullConcat, 2, 3, 0, 2));
    Tape<double> t(false);
    auto b = TokenizedBatch::from_ids({}, {{5}, {6}}, 3, {});
    EXPECT_EQ(f.enc.forward(t, b).counter.total(), 54u);
  }
  {
    Fixture<double> f(tiny(FusionMode::kGlobalTokens, 2, 3, 1, 1));
    Tape<double> t(false);
    auto b = TokenizedBatch::from_ids({}, {{5}, {6}}, 3, globals(1));
    EXPECT_EQ(f.enc.forward(t, b).counter.total(), 31u);
  }
  {
    Fixture<double> f(tiny(FusionMode::kFullConcat, 1, 6, 0, 3));
    Tape<double> t(false);
    auto b = random_batch(rng, 1, 6, 0);
    EXPECT_EQ(f.enc.forward(t, b).counter.total(), 3u * 36);
  }
}

TEST(Forward, GlobalTokensWithZeroGIsBitIdenticalToNone) {
  std::mt19937_64 rng(4);
  Fixture<double> a(tiny(FusionMode::kGlobalTokens, 3, 7, 0));
  Fixture<double> n(tiny(FusionMode::kNone, 3, 7, 0));
  for (int rep = 0; rep < 5; ++rep) {
    auto b = random_batch(rng, 3, 7, 0);
    Tape<double> t1(false), t2(false);
    EXPECT_EQ(a.enc.forward(t1, b).state.passages.value(), n.enc.forward(t2, b).state.passages.value());
  }
}

TEST(Forward, NoneModeIsolatesPassages) {
  std::mt19937_64 rng(5);
  Fixture<double> f(tiny(FusionMode::kNone, 2, 6, 0));
  auto b = random_batch(rng, 2, 6, 0, false);
  auto b2 = b;
  b2.sequence_ids[1][3] = (b.sequence_ids[1][3] == 7) ? 8 : 7;
  Tape<double> t1(false), t2(false);
  auto o1 = f.enc.forward(t1, b).output(2, 6);
  auto o2 = f.enc.forward(t2, b2).output(2, 6);
  EXPECT_EQ(o1.passage_states[0], o2.passage_states[0]);
  EXPECT_NE(o1.passage_states[1], o2.passage_states[1]);
}

TEST(Forward, GlobalTokensCarryCrossPassageSignal) {
  std::mt19937_64 rng(6);
  Fixture<double> f(tiny(FusionMode::kGlobalTokens, 2, 6, 2));
  auto b = random_batch(rng, 2, 6, 2, false);
  auto b2 = b;
  b2.sequence_ids[1][3] = (b.sequence_ids[1][3] == 7) ? 8 : 7;
  Tape<double> t1(false), t2(false);
  auto o1 = f.enc.forward(t1, b).output(2, 6);
  auto o2 = f.enc.forward(t2, b2).output(2, 6);
  double diff = 0;
  for (std::size_t i = 0; i < o1.passage_states[0].size(); ++i)
    diff = std::max(diff, std::abs(o1.passage_states[0][i] - o2.passage_states[0][i]));
  EXPECT_GT(diff, 1e-9);
}

TEST(Forward, JacobianAcrossPassages) {
  // token 15 only occurs in passage 2
  auto b = TokenizedBatch::from_ids({5}, {{6, 7, 8}, {15, 9, 10}}, 6, globals(2));
  auto grad_of_token = [&](FusionMode mode) {
    Fixture<double> f(tiny(mode, 2, 6, mode == FusionMode::kNone ? 0 : 2));
    auto bb = b;
    if (mode == FusionMode::kNone) bb.global_slot_ids.clear();
    Tape<double> t;
    auto res = f.enc.forward(t, bb);
    t.backward(ops::sum(ops::slice(res.state.passages, 0, 0, 6)));
    double g = 0;
    const auto& grad = f.store.get("embeddings.token").grad;
    for (std::size_t k = 0; k < 8; ++k) g += std::abs(grad(15, k));
    return g;
  };
  EXPECT_EQ(grad_of_token(FusionMode::kNone), 0.0);
  EXPECT_GT(grad_of_token(FusionMode::kGlobalTokens), 0.0);
}

TEST(Forward, PassagePermutationEquivariance) {
  std::mt19937_64 rng(8);
  for (auto mode : {FusionMode::kGlobalTokens, FusionMode::kGlobalToClsOnly, FusionMode::kClsToCls,
                    FusionMode::kFullConcat}) {
    const std::size_t G = uses_global_tokens(mode) ? 2 : 0;
    Fixture<double> f(tiny(mode, 4, 6, G));
    auto b = random_batch(rng, 4, 6, G);
    std::vector<std::size_t> order{2, 0, 3, 1};
    Tape<double> t1(false), t2(false);
    auto o = f.enc.forward(t1, b).output(4, 6);
    auto p = f.enc.forward(t2, b.permuted(order)).output(4, 6);
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < o.passage_states[0].size(); ++i)
        EXPECT_NEAR(p.passage_states[j][i], o.passage_states[order[j]][i], 1e-9);
    for (std::size_t i = 0; i < o.global_states.size(); ++i)
      EXPECT_NEAR(p.global_states[i], o.global_states[i], 1e-9);
  }
}

TEST(Forward, TraceRowsAreStochasticAndMasked) {
  std::mt19937_64 rng(9);
  for (auto mode : all_fusion_modes()) {
    const std::size_t G = uses_global_tokens(mode) ? 2 : 0;
    Fixture<double> f(tiny(mode, 3, 7, G));
    auto b = random_batch(rng, 3, 7, G);
    Tape<double> t(false);
    auto res = f.enc.forward(t, b, {true});
    ASSERT_FALSE(res.traces.empty());
    for (const auto& rec : res.traces) {
      for (std::size_t r = 0; r < rec.queries.size(); ++r) {
        double s = 0;
        for (std::size_t c = 0; c < rec.keys.size(); ++c) {
          if (!rec.key_valid[c]) EXPECT_EQ(rec.weights(r, c), 0.0);
          s += rec.weights(r, c);
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(Forward, NonFiniteWeightsNameTheLayer) {
  Fixture<double> f(tiny(FusionMode::kGlobalTokens));
  f.store.get("layer1.ffn.inner.weight").value[0] = std::nan("");
  std::mt19937_64 rng(10);
  auto b = random_batch(rng, 2, 6, 2);
  Tape<double> t(false);
  try {
    f.enc.forward(t, b);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
  }
}

TEST(Forward, BatchMustMatchConfig) {
  Fixture<double> f(tiny(FusionMode::kGlobalTokens));
  std::mt19937_64 rng(11);
  Tape<double> t(false);
  EXPECT_THROW(f.enc.forward(t, random_batch(rng, 2, 7, 2)), ContractError);
  EXPECT_THROW(f.enc.forward(t, random_batch(rng, 2, 6, 1)), ContractError);
}

TEST(Forward, SinglePrecisionTracksDouble) {
  std::mt19937_64 rng(12);
  auto c = tiny(FusionMode::kGlobalTokens);
  Fixture<double> d(c, 3);
  Fixture<float> s(c, 3);
  auto b = random_batch(rng, 2, 6, 2);
  Tape<double> td(false);
  Tape<float> ts(false);
  const auto od = d.enc.forward(td, b).state.passages.value();
  const auto os = s.enc.forward(ts, b).state.passages.value();
  for (std::size_t i = 0; i < od.size(); ++i) EXPECT_NEAR(od[i], os[i], 1e-4);
}
