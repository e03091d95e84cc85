#include <gtest/gtest.h>

#include <random>

#include "fie/analysis.hpp"

using namespace fie;

namespace {

Array<double> identity(std::size_t n) {
  Array<double> a({n, n});
  for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
  return a;
}

Array<double> dense_product(const Array<double>& a, const Array<double>& b) {
  const std::size_t n = a.rows();
  Array<double> c({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c(i, j) += a(i, k) * b(k, j);
  return c;
}

Array<double> residual(const Array<double>& a) {
  const std::size_t n = a.rows();
  Array<double> r({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += r(i, j) = 0.5 * a(i, j) + (i == j ? 0.5 : 0.0);
    for (std::size_t j = 0; j < n; ++j) r(i, j) /= s;
  }
  return r;
}

// 2 passages x 2 tokens + 1 global; passage rows see their block and the
// global, the global row sees everything
Array<double> uniform_fie_layer() {
  Array<double> a({5, 5});
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t i = 0; i < 2; ++i) {
      const std::size_t r = j * 2 + i;
      a(r, j * 2) = a(r, j * 2 + 1) = a(r, 4) = 1.0 / 3;
    }
  for (std::size_t c = 0; c < 5; ++c) a(4, c) = 0.2;
  return a;
}

FusionConfig tiny(FusionMode mode, std::size_t G) {
  FusionConfig c;
  c.num_layers = 2;
  c.model_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.num_passages = 3;
  c.seq_len = 6;
  c.num_global_tokens = G;
  c.fusion_mode = mode;
  c.init_std = 0.5;
  return c;
}

struct Traced {
  ParameterStore<double> store;
  std::mt19937_64 rng{5};
  Encoder<double> enc;
  TokenizedBatch batch;
  Tape<double> tape{false};
  ForwardResult<double> res;
  explicit Traced(FusionMode mode, std::size_t G = 2)
      : enc(tiny(mode, G), 20, store, rng),
        batch(TokenizedBatch::from_ids({5}, {{6, 7}, {8, 9, 10}, {11}}, 6,
                                       G ? std::vector<std::size_t>{18, 19} : std::vector<std::size_t>{})) {
    if (!uses_global_tokens(mode)) batch.global_slot_ids.clear();
    res = enc.forward(tape, batch, {true});
  }
  JointLayout layout() const {
    return {3, 6, enc.config().active_globals(), 2, 2};
  }
};

}  // namespace

TEST(Rollout, IdentityAttention) {
  std::vector<Array<double>> layers(3, identity(6));
  auto r = attention_rollout(layers, 2, 3);
  EXPECT_EQ(r.rollout, identity(6));
  for (double m : r.cross_passage_mass) EXPECT_EQ(m, 0.0);
}

TEST(Rollout, HandBuiltTwoLayerInstance) {
  std::vector<Array<double>> layers(2, uniform_fie_layer());
  auto r = attention_rollout(layers, 2, 2);
  // A_hat row 0 reaches passage 1 only through the global: 1/6 * 1/10 per token
  EXPECT_NEAR(r.cross_passage_mass[0], 1.0 / 30, 1e-9);
  EXPECT_NEAR(r.cross_passage_mass[1], 1.0 / 30, 1e-9);
  auto oracle = dense_product(residual(layers[1]), residual(layers[0]));
  for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(r.rollout[i], oracle[i], 1e-12);
}

TEST(Rollout, MatchesDenseProductOnRandomRows) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<Array<double>> layers;
    for (int l = 0; l < 3; ++l) {
      Array<double> a({6, 6});
      for (std::size_t i = 0; i < 6; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 6; ++j) s += a(i, j) = u(rng);
        for (std::size_t j = 0; j < 6; ++j) a(i, j) /= s;
      }
      layers.push_back(a);
    }
    auto r = attention_rollout(layers, 2, 3);
    auto oracle = residual(layers[0]);
    for (std::size_t l = 1; l < 3; ++l) oracle = dense_product(residual(layers[l]), oracle);
    for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(r.rollout[i], oracle[i], 1e-9);
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) s += r.rollout(i, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(JointAttention, NoneModeIsBlockDiagonal) {
  Traced run(FusionMode::kNone, 0);
  auto layers = assemble_joint_attention(run.res.traces, run.layout());
  ASSERT_EQ(layers.size(), 2u);
  for (const auto& a : layers)
    for (std::size_t q = 0; q < 18; ++q) {
      double s = 0;
      for (std::size_t k = 0; k < 18; ++k) {
        if (q / 6 != k / 6) EXPECT_EQ(a(q, k), 0.0);
        s += a(q, k);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  auto r = attention_rollout(layers, 3, 6);
  for (double m : r.cross_passage_mass) EXPECT_EQ(m, 0.0);
  auto one = attention_rollout(std::vector<Array<double>>{layers[0]}, 3, 6);
  for (double m : one.cross_passage_mass) EXPECT_EQ(m, 0.0);
}

TEST(JointAttention, GlobalTokensPattern) {
  Traced run(FusionMode::kGlobalTokens);
  auto layers = assemble_joint_attention(run.res.traces, run.layout());
  for (const auto& a : layers) {
    for (std::size_t q = 0; q < 20; ++q) {
      double s = 0;
      for (std::size_t k = 0; k < 20; ++k) {
        if (q < 18 && k < 18 && q / 6 != k / 6) EXPECT_EQ(a(q, k), 0.0);
        s += a(q, k);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    // global rows reach every passage
    for (std::size_t j = 0; j < 3; ++j) EXPECT_GT(a(18, j * 6), 0.0);
  }
  auto r = attention_rollout(layers, 3, 6);
  for (double m : r.cross_passage_mass) EXPECT_GT(m, 0.0);
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 20; ++j) s += r.rollout(i, j);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(JointAttention, MissingTraceIsAnError) {
  Traced run(FusionMode::kGlobalTokens);
  auto traces = run.res.traces;
  traces.pop_back();
  EXPECT_THROW(assemble_joint_attention(traces, run.layout()), ContractError);
}

TEST(Similarity, NotApplicableWithoutGlobals) {
  Traced run(FusionMode::kNone, 0);
  auto rep = global_token_similarity(run.res.output(3, 6), run.batch, {});
  EXPECT_FALSE(rep.applicable);
}

TEST(Similarity, EqualStatesAreDegenerate) {
  EncoderOutput<double> out;
  Array<double> h({6, 3});
  h.fill(1.0);
  out.passage_states = {h, h, h};
  out.global_states = Array<double>({1, 3});
  out.global_states.fill(0.5);
  auto batch = TokenizedBatch::from_ids({5}, {{6, 7}, {8, 9, 10}, {11}}, 6, {18});
  auto rep = global_token_similarity(out, batch, {3});
  EXPECT_TRUE(rep.applicable);
  EXPECT_TRUE(rep.degenerate);
  EXPECT_TRUE(std::is_sorted(rep.ranking.begin(), rep.ranking.end()));
  EXPECT_TRUE(rep.top1_is_answer);  // position 3 is the first context token
}

TEST(Similarity, PlantedGlobalRanksFirst) {
  Traced run(FusionMode::kGlobalTokens);
  auto out = run.res.output(3, 6);
  // passage 1, position 4 holds token 9
  for (std::size_t k = 0; k < 8; ++k) out.global_states(1, k) = out.passage_states[1](4, k);
  auto rep = global_token_similarity(out, run.batch, {6 + 4});
  EXPECT_EQ(rep.ranking.front(), 6u + 4);
  EXPECT_NEAR(rep.scores.front(), 1.0, 1e-12);
  EXPECT_TRUE(rep.top1_is_answer);
  EXPECT_TRUE(rep.top10_has_all_answers);
  EXPECT_FALSE(rep.degenerate);
}

TEST(MassStats, UniformAttentionGivesRatioOne) {
  Traced run(FusionMode::kGlobalTokens);
  auto traces = run.res.traces;
  for (auto& rec : traces) {
    double n = 0;
    for (auto v : rec.key_valid) n += v;
    for (std::size_t r = 0; r < rec.queries.size(); ++r)
      for (std::size_t c = 0; c < rec.keys.size(); ++c) rec.weights(r, c) = rec.key_valid[c] / n;
  }
  auto st = attention_mass_stats(traces, run.batch);
  EXPECT_NEAR(st.global_ratio, 1.0, 1e-9);
  EXPECT_NEAR(st.query_ratio, 1.0, 1e-9);
  EXPECT_GT(st.global_samples, 0u);
}

TEST(MassStats, HandBuiltRow) {
  auto batch = TokenizedBatch::from_ids({}, {{6, 7}}, 4, {18});
  AttentionRecord rec;
  rec.queries = {2};
  rec.keys = {2, 4, 3};  // key 1 is the global (joint index N*S)
  rec.key_valid = {1, 1, 1};
  rec.weights = Array<double>({1, 3});
  rec.weights[0] = 0.25;
  rec.weights[1] = 0.5;
  rec.weights[2] = 0.25;
  auto st = attention_mass_stats({rec}, batch);
  EXPECT_NEAR(st.global_ratio, 1.5, 1e-12);
  EXPECT_NEAR(st.global_share, 0.5, 1e-12);
}

TEST(MassStats, UniformShareIsGlobalFraction) {
  auto batch = TokenizedBatch::from_ids({}, {{6, 7, 8}}, 5, {18, 19});
  AttentionRecord rec;
  rec.queries = {2, 3};
  rec.keys = {0, 1, 2, 3, 4, 5, 6};
  rec.key_valid = std::vector<std::uint8_t>(7, 1);
  rec.weights = Array<double>({2, 7});
  rec.weights.fill(1.0 / 7);
  auto st = attention_mass_stats({rec}, batch);
  EXPECT_NEAR(st.global_share, 2.0 / 7, 1e-12);
  EXPECT_NEAR(st.global_ratio, 1.0, 1e-12);
}

TEST(Report, JsonKeysAndAccumulation) {
  AnalysisAccumulator acc;
  RolloutResult r1{identity(4), {0.2, 0.4}};
  RolloutResult r2{identity(4), {0.4, 0.0}};
  SimilarityReport yes;
  yes.applicable = true;
  yes.top1_is_answer = true;
  SimilarityReport no;
  no.applicable = true;
  MassStats m;
  m.global_ratio = 2.0;
  m.global_samples = 1;
  acc.add(r1, yes, m);
  acc.add(r2, no, m);
  auto rep = acc.report();
  EXPECT_NEAR(rep.rollout_cross_passage_mass[0], 0.3, 1e-12);
  EXPECT_NEAR(rep.top1_answer_fraction, 0.5, 1e-12);
  auto j = rep.to_json();
  for (const char* k : {"rollout_cross_passage_mass", "top1_answer_fraction",
                        "top10_all_answers_fraction", "attention_ratios", "mass_shares"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["attention_ratios"]["global"].get<double>(), 2.0);
}
