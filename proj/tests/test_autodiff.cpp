#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fie/autodiff.hpp"
#include "fie/gradcheck.hpp"
#include "fie/ops.hpp"
#include "fie/optim.hpp"

using namespace fie;

namespace {

using LossFn = std::function<Var<double>(Tape<double>&)>;

// Weighted sum with fixed random weights, so every output element matters.
template <typename T>
Var<T> probe(const Var<T>& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = random_normal<T>(out.shape(), 1.0, rng);
  return ops::sum(ops::mul(out, out.tape().constant(std::move(w))));
}

void expect_gradients_match(const LossFn& fn, std::vector<Parameter<double>*> params,
                            double rel = 1e-6) {
  auto report = finite_diff_check<double>(fn, params, rel, 1e-9);
  for (const auto& p : report.parameters)
    EXPECT_TRUE(p.passed) << p.name << " worst rel " << p.worst_relative_error;
}

}  // namespace

TEST(Array, ShapeAndElementCount) {
  Array<double> a({2, 3});
  EXPECT_EQ(a.size(), 6u);
  EXPECT_EQ(a.rows(), 2u);
  EXPECT_EQ(a.cols(), 3u);
  EXPECT_THROW(Array<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  Array<double> empty({0, 4});
  EXPECT_TRUE(empty.empty());
}

TEST(Array, PrecisionNames) {
  EXPECT_EQ(parse_precision("f32"), Precision::kFloat32);
  EXPECT_EQ(parse_precision("f64"), Precision::kFloat64);
  EXPECT_THROW(parse_precision("f16"), ConfigError);
  EXPECT_EQ(precision_name(Precision::kFloat32), "f32");
}

TEST(Matmul, IdentityAndRowSelection) {
  Tape<double> t;
  auto I = t.constant(Array<double>({2, 2}, {1, 0, 0, 1}));
  auto M = t.constant(Array<double>({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(ops::matmul(I, M).value().storage(), (std::vector<double>{1, 2, 3, 4}));
  auto r = t.constant(Array<double>({1, 2}, {1, 0}));
  auto col = t.constant(Array<double>({2, 1}, {7, 9}));
  EXPECT_EQ(ops::matmul(r, col).value().storage(), std::vector<double>{7});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> t;
  auto a = t.constant(Array<double>({2, 3}));
  auto b = t.constant(Array<double>({2, 3}));
  try {
    ops::matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumMatchesCentralDifferences) {
  std::mt19937_64 rng(1);
  ParameterStore<double> s;
  auto& a = s.add("a", random_normal<double>({3, 4}, 1.0, rng));
  auto& b = s.add("b", random_normal<double>({4, 2}, 1.0, rng));
  auto report = finite_diff_check<double>(
      [&](Tape<double>& t) { return ops::sum(ops::matmul(t.parameter(a), t.parameter(b))); },
      {&a, &b}, 1e-5, 0.0);
  EXPECT_TRUE(report.passed());
  EXPECT_LT(report.worst_relative_error(), 1e-5);
}

TEST(Softmax, KnownValues) {
  Tape<double> t;
  auto z = ops::softmax(t.constant(Array<double>({2}, {0, 0})), 0);
  EXPECT_DOUBLE_EQ(z.value()[0], 0.5);
  auto one = ops::softmax(t.constant(Array<double>({1}, {42.0})), 0);
  EXPECT_DOUBLE_EQ(one.value()[0], 1.0);
  auto p = ops::softmax(t.constant(Array<double>({3}, {1, 2, 3})), 0);
  EXPECT_NEAR(p.value()[0], 0.09003, 1e-5);
  EXPECT_NEAR(p.value()[1], 0.24473, 1e-5);
  EXPECT_NEAR(p.value()[2], 0.66524, 1e-5);
}

TEST(Softmax, MaskedEntriesExactlyZero) {
  Tape<double> t;
  Mask m({2, 3}, std::vector<std::uint8_t>{1, 0, 1, 0, 0, 1});
  auto p = ops::softmax(t.constant(Array<double>({2, 3}, {1, 50, 2, 3, 4, 5})), 1, &m);
  EXPECT_EQ(p.value()(0, 1), 0.0);
  EXPECT_NEAR(p.value()(0, 0) + p.value()(0, 2), 1.0, 1e-12);
  EXPECT_EQ(p.value()(1, 2), 1.0);
  Mask none({1, 2}, std::vector<std::uint8_t>{0, 0});
  EXPECT_THROW(ops::softmax(t.constant(Array<double>({1, 2})), 1, &none), DegenerateError);
}

TEST(Softmax, StableForLargeInputsAndSumsToOne) {
  std::mt19937_64 rng(3);
  Tape<double> t;
  auto x = random_normal<double>({5, 7}, 300.0, rng);
  auto p = ops::softmax(t.constant(x), 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GE(p.value()(r, c), 0.0);
      s += p.value()(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(LayerNorm, ConstantVectorGoesToZero) {
  Tape<double> t;
  auto x = t.constant(Array<double>({1, 4}, {3, 3, 3, 3}));
  auto g = t.constant(Array<double>({4}, 1.0));
  auto b = t.constant(Array<double>({4}, 0.0));
  auto y = ops::layer_norm(x, g, b);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, AlreadyNormalised) {
  Tape<double> t;
  auto y = ops::layer_norm(t.constant(Array<double>({1, 2}, {1, -1})),
                           t.constant(Array<double>({2}, 1.0)), t.constant(Array<double>({2}, 0.0)),
                           1e-12);
  EXPECT_NEAR(y.value()[0], 1.0, 1e-9);
  EXPECT_NEAR(y.value()[1], -1.0, 1e-9);
}

TEST(LayerNorm, MeanZeroVarianceOne) {
  std::mt19937_64 rng(5);
  Tape<double> t;
  auto y = ops::layer_norm(t.constant(random_normal<double>({3, 8}, 2.0, rng)),
                           t.constant(Array<double>({8}, 1.0)), t.constant(Array<double>({8}, 0.0)));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y.value()(r, c) / 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y.value()(r, c) - m) * (y.value()(r, c) - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(Concat, SingleInputAndRowOrder) {
  Tape<double> t;
  auto a = t.constant(Array<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(ops::concat<double>({a}, 0).value(), a.value());
  auto r1 = t.constant(Array<double>({1, 2}, {1, 2}));
  auto r2 = t.constant(Array<double>({1, 2}, {3, 4}));
  auto c = ops::concat<double>({r1, r2}, 0);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(c.value().storage(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Concat, SliceByOriginalExtentsIsIdentity) {
  std::mt19937_64 rng(7);
  Tape<double> t;
  auto a = t.constant(random_normal<double>({3, 2}, 1.0, rng));
  auto b = t.constant(random_normal<double>({3, 5}, 1.0, rng));
  auto c = ops::concat<double>({a, b}, 1);
  EXPECT_EQ(ops::slice(c, 1, 0, 2).value(), a.value());
  EXPECT_EQ(ops::slice(c, 1, 2, 7).value(), b.value());
  EXPECT_THROW(ops::concat<double>({a, t.constant(Array<double>({2, 2}))}, 1), DimensionError);
}

TEST(Embedding, RepeatedIdsAccumulate) {
  ParameterStore<double> s;
  auto& table = s.add("emb", Array<double>({3, 2}, {1, 2, 3, 4, 5, 6}));
  Tape<double> t;
  auto e = ops::embedding_lookup(t, table, {0, 0});
  t.backward(ops::sum(e));
  EXPECT_EQ(table.grad.storage(), (std::vector<double>{2, 2, 0, 0, 0, 0}));
  Tape<double> t2;
  EXPECT_THROW(ops::embedding_lookup(t2, table, {3}), VocabularyError);
}

TEST(Backward, LinearCaseAndUnreachableParameter) {
  ParameterStore<double> s;
  auto& p = s.add("p", Array<double>({3}, {1, 2, 3}));
  auto& q = s.add("q", Array<double>({3}, {4, 5, 6}));
  Tape<double> t;
  auto x = t.constant(Array<double>({3}, {0.5, -1, 2}));
  t.parameter(q);  // recorded but not part of the loss
  t.backward(ops::sum(ops::mul(t.parameter(p), x)));
  EXPECT_EQ(p.grad.storage(), (std::vector<double>{0.5, -1, 2}));
  EXPECT_EQ(q.grad.storage(), (std::vector<double>{0, 0, 0}));
}

TEST(Backward, NonScalarLossIsContractError) {
  ParameterStore<double> s;
  auto& p = s.add("p", Array<double>({2}));
  Tape<double> t;
  EXPECT_THROW(t.backward(t.parameter(p)), ContractError);
  Tape<double> frozen(false);
  EXPECT_THROW(frozen.backward(ops::sum(frozen.parameter(p))), ContractError);
}

TEST(Backward, ParameterUsedTwiceSumsContributions) {
  ParameterStore<double> s;
  auto& p = s.add("p", Array<double>({1}, {3.0}));
  Tape<double> t;
  auto v = t.parameter(p);
  t.backward(ops::sum(ops::mul(v, v)));
  EXPECT_DOUBLE_EQ(p.grad[0], 6.0);
}

TEST(Tape, ReplayIsBitIdentical) {
  std::mt19937_64 rng(9);
  ParameterStore<double> s;
  auto& w = s.add("w", random_normal<double>({4, 4}, 1.0, rng));
  auto x = random_normal<double>({3, 4}, 1.0, rng);
  auto run = [&] {
    Tape<double> t;
    return ops::softmax(ops::gelu(ops::matmul(t.constant(x), t.parameter(w))), 1).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, OracleOnAnalyticFunctions) {
  ParameterStore<double> s;
  auto& p = s.add("p", Array<double>({1}, {3.0}));
  LossFn square = [&](Tape<double>& t) {
    auto v = t.parameter(p);
    return ops::sum(ops::mul(v, v));
  };
  EXPECT_NEAR(numeric_derivative<double>(square, p, 0), 6.0, 1e-6);

  p.value[0] = 0.0;
  LossFn soft = [&](Tape<double>& t) {
    auto x = ops::concat<double>({t.parameter(p), t.constant(Array<double>({1}, {0.0}))}, 0);
    return ops::gather(ops::softmax(x, 0), {0});
  };
  EXPECT_NEAR(numeric_derivative<double>(soft, p, 0), 0.25, 1e-6);

  LossFn constant = [&](Tape<double>& t) { return t.constant(Array<double>({1}, {2.0})); };
  EXPECT_NEAR(numeric_derivative<double>(constant, p, 0), 0.0, 1e-12);
}

TEST(GradCheck, DetectsWrongBackward) {
  ParameterStore<double> s;
  auto& p = s.add("p", Array<double>({2}, {0.3, -0.7}));
  LossFn wrong = [&](Tape<double>& t) {
    auto v = t.parameter(p);
    Array<double> out({1}, {v.value()[0] * v.value()[0] + v.value()[1]});
    const std::size_t id = v.id();
    // d/dp0 should be 2*p0; this claims p0
    return t.push(std::move(out), {id}, [id, &p](Tape<double>& tt, const Array<double>& g) {
      auto& dst = tt.grad_for_input(id);
      dst[0] += g[0] * p.value[0];
      dst[1] += g[0];
    });
  };
  auto report = finite_diff_check<double>(wrong, {&p}, 1e-4, 1e-9);
  EXPECT_FALSE(report.passed());
}

TEST(GradCheck, NonDeterministicLossRejected) {
  ParameterStore<double> s;
  auto& p = s.add("p", Array<double>({1}, {1.0}));
  int calls = 0;
  LossFn drifting = [&](Tape<double>& t) {
    ++calls;
    return ops::scale(ops::sum(t.parameter(p)), static_cast<double>(calls));
  };
  EXPECT_THROW(finite_diff_check<double>(drifting, {&p}, 1e-4, 1e-9), DeterminismError);
}

class PrimitiveGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PrimitiveGradients, MatchCentralDifferences64) {
  const std::uint64_t seed = GetParam();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
  ParameterStore<double> s;
  auto& a = s.add("a", random_normal<double>({m, k}, 1.0, rng));
  auto& b = s.add("b", random_normal<double>({k, n}, 1.0, rng));
  auto& c = s.add("c", random_normal<double>({m, k}, 1.0, rng));
  auto& bias = s.add("bias", random_normal<double>({k}, 1.0, rng));
  auto& gain = s.add("gain", random_normal<double>({k}, 1.0, rng));
  auto& pos = s.add("pos", Array<double>({m, k}));
  for (auto& v : pos.value.values()) v = 0.5 + std::abs(static_cast<double>(rng() % 1000) / 500.0);
  auto& table = s.add("table", random_normal<double>({5, k}, 1.0, rng));
  Mask mask({m, k}, std::uint8_t{1});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t q = 1; q < k; ++q) mask[r * k + q] = (rng() % 3) != 0;

  const std::vector<std::pair<std::string, LossFn>> cases = {
      {"matmul", [&](Tape<double>& t) { return probe(ops::matmul(t.parameter(a), t.parameter(b)), 1); }},
      {"transpose", [&](Tape<double>& t) { return probe(ops::transpose(t.parameter(a)), 2); }},
      {"add", [&](Tape<double>& t) { return probe(ops::add(t.parameter(a), t.parameter(c)), 3); }},
      {"sub", [&](Tape<double>& t) { return probe(ops::sub(t.parameter(a), t.parameter(c)), 4); }},
      {"mul", [&](Tape<double>& t) { return probe(ops::mul(t.parameter(a), t.parameter(c)), 5); }},
      {"scale", [&](Tape<double>& t) { return probe(ops::scale(t.parameter(a), -1.7), 6); }},
      {"add_bias", [&](Tape<double>& t) { return probe(ops::add_bias(t.parameter(a), t.parameter(bias)), 7); }},
      {"gelu", [&](Tape<double>& t) { return probe(ops::gelu(t.parameter(a)), 8); }},
      {"log", [&](Tape<double>& t) { return probe(ops::log(t.parameter(pos)), 9); }},
      {"logsumexp", [&](Tape<double>& t) { return ops::logsumexp(t.parameter(a)); }},
      {"softmax", [&](Tape<double>& t) { return probe(ops::softmax(t.parameter(a), 1, &mask), 10); }},
      {"softmax_axis0", [&](Tape<double>& t) { return probe(ops::softmax(t.parameter(a), 0), 11); }},
      {"log_softmax", [&](Tape<double>& t) { return probe(ops::log_softmax(t.parameter(a), 1, &mask), 12); }},
      {"layer_norm", [&](Tape<double>& t) {
         return probe(ops::layer_norm(t.parameter(a), t.parameter(gain), t.parameter(bias)), 13);
       }},
      {"concat", [&](Tape<double>& t) { return probe(ops::concat<double>({t.parameter(a), t.parameter(c)}, 1), 14); }},
      {"slice", [&](Tape<double>& t) { return probe(ops::slice(t.parameter(a), 1, 0, (k + 1) / 2), 15); }},
      {"gather_rows", [&](Tape<double>& t) { return probe(ops::gather_rows(t.parameter(a), {0, m - 1, 0}), 16); }},
      {"gather", [&](Tape<double>& t) { return probe(ops::gather(t.parameter(a), {0, m * k - 1, 0}), 17); }},
      {"reshape", [&](Tape<double>& t) { return probe(ops::reshape(t.parameter(a), {m * k}), 18); }},
      {"embedding", [&](Tape<double>& t) { return probe(ops::embedding_lookup(t, table, {1, 4, 1}), 19); }},
      {"linear", [&](Tape<double>& t) {
         return probe(ops::linear(t.parameter(c), t.parameter(b), t.constant(Array<double>({n}, 0.3))), 20);
       }},
  };
  for (const auto& [name, fn] : cases) {
    SCOPED_TRACE(name);
    expect_gradients_match(fn, all_parameters(s));
  }
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, PrimitiveGradients, ::testing::Values(1, 2, 3, 4));

TEST(PrimitiveGradients32, MatchWithinLooserTolerance) {
  std::mt19937_64 rng(11);
  ParameterStore<float> s;
  auto& a = s.add("a", random_normal<float>({3, 5}, 1.0, rng));
  auto& b = s.add("b", random_normal<float>({5, 2}, 1.0, rng));
  std::function<Var<float>(Tape<float>&)> fn = [&](Tape<float>& t) {
    return ops::sum(ops::matmul(ops::gelu(t.parameter(a)), t.parameter(b)));
  };
  auto report = finite_diff_check<float>(fn, all_parameters(s), 1e-2, 1e-3);
  EXPECT_TRUE(report.passed()) << report.worst_relative_error();
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterStore<double> s;
  auto& p = s.add("p", Array<double>({2}, {1.0, -2.0}));
  Adam<double> adam(s);
  adam.step(0.1);
  EXPECT_EQ(p.value.storage(), (std::vector<double>{1.0, -2.0}));
}

TEST(Adam, FirstStepMovesByRateTimesSign) {
  ParameterStore<double> s;
  auto& p = s.add("p", Array<double>({2}, {1.0, 1.0}));
  p.grad[0] = 4.0;
  p.grad[1] = -0.5;
  Adam<double> adam(s);
  adam.step(0.01);
  EXPECT_NEAR(p.value[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p.value[1], 1.0 + 0.01, 1e-9);
  EXPECT_EQ(p.grad[0], 0.0);
  EXPECT_EQ(p.grad[1], 0.0);
  EXPECT_THROW(adam.step(-1.0), ConfigError);
}

TEST(Schedule, WarmupPeakAndDecay) {
  LinearSchedule sched{2e-3, 100, 0.1};
  EXPECT_EQ(sched.rate(0), 0.0);
  EXPECT_NEAR(sched.rate(5), 1e-3, 1e-15);
  EXPECT_NEAR(sched.rate(10), 2e-3, 1e-15);
  EXPECT_NEAR(sched.rate(55), 1e-3, 1e-15);
  EXPECT_EQ(sched.rate(100), 0.0);
}

TEST(Clip, GlobalNormScaledToMax) {
  ParameterStore<double> s;
  auto& p = s.add("p", Array<double>({1}));
  auto& q = s.add("q", Array<double>({1}));
  p.grad[0] = 3.0;
  q.grad[0] = 4.0;
  EXPECT_DOUBLE_EQ(clip_global_norm(s, 1.0), 5.0);
  EXPECT_NEAR(p.grad[0], 0.6, 1e-12);
  EXPECT_NEAR(q.grad[0], 0.8, 1e-12);
  EXPECT_DOUBLE_EQ(clip_global_norm(s, 1.0), 1.0);
}

TEST(ParameterStore, DuplicateNamesRejected) {
  ParameterStore<double> s;
  s.add("w", Array<double>({1}));
  EXPECT_THROW(s.add("w", Array<double>({1})), ContractError);
  EXPECT_TRUE(s.contains("w"));
}
