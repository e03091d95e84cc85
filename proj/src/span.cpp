#include "fie/span.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "fie/error.hpp"
#include "fie/ops.hpp"
#include "fie/text.hpp"

namespace fie {

namespace {

struct VariantName {
  ProbSpace variant;
  const char* name;
};

constexpr VariantName kVariantNames[] = {
    {ProbSpace::kDirectSpan, "direct_span"},
    {ProbSpace::kNoncondStartEnd, "noncond_start_end"},
    {ProbSpace::kSeparateGlobal, "separate_global"},
    {ProbSpace::kSpanReprSumString, "span_repr_sum_string"},
    {ProbSpace::kLogitSumString, "logit_sum_string"},
    {ProbSpace::kPerPassageBaseline, "per_passage_baseline"},
};

struct ObjectiveName {
  Objective objective;
  const char* name;
};

constexpr ObjectiveName kObjectiveNames[] = {
    {Objective::kMml, "mml"},
    {Objective::kMmlHardEmMax, "mml_hardem_max"},
    {Objective::kMmlHardEmMin, "mml_hardem_min"},
    {Objective::kMmlHardEmMass80, "mml_hardem_mass80"},
};

std::set<std::string> normalized_set(const std::vector<std::string>& answers) {
  std::set<std::string> out;
  for (const auto& a : answers) {
    auto n = normalize_answer(a);
    if (!n.empty()) out.insert(std::move(n));
  }
  return out;
}

template <typename T>
void fill_softmax(std::vector<SpanCandidate>& spans, const Array<T>& logits) {
  std::vector<double> l(logits.values().begin(), logits.values().end());
  const auto p = global_span_softmax(l);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    spans[i].logit = l[i];
    spans[i].probability = p[i];
  }
}

std::vector<std::size_t> flat_rows(const std::vector<SpanCandidate>& spans, std::size_t seq_len,
                                   bool use_end) {
  std::vector<std::size_t> rows;
  rows.reserve(spans.size());
  for (const auto& s : spans) rows.push_back(s.passage * seq_len + (use_end ? s.end : s.start));
  return rows;
}

}  // namespace

std::string prob_space_name(ProbSpace v) {
  for (const auto& e : kVariantNames)
    if (e.variant == v) return e.name;
  return "unknown";
}

ProbSpace parse_prob_space(const std::string& s) {
  for (const auto& e : kVariantNames)
    if (s == e.name) return e.variant;
  throw ConfigError("unknown probability space '" + s + "'");
}

std::string objective_name(Objective o) {
  for (const auto& e : kObjectiveNames)
    if (e.objective == o) return e.name;
  return "unknown";
}

Objective parse_objective(const std::string& s) {
  for (const auto& e : kObjectiveNames)
    if (s == e.name) return e.objective;
  throw ConfigError("unknown objective '" + s + "'");
}

void ProbSpaceConfig::validate() const {
  if (!(hardem_weight >= 0.0)) throw ConfigError("hardem_weight must be non-negative");
}

void StringScoreTable::add(const std::string& text, double probability, std::size_t span_index) {
  auto it = index_.find(text);
  if (it == index_.end()) {
    index_.emplace(text, entries_.size());
    entries_.push_back({text, probability, {span_index}});
    return;
  }
  auto& e = entries_[it->second];
  e.probability += probability;
  e.spans.push_back(span_index);
}

const StringScoreTable::Entry* StringScoreTable::find(const std::string& text) const {
  auto it = index_.find(text);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

double StringScoreTable::probability(const std::string& text) const {
  const auto* e = find(text);
  return e ? e->probability : 0.0;
}

double StringScoreTable::total() const {
  double t = 0.0;
  for (const auto& e : entries_) t += e.probability;
  return t;
}

std::vector<SpanCandidate> enumerate_spans(const TokenizedBatch& batch, std::size_t max_len) {
  std::vector<SpanCandidate> spans;
  for (std::size_t j = 0; j < batch.num_passages(); ++j) {
    const auto& ctx = batch.context_masks[j];
    const std::size_t S = ctx.size();
    for (std::size_t st = 0; st < S; ++st) {
      if (!ctx[st]) continue;
      for (std::size_t en = st; en < S && en - st < max_len && ctx[en]; ++en) {
        spans.push_back({st, en, j, 0.0, 0.0});
      }
    }
  }
  return spans;
}

std::string span_text(const TokenizedBatch& batch, const SpanCandidate& span) {
  const auto& surf = batch.surface.at(span.passage);
  if (span.end >= surf.size() || span.start > span.end) {
    throw ContractError("span outside passage bounds");
  }
  return normalize_answer(join(surf, span.start, span.end + 1));
}

std::vector<double> global_span_softmax(std::span<const double> logits) {
  if (logits.empty()) throw DegenerateError("softmax over an empty span list");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    denom += p[i];
  }
  for (auto& v : p) v /= denom;
  return p;
}

StringScoreTable aggregate_strings(const std::vector<SpanCandidate>& spans,
                                   const TokenizedBatch& batch) {
  StringScoreTable table;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    table.add(span_text(batch, spans[i]), spans[i].probability, i);
  }
  return table;
}

LossValue mml_loss(const StringScoreTable& table, const std::vector<std::string>& gold_answers) {
  if (table.empty()) throw DegenerateError("mml_loss on an empty score table");
  double mass = 0.0;
  bool found = false;
  for (const auto& g : normalized_set(gold_answers)) {
    if (const auto* e = table.find(g)) {
      mass += e->probability;
      found = true;
    }
  }
  if (!found) return {0.0, true};
  return {-std::log(mass), false};
}

std::vector<std::size_t> hardem_select(std::span<const double> gold_logits,
                                       std::span<const double> gold_probabilities,
                                       HardEmMode mode) {
  if (gold_logits.empty()) return {};
  switch (mode) {
    case HardEmMode::kMax:
      return {static_cast<std::size_t>(
          std::max_element(gold_logits.begin(), gold_logits.end()) - gold_logits.begin())};
    case HardEmMode::kMin:
      return {static_cast<std::size_t>(
          std::min_element(gold_logits.begin(), gold_logits.end()) - gold_logits.begin())};
    case HardEmMode::kMass80: {
      std::vector<std::size_t> order(gold_probabilities.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return gold_probabilities[a] > gold_probabilities[b];
      });
      const double total =
          std::accumulate(gold_probabilities.begin(), gold_probabilities.end(), 0.0);
      std::vector<std::size_t> chosen;
      double covered = 0.0;
      for (std::size_t i : order) {
        chosen.push_back(i);
        covered += gold_probabilities[i];
        if (covered >= 0.8 * total) break;
      }
      return chosen;
    }
  }
  return {};
}

LossValue hardem_loss(const std::vector<SpanCandidate>& spans,
                      const std::vector<std::size_t>& gold_spans, HardEmMode mode) {
  if (gold_spans.empty()) return {0.0, true};
  std::vector<double> logits, probs;
  for (auto i : gold_spans) {
    logits.push_back(spans.at(i).logit);
    probs.push_back(spans.at(i).probability);
  }
  double mass = 0.0;
  for (auto k : hardem_select(logits, probs, mode)) mass += probs[k];
  return {-std::log(mass), false};
}

Prediction predict_answer(const StringScoreTable& table) {
  if (table.empty()) throw DegenerateError("no prediction: empty score table");
  const StringScoreTable::Entry* best = &table.entries().front();
  for (const auto& e : table.entries())
    if (e.probability > best->probability) best = &e;
  return {best->text, best->probability};
}

template <typename T>
SpanHead<T>::SpanHead(std::size_t model_dim, double init_std, ParameterStore<T>& store,
                      std::mt19937_64& rng) {
  const std::size_t d = model_dim;
  w1_ = &store.add("span.hidden.weight", random_normal<T>({2 * d, d}, init_std, rng));
  b1_ = &store.add("span.hidden.bias", Array<T>({d}));
  w2_ = &store.add("span.output.weight", random_normal<T>({d, 1}, init_std, rng));
  b2_ = &store.add("span.output.bias", Array<T>({1}));
  start_w_ = &store.add("start.weight", random_normal<T>({d, 1}, init_std, rng));
  start_b_ = &store.add("start.bias", Array<T>({1}));
  end_w_ = &store.add("end.weight", random_normal<T>({d, 1}, init_std, rng));
  end_b_ = &store.add("end.bias", Array<T>({1}));
}

template <typename T>
Var<T> SpanHead<T>::span_representations(const Var<T>& passage_states,
                                         const std::vector<SpanCandidate>& spans,
                                         std::size_t seq_len) const {
  const std::size_t rows = passage_states.rows();
  for (const auto& s : spans) {
    if (s.start > s.end || (s.passage + 1) * seq_len > rows || s.end >= seq_len) {
      throw ContractError("span (" + std::to_string(s.passage) + "," + std::to_string(s.start) +
                          "," + std::to_string(s.end) + ") outside the encoded passages");
    }
  }
  auto starts = ops::gather_rows(passage_states, flat_rows(spans, seq_len, false));
  auto ends = ops::gather_rows(passage_states, flat_rows(spans, seq_len, true));
  return ops::concat<T>({starts, ends}, 1);
}

template <typename T>
Var<T> SpanHead<T>::classify(Tape<T>& tape, const Var<T>& representations) const {
  auto hidden =
      ops::gelu(ops::linear(representations, tape.parameter(*w1_), tape.parameter(*b1_)));
  auto out = ops::linear(hidden, tape.parameter(*w2_), tape.parameter(*b2_));
  return ops::reshape(out, {out.rows()});
}

template <typename T>
Var<T> SpanHead<T>::span_logits(Tape<T>& tape, const Var<T>& passage_states,
                                const std::vector<SpanCandidate>& spans,
                                std::size_t seq_len) const {
  if (spans.empty()) return tape.constant(Array<T>({0}));
  std::vector<Var<T>> chunks;
  for (std::size_t begin = 0; begin < spans.size(); begin += kChunk) {
    const std::size_t end = std::min(spans.size(), begin + kChunk);
    std::vector<SpanCandidate> part(spans.begin() + static_cast<long>(begin),
                                    spans.begin() + static_cast<long>(end));
    chunks.push_back(classify(tape, span_representations(passage_states, part, seq_len)));
  }
  return chunks.size() == 1 ? chunks.front() : ops::concat(chunks, 0);
}

template <typename T>
Var<T> SpanHead<T>::start_logits(Tape<T>& tape, const Var<T>& passage_states) const {
  auto out = ops::linear(passage_states, tape.parameter(*start_w_), tape.parameter(*start_b_));
  return ops::reshape(out, {out.rows()});
}

template <typename T>
Var<T> SpanHead<T>::end_logits(Tape<T>& tape, const Var<T>& passage_states) const {
  auto out = ops::linear(passage_states, tape.parameter(*end_w_), tape.parameter(*end_b_));
  return ops::reshape(out, {out.rows()});
}

template <typename T>
ScoredExample<T> baseline_start_end(Tape<T>& tape, const SpanHead<T>& head,
                                    const Var<T>& passage_states, const TokenizedBatch& batch,
                                    std::size_t max_len, ProbSpace variant) {
  ScoredExample<T> out;
  out.spans = enumerate_spans(batch, max_len);
  if (out.spans.empty()) throw DegenerateError("no answer-eligible spans in batch");
  const std::size_t N = batch.num_passages(), S = batch.seq_len;
  const auto st_rows = flat_rows(out.spans, S, false);
  const auto en_rows = flat_rows(out.spans, S, true);
  auto s_start = head.start_logits(tape, passage_states);
  auto s_end = head.end_logits(tape, passage_states);

  switch (variant) {
    case ProbSpace::kNoncondStartEnd: {
      out.unit_scores = ops::add(ops::gather(s_start, st_rows), ops::gather(s_end, en_rows));
      fill_softmax(out.spans, out.unit_scores.value());
      break;
    }
    case ProbSpace::kSeparateGlobal:
    case ProbSpace::kPerPassageBaseline: {
      const bool per_passage = variant == ProbSpace::kPerPassageBaseline;
      Mask mask(per_passage ? Shape{N, S} : Shape{N * S});
      for (std::size_t j = 0; j < N; ++j) {
        bool any = false;
        for (std::size_t i = 0; i < S; ++i) {
          mask[j * S + i] = batch.context_masks[j][i];
          any = any || batch.context_masks[j][i];
        }
        // Passages without eligible tokens contribute no spans; give the
        // softmax something to normalise over.
        if (per_passage && !any)
          for (std::size_t i = 0; i < S; ++i) mask[j * S + i] = 1;
      }
      const std::size_t axis = per_passage ? 1 : 0;
      const Shape shape = per_passage ? Shape{N, S} : Shape{N * S};
      auto log_p_start = ops::log_softmax(ops::reshape(s_start, shape), axis, &mask);
      auto log_p_end = ops::log_softmax(ops::reshape(s_end, shape), axis, &mask);
      out.unit_scores = ops::add(ops::gather(log_p_start, st_rows), ops::gather(log_p_end, en_rows));
      const auto& v = out.unit_scores.value();
      for (std::size_t i = 0; i < out.spans.size(); ++i) {
        out.spans[i].logit = v[i];
        out.spans[i].probability = std::exp(static_cast<double>(v[i]));
      }
      break;
    }
    default:
      throw ModeError("baseline_start_end does not handle " + prob_space_name(variant));
  }
  for (const auto& s : out.spans) out.unit_text.push_back(span_text(batch, s));
  out.table = aggregate_strings(out.spans, batch);
  return out;
}

template <typename T>
ScoredExample<T> string_prob_space_variants(Tape<T>& tape, const SpanHead<T>& head,
                                            const Var<T>& passage_states,
                                            const TokenizedBatch& batch, std::size_t max_len,
                                            ProbSpace variant) {
  if (variant != ProbSpace::kSpanReprSumString && variant != ProbSpace::kLogitSumString)
    throw ModeError("string_prob_space_variants does not handle " + prob_space_name(variant));
  ScoredExample<T> out;
  out.string_units = true;
  out.spans = enumerate_spans(batch, max_len);
  if (out.spans.empty()) throw DegenerateError("no answer-eligible spans in batch");
  const std::size_t M = out.spans.size();

  for (std::size_t i = 0; i < M; ++i) out.table.add(span_text(batch, out.spans[i]), 0.0, i);
  const std::size_t U = out.table.size();
  Array<T> assign({U, M});
  for (std::size_t u = 0; u < U; ++u) {
    out.unit_text.push_back(out.table.entries()[u].text);
    for (auto i : out.table.entries()[u].spans) assign(u, i) = T{1};
  }
  auto grouping = tape.constant(std::move(assign));

  if (variant == ProbSpace::kLogitSumString) {
    auto logits = head.span_logits(tape, passage_states, out.spans, batch.seq_len);
    for (std::size_t i = 0; i < M; ++i) out.spans[i].logit = logits.value()[i];
    auto summed = ops::matmul(grouping, ops::reshape(logits, {M, 1}));
    out.unit_scores = ops::reshape(summed, {U});
  } else {
    auto reps = head.span_representations(passage_states, out.spans, batch.seq_len);
    out.unit_scores = head.classify(tape, ops::matmul(grouping, reps));
  }
  std::vector<double> l(out.unit_scores.value().values().begin(),
                        out.unit_scores.value().values().end());
  const auto p = global_span_softmax(l);
  for (std::size_t u = 0; u < U; ++u) {
    out.table.set_probability(u, p[u]);
    // Spread the string probability evenly for per-span reporting.
    const auto& members = out.table.entries()[u].spans;
    for (auto i : members) out.spans[i].probability = p[u] / static_cast<double>(members.size());
  }
  return out;
}

template <typename T>
ScoredExample<T> score_example(Tape<T>& tape, const SpanHead<T>& head,
                               const Var<T>& passage_states, const TokenizedBatch& batch,
                               std::size_t max_len, ProbSpace variant) {
  switch (variant) {
    case ProbSpace::kDirectSpan: {
      ScoredExample<T> out;
      out.spans = enumerate_spans(batch, max_len);
      if (out.spans.empty()) throw DegenerateError("no answer-eligible spans in batch");
      out.unit_scores = head.span_logits(tape, passage_states, out.spans, batch.seq_len);
      fill_softmax(out.spans, out.unit_scores.value());
      for (const auto& s : out.spans) out.unit_text.push_back(span_text(batch, s));
      out.table = aggregate_strings(out.spans, batch);
      return out;
    }
    case ProbSpace::kNoncondStartEnd:
    case ProbSpace::kSeparateGlobal:
    case ProbSpace::kPerPassageBaseline:
      return baseline_start_end(tape, head, passage_states, batch, max_len, variant);
    case ProbSpace::kSpanReprSumString:
    case ProbSpace::kLogitSumString:
      return string_prob_space_variants(tape, head, passage_states, batch, max_len, variant);
  }
  throw ModeError("unknown probability space");
}

template <typename T>
ObjectiveValue<T> objective(Tape<T>& tape, const ScoredExample<T>& scored,
                            const std::vector<std::string>& gold_answers,
                            const ProbSpaceConfig& config) {
  config.validate();
  const auto gold = normalized_set(gold_answers);
  std::vector<std::size_t> gold_units;
  for (std::size_t u = 0; u < scored.unit_text.size(); ++u)
    if (gold.count(scored.unit_text[u])) gold_units.push_back(u);
  if (gold_units.empty()) return {tape.constant(Array<T>({1})), true};

  const auto& all = scored.unit_scores;
  auto lse_all = ops::logsumexp(all);
  auto loss = ops::sub(lse_all, ops::logsumexp(ops::gather(all, gold_units)));

  if (config.objective != Objective::kMml && config.hardem_weight > 0.0) {
    const HardEmMode mode = config.objective == Objective::kMmlHardEmMax   ? HardEmMode::kMax
                            : config.objective == Objective::kMmlHardEmMin ? HardEmMode::kMin
                                                                           : HardEmMode::kMass80;
    const double lse = lse_all.value()[0];
    std::vector<double> logits, probs;
    for (auto u : gold_units) {
      logits.push_back(all.value()[u]);
      probs.push_back(std::exp(static_cast<double>(all.value()[u]) - lse));
    }
    std::vector<std::size_t> chosen;
    for (auto k : hardem_select(logits, probs, mode)) chosen.push_back(gold_units[k]);
    auto hard = ops::sub(lse_all, ops::logsumexp(ops::gather(all, chosen)));
    loss = ops::add(loss, ops::scale(hard, static_cast<T>(config.hardem_weight)));
  }
  return {loss, false};
}

#define FIE_INSTANTIATE_SPAN(T)                                                                \
  template class SpanHead<T>;                                                                  \
  template ScoredExample<T> baseline_start_end<T>(Tape<T>&, const SpanHead<T>&, const Var<T>&, \
                                                  const TokenizedBatch&, std::size_t,          \
                                                  ProbSpace);                                  \
  template ScoredExample<T> string_prob_space_variants<T>(                                     \
      Tape<T>&, const SpanHead<T>&, const Var<T>&, const TokenizedBatch&, std::size_t,         \
      ProbSpace);                                                                              \
  template ScoredExample<T> score_example<T>(Tape<T>&, const SpanHead<T>&, const Var<T>&,      \
                                             const TokenizedBatch&, std::size_t, ProbSpace);   \
  template ObjectiveValue<T> objective<T>(Tape<T>&, const ScoredExample<T>&,                   \
                                          const std::vector<std::string>&,                     \
                                          const ProbSpaceConfig&);

FIE_INSTANTIATE_SPAN(float)
FIE_INSTANTIATE_SPAN(double)

#undef FIE_INSTANTIATE_SPAN

}  // namespace fie
