#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fie/autodiff.hpp"
#include "fie/batch.hpp"

namespace fie {

struct SpanCandidate {
  std::size_t start = 0;  // token position within the passage sequence
  std::size_t end = 0;    // inclusive
  std::size_t passage = 0;
  double logit = 0.0;
  double probability = 0.0;

  std::size_t length() const { return end - start + 1; }
};

// Normalised answer string -> aggregated probability, with the spans that
// contributed. Entries keep first-occurrence order.
class StringScoreTable {
 public:
  struct Entry {
    std::string text;
    double probability = 0.0;
    std::vector<std::size_t> spans;  // indices into the span list
  };

  void add(const std::string& text, double probability, std::size_t span_index);
  void set_probability(std::size_t entry, double p) { entries_.at(entry).probability = p; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const Entry* find(const std::string& text) const;
  double probability(const std::string& text) const;
  double total() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class ProbSpace {
  kDirectSpan,          // span classifier over h_st (+) h_en, one softmax over all spans
  kNoncondStartEnd,     // s_start(st) + s_end(en), one softmax over all spans
  kSeparateGlobal,      // p_start * p_end, each softmaxed over all passages
  kSpanReprSumString,   // classify the summed span representations of each string
  kLogitSumString,      // sum span logits per string, softmax over strings
  kPerPassageBaseline,  // p_start * p_end, softmaxed within each passage
};

enum class Objective { kMml, kMmlHardEmMax, kMmlHardEmMin, kMmlHardEmMass80 };

enum class HardEmMode { kMax, kMin, kMass80 };

std::string prob_space_name(ProbSpace v);
ProbSpace parse_prob_space(const std::string& s);
std::string objective_name(Objective o);
Objective parse_objective(const std::string& s);

struct ProbSpaceConfig {
  ProbSpace variant = ProbSpace::kDirectSpan;
  Objective objective = Objective::kMml;
  double hardem_weight = 0.1;

  void validate() const;
};

// Every span of 1..max_len tokens lying inside one passage's answer-eligible
// region. Passage-major, then by start, then by end.
std::vector<SpanCandidate> enumerate_spans(const TokenizedBatch& batch, std::size_t max_len);

// Normalised surface string of a span.
std::string span_text(const TokenizedBatch& batch, const SpanCandidate& span);

// One softmax across every candidate in every passage.
std::vector<double> global_span_softmax(std::span<const double> logits);

// Groups spans by normalised string and sums their probabilities.
StringScoreTable aggregate_strings(const std::vector<SpanCandidate>& spans,
                                   const TokenizedBatch& batch);

struct LossValue {
  double loss = 0.0;
  bool skipped = false;
};

// -log sum_{A in gold} p_string(A); skipped (loss 0) when no gold string
// occurs in the table.
LossValue mml_loss(const StringScoreTable& table, const std::vector<std::string>& gold_answers);

// Indices (into `gold`) of the gold spans a HardEM variant targets.
std::vector<std::size_t> hardem_select(std::span<const double> gold_logits,
                                       std::span<const double> gold_probabilities,
                                       HardEmMode mode);

// -log of the probability mass on the selected gold spans.
LossValue hardem_loss(const std::vector<SpanCandidate>& spans,
                      const std::vector<std::size_t>& gold_spans, HardEmMode mode);

struct Prediction {
  std::string text;
  double probability = 0.0;
};

// Highest aggregated probability; ties go to the earliest occurrence.
Prediction predict_answer(const StringScoreTable& table);

// Span classifier and start/end heads. All heads are registered regardless of
// the variant in use so that checkpoints have one layout.
template <typename T>
class SpanHead {
 public:
  SpanHead(std::size_t model_dim, double init_std, ParameterStore<T>& store, std::mt19937_64& rng);

  // Logits for spans over the stacked (N*S) x d passage states, computed in
  // chunks of at most kChunk spans. Returns a rank-1 array.
  Var<T> span_logits(Tape<T>& tape, const Var<T>& passage_states,
                     const std::vector<SpanCandidate>& spans, std::size_t seq_len) const;

  // h_st (+) h_en per span, (spans x 2d).
  Var<T> span_representations(const Var<T>& passage_states,
                              const std::vector<SpanCandidate>& spans, std::size_t seq_len) const;

  // W_span applied to rows of span representations.
  Var<T> classify(Tape<T>& tape, const Var<T>& representations) const;

  Var<T> start_logits(Tape<T>& tape, const Var<T>& passage_states) const;
  Var<T> end_logits(Tape<T>& tape, const Var<T>& passage_states) const;

  static constexpr std::size_t kChunk = std::size_t{1} << 16;

  Parameter<T>& span_output_weight() { return *w2_; }

 private:
  Parameter<T>*w1_, *b1_, *w2_, *b2_;
  Parameter<T>*start_w_, *start_b_, *end_w_, *end_b_;
};

// Scores of one example under a probability space. `unit_scores` are the
// differentiable log-domain scores of the units the objective normalises
// over: spans for span-level variants, strings for the string-level ones.
template <typename T>
struct ScoredExample {
  std::vector<SpanCandidate> spans;
  StringScoreTable table;
  Var<T> unit_scores;
  std::vector<std::string> unit_text;
  bool string_units = false;
};

// Span probabilities for the start/end variants (per-passage baseline,
// separate global softmaxes, non-conditional start+end logits).
template <typename T>
ScoredExample<T> baseline_start_end(Tape<T>& tape, const SpanHead<T>& head,
                                    const Var<T>& passage_states, const TokenizedBatch& batch,
                                    std::size_t max_len, ProbSpace variant);

// String-level probability spaces (summed span representations or summed
// span logits, softmax over strings).
template <typename T>
ScoredExample<T> string_prob_space_variants(Tape<T>& tape, const SpanHead<T>& head,
                                            const Var<T>& passage_states,
                                            const TokenizedBatch& batch, std::size_t max_len,
                                            ProbSpace variant);

// Dispatches on the variant; DIRECT_SPAN is the default global span space.
template <typename T>
ScoredExample<T> score_example(Tape<T>& tape, const SpanHead<T>& head,
                               const Var<T>& passage_states, const TokenizedBatch& batch,
                               std::size_t max_len, ProbSpace variant);

template <typename T>
struct ObjectiveValue {
  Var<T> loss;
  bool skipped = false;
};

// MML over the gold units, optionally plus weighted HardEM. The scores are
// renormalised over the enumerated units, so for span products this is the
// likelihood conditioned on the length-limited span set.
template <typename T>
ObjectiveValue<T> objective(Tape<T>& tape, const ScoredExample<T>& scored,
                            const std::vector<std::string>& gold_answers,
                            const ProbSpaceConfig& config);

}  // namespace fie
