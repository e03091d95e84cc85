#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "fie/array.hpp"
#include "fie/batch.hpp"
#include "fie/encoder.hpp"

namespace fie {

// Joint index space: passage j token i -> j*S + i, global g -> N*S + g.
struct JointLayout {
  std::size_t num_passages = 0;
  std::size_t seq_len = 0;
  std::size_t num_global = 0;
  std::size_t num_layers = 0;
  std::size_t num_heads = 1;

  std::size_t size() const { return num_passages * seq_len + num_global; }
};

// Head-averaged dense attention per layer. Pairs a mode never computes are 0.
std::vector<Array<double>> assemble_joint_attention(const std::vector<AttentionRecord>& traces,
                                                    const JointLayout& layout);

struct RolloutResult {
  Array<double> rollout;                     // joint x joint, row-stochastic
  std::vector<double> cross_passage_mass;    // per passage
};

// A_hat = (A + I) / 2 with rows renormalised, R = A_hat_L ... A_hat_1. Cross
// passage mass of block j: mean over its rows of the mass on other passages'
// token columns. Global columns are not counted as other passages.
RolloutResult attention_rollout(const std::vector<Array<double>>& layers,
                                std::size_t num_passages, std::size_t seq_len);

struct SimilarityReport {
  bool applicable = false;  // false when there are no global states
  bool degenerate = false;  // every candidate scored the same
  bool top1_is_answer = false;
  bool top10_has_all_answers = false;
  std::vector<std::size_t> ranking;  // joint positions, best first
  std::vector<double> scores;        // aligned with ranking
};

// Ranks context tokens by max cosine similarity to any global state. Ties go
// to the earlier position. The top-10 check drops repeated token ids first.
template <typename T>
SimilarityReport global_token_similarity(const EncoderOutput<T>& output,
                                         const TokenizedBatch& batch,
                                         const std::vector<std::size_t>& answer_positions);

struct MassStats {
  double global_ratio = 0.0;  // mean of w * |valid keys| over global keys
  double query_ratio = 0.0;
  double global_share = 0.0;  // mean over rows of the mass on global keys
  double query_share = 0.0;
  std::size_t global_samples = 0;
  std::size_t query_samples = 0;
  std::size_t rows = 0;
};

MassStats attention_mass_stats(const std::vector<AttentionRecord>& traces,
                               const TokenizedBatch& batch);

struct AnalysisReport {
  std::vector<double> rollout_cross_passage_mass;
  double top1_answer_fraction = 0.0;
  double top10_all_answers_fraction = 0.0;
  double global_ratio = 0.0, query_ratio = 0.0;
  double global_share = 0.0, query_share = 0.0;
  std::size_t examples = 0;
  std::size_t similarity_examples = 0;

  nlohmann::json to_json() const;
};

// Accumulates per-example results into running means.
class AnalysisAccumulator {
 public:
  void add(const RolloutResult& rollout, const SimilarityReport& sim, const MassStats& mass);
  AnalysisReport report() const;

 private:
  std::vector<double> cross_sum_;
  std::size_t examples_ = 0, sim_examples_ = 0, top1_ = 0, top10_ = 0;
  double gr_ = 0, qr_ = 0, gs_ = 0, qs_ = 0;
  std::size_t gr_n_ = 0, qr_n_ = 0;
};

}  // namespace fie
