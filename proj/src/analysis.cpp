#include "fie/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fie/error.hpp"

namespace fie {

std::vector<Array<double>> assemble_joint_attention(const std::vector<AttentionRecord>& traces,
                                                    const JointLayout& layout) {
  const std::size_t J = layout.size();
  if (layout.num_heads == 0) throw ContractError("num_heads must be positive");
  std::vector<Array<double>> out(layout.num_layers, Array<double>({J, J}));
  std::vector<std::vector<std::size_t>> covered(layout.num_layers, std::vector<std::size_t>(J, 0));
  const double inv_h = 1.0 / static_cast<double>(layout.num_heads);
  for (const auto& rec : traces) {
    if (rec.layer >= layout.num_layers) throw ContractError("trace layer out of range");
    auto& A = out[rec.layer];
    for (std::size_t qi = 0; qi < rec.queries.size(); ++qi) {
      const std::size_t q = rec.queries[qi];
      if (q >= J) throw DimensionError("trace query index outside the joint layout");
      ++covered[rec.layer][q];
      for (std::size_t kc = 0; kc < rec.keys.size(); ++kc) {
        if (rec.keys[kc] >= J) throw DimensionError("trace key index outside the joint layout");
        A(q, rec.keys[kc]) += rec.weights(qi, kc) * inv_h;
      }
    }
  }
  for (std::size_t l = 0; l < layout.num_layers; ++l)
    for (std::size_t q = 0; q < J; ++q)
      if (covered[l][q] != layout.num_heads)
        throw ContractError("missing attention trace for layer " + std::to_string(l) + " row " +
                            std::to_string(q));
  return out;
}

RolloutResult attention_rollout(const std::vector<Array<double>>& layers,
                                std::size_t num_passages, std::size_t seq_len) {
  if (layers.empty()) throw ContractError("rollout needs at least one layer");
  const std::size_t J = layers.front().rows();
  if (num_passages * seq_len > J) throw DimensionError("passage blocks exceed the joint size");
  RolloutResult res;
  Array<double> R;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& A = layers[l];
    if (A.rank() != 2 || A.rows() != J || A.cols() != J)
      throw DimensionError("layer " + std::to_string(l) + " has shape " + shape_string(A.shape()));
    Array<double> hat({J, J});
    for (std::size_t r = 0; r < J; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < J; ++c) {
        hat(r, c) = 0.5 * A(r, c) + (r == c ? 0.5 : 0.0);
        total += hat(r, c);
      }
      for (std::size_t c = 0; c < J; ++c) hat(r, c) /= total;
    }
    if (l == 0) {
      R = std::move(hat);
      continue;
    }
    Array<double> next({J, J});
    for (std::size_t i = 0; i < J; ++i)
      for (std::size_t k = 0; k < J; ++k) {
        const double h = hat(i, k);
        if (h == 0.0) continue;
        for (std::size_t j = 0; j < J; ++j) next(i, j) += h * R(k, j);
      }
    R = std::move(next);
  }
  const std::size_t NS = num_passages * seq_len;
  for (std::size_t p = 0; p < num_passages; ++p) {
    double mass = 0.0;
    for (std::size_t i = 0; i < seq_len; ++i) {
      const std::size_t r = p * seq_len + i;
      for (std::size_t c = 0; c < NS; ++c)
        if (c / seq_len != p) mass += R(r, c);
    }
    res.cross_passage_mass.push_back(seq_len ? mass / static_cast<double>(seq_len) : 0.0);
  }
  res.rollout = std::move(R);
  return res;
}

template <typename T>
SimilarityReport global_token_similarity(const EncoderOutput<T>& output,
                                         const TokenizedBatch& batch,
                                         const std::vector<std::size_t>& answer_positions) {
  SimilarityReport rep;
  const std::size_t G = output.global_states.empty() ? 0 : output.global_states.rows();
  if (G == 0) return rep;
  rep.applicable = true;
  const std::size_t S = batch.seq_len, d = output.global_states.cols();

  auto norm = [d](const T* v) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += static_cast<double>(v[k]) * v[k];
    return std::sqrt(s);
  };
  std::vector<double> gnorm(G);
  for (std::size_t g = 0; g < G; ++g) gnorm[g] = norm(output.global_states.data() + g * d);

  std::vector<std::size_t> pos;
  std::vector<double> score;
  for (std::size_t j = 0; j < output.passage_states.size(); ++j) {
    for (std::size_t i = 0; i < S; ++i) {
      if (!batch.context_masks[j][i]) continue;
      const T* h = output.passage_states[j].data() + i * d;
      const double hn = norm(h);
      double best = -1.0;
      for (std::size_t g = 0; g < G; ++g) {
        const T* gv = output.global_states.data() + g * d;
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += static_cast<double>(h[k]) * gv[k];
        const double denom = hn * gnorm[g];
        best = std::max(best, denom > 0.0 ? dot / denom : 0.0);
      }
      pos.push_back(j * S + i);
      score.push_back(best);
    }
  }
  std::vector<std::size_t> order(pos.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  for (auto o : order) {
    rep.ranking.push_back(pos[o]);
    rep.scores.push_back(score[o]);
  }
  if (rep.scores.empty()) return rep;
  rep.degenerate = std::all_of(rep.scores.begin(), rep.scores.end(), [&](double s) {
    return std::abs(s - rep.scores.front()) <= 1e-12;
  });

  const std::set<std::size_t> answers(answer_positions.begin(), answer_positions.end());
  rep.top1_is_answer = answers.count(rep.ranking.front()) > 0;

  auto token_id = [&](std::size_t p) { return batch.sequence_ids[p / S][p % S]; };
  std::set<std::size_t> top_ids;
  for (auto p : rep.ranking) {
    if (top_ids.size() == 10) break;
    top_ids.insert(token_id(p));
  }
  rep.top10_has_all_answers = !answers.empty();
  for (auto p : answers) rep.top10_has_all_answers &= top_ids.count(token_id(p)) > 0;
  return rep;
}

MassStats attention_mass_stats(const std::vector<AttentionRecord>& traces,
                               const TokenizedBatch& batch) {
  MassStats st;
  const std::size_t S = batch.seq_len, NS = batch.num_passages() * S;
  const std::size_t qlen = batch.query_ids.size();
  auto is_query = [&](std::size_t k) {
    if (k >= NS) return false;
    const std::size_t i = k % S;
    return i >= 1 && i <= qlen;
  };
  double gr = 0, qr = 0, gs = 0, qs = 0;
  for (const auto& rec : traces) {
    std::size_t n_valid = 0;
    for (auto v : rec.key_valid) n_valid += v ? 1 : 0;
    if (n_valid == 0) continue;
    for (std::size_t r = 0; r < rec.queries.size(); ++r) {
      double g_mass = 0.0, q_mass = 0.0;
      for (std::size_t c = 0; c < rec.keys.size(); ++c) {
        if (!rec.key_valid[c]) continue;
        const double w = rec.weights(r, c);
        if (rec.keys[c] >= NS) {
          gr += w * static_cast<double>(n_valid);
          ++st.global_samples;
          g_mass += w;
        } else if (is_query(rec.keys[c])) {
          qr += w * static_cast<double>(n_valid);
          ++st.query_samples;
          q_mass += w;
        }
      }
      gs += g_mass;
      qs += q_mass;
      ++st.rows;
    }
  }
  if (st.global_samples) st.global_ratio = gr / static_cast<double>(st.global_samples);
  if (st.query_samples) st.query_ratio = qr / static_cast<double>(st.query_samples);
  if (st.rows) {
    st.global_share = gs / static_cast<double>(st.rows);
    st.query_share = qs / static_cast<double>(st.rows);
  }
  return st;
}

void AnalysisAccumulator::add(const RolloutResult& rollout, const SimilarityReport& sim,
                              const MassStats& mass) {
  if (cross_sum_.size() < rollout.cross_passage_mass.size())
    cross_sum_.resize(rollout.cross_passage_mass.size(), 0.0);
  for (std::size_t i = 0; i < rollout.cross_passage_mass.size(); ++i)
    cross_sum_[i] += rollout.cross_passage_mass[i];
  ++examples_;
  if (sim.applicable) {
    ++sim_examples_;
    top1_ += sim.top1_is_answer ? 1 : 0;
    top10_ += sim.top10_has_all_answers ? 1 : 0;
  }
  if (mass.global_samples) {
    gr_ += mass.global_ratio;
    ++gr_n_;
  }
  if (mass.query_samples) {
    qr_ += mass.query_ratio;
    ++qr_n_;
  }
  gs_ += mass.global_share;
  qs_ += mass.query_share;
}

AnalysisReport AnalysisAccumulator::report() const {
  AnalysisReport r;
  r.examples = examples_;
  r.similarity_examples = sim_examples_;
  const double n = examples_ ? static_cast<double>(examples_) : 1.0;
  for (double v : cross_sum_) r.rollout_cross_passage_mass.push_back(v / n);
  if (sim_examples_) {
    r.top1_answer_fraction = static_cast<double>(top1_) / static_cast<double>(sim_examples_);
    r.top10_all_answers_fraction = static_cast<double>(top10_) / static_cast<double>(sim_examples_);
  }
  if (gr_n_) r.global_ratio = gr_ / static_cast<double>(gr_n_);
  if (qr_n_) r.query_ratio = qr_ / static_cast<double>(qr_n_);
  r.global_share = gs_ / n;
  r.query_share = qs_ / n;
  return r;
}

nlohmann::json AnalysisReport::to_json() const {
  nlohmann::json j;
  j["rollout_cross_passage_mass"] = rollout_cross_passage_mass;
  j["top1_answer_fraction"] = top1_answer_fraction;
  j["top10_all_answers_fraction"] = top10_all_answers_fraction;
  j["attention_ratios"] = {{"global", global_ratio}, {"query", query_ratio}};
  j["mass_shares"] = {{"global", global_share}, {"query", query_share}};
  j["examples"] = examples;
  j["similarity_examples"] = similarity_examples;
  j["notes"] = {
      "top-10 duplicates removed by token id",
      "toy model; large-scale pretrained results are not reproduced, only metric shapes"};
  return j;
}

template SimilarityReport global_token_similarity<float>(const EncoderOutput<float>&,
                                                         const TokenizedBatch&,
                                                         const std::vector<std::size_t>&);
template SimilarityReport global_token_similarity<double>(const EncoderOutput<double>&,
                                                          const TokenizedBatch&,
                                                          const std::vector<std::size_t>&);

}  // namespace fie
