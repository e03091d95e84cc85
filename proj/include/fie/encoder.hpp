#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fie/autodiff.hpp"
#include "fie/batch.hpp"

namespace fie {

enum class FusionMode {
  kNone,             // independent passages
  kGlobalTokens,     // learned global tokens attend everywhere, everyone attends to them
  kQueryAsGlobal,    // as above, global slots initialised from query embeddings
  kClsToCls,         // each passage's CLS also attends to every other CLS
  kGlobalToClsOnly,  // global tokens only see the CLS states of the passages
  kFullConcat,       // last layer attends over the concatenation of all passages
};

std::string fusion_mode_name(FusionMode m);
FusionMode parse_fusion_mode(const std::string& s);
const std::vector<FusionMode>& all_fusion_modes();

// True for the modes that carry global-token state through the layers.
bool uses_global_tokens(FusionMode m);

struct FusionConfig {
  std::size_t num_layers = 2;
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t num_passages = 8;
  std::size_t seq_len = 32;
  std::size_t num_global_tokens = 4;
  FusionMode fusion_mode = FusionMode::kGlobalTokens;
  std::size_t max_answer_len = 15;
  double init_std = 0.02;

  void validate() const;
  // Number of global rows actually carried (0 for modes without globals).
  std::size_t active_globals() const {
    return uses_global_tokens(fusion_mode) ? num_global_tokens : 0;
  }
};

// Attention score entries computed per layer, split by query group.
struct PairCounter {
  struct Layer {
    std::uint64_t passage_pairs = 0;
    std::uint64_t global_pairs = 0;
  };
  std::vector<Layer> layers;

  void reset(std::size_t num_layers) { layers.assign(num_layers, Layer{}); }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& l : layers) t += l.passage_pairs + l.global_pairs;
    return t;
  }
};

// Attention weights of one head for one block of queries. Query and key
// indices live in the joint index space: passage j token i is j*S + i and
// global token g is N*S + g.
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<std::size_t> queries;
  std::vector<std::size_t> keys;
  std::vector<std::uint8_t> key_valid;
  Array<double> weights;  // queries x keys
};

template <typename T>
struct EncoderOutput {
  std::vector<Array<T>> passage_states;  // N arrays of S x d
  Array<T> global_states;                // G x d
  std::vector<AttentionRecord> attention_traces;
};

// Passage rows stacked passage-major into one (N*S) x d matrix, plus the
// global rows.
template <typename T>
struct EncoderState {
  Var<T> passages;
  Var<T> globals;
};

template <typename T>
struct Projections {
  Var<T> query, key, value;  // (N*S + G) x d each
  std::vector<Var<T>> query_heads, key_heads, value_heads;  // column slices per head
};

template <typename T>
struct ForwardResult {
  EncoderState<T> state;
  PairCounter counter;
  std::vector<AttentionRecord> traces;

  EncoderOutput<T> output(std::size_t num_passages, std::size_t seq_len) const;
};

struct ForwardOptions {
  bool record_traces = false;
};

// Bookkeeping shared by the attention ops of one forward pass.
struct AttentionContext {
  PairCounter* counter = nullptr;
  std::vector<AttentionRecord>* traces = nullptr;
};

template <typename T>
class Encoder {
 public:
  Encoder(const FusionConfig& config, std::size_t vocab_size, ParameterStore<T>& store,
          std::mt19937_64& rng);

  const FusionConfig& config() const { return config_; }
  std::size_t vocab_size() const { return vocab_size_; }

  // Layer-0 states: token + position embeddings for passages, dedicated
  // token embeddings (no position) for global slots.
  EncoderState<T> embed(Tape<T>& tape, const TokenizedBatch& batch) const;

  Projections<T> project(Tape<T>& tape, std::size_t layer, const EncoderState<T>& state) const;

  // Passage-token queries over own passage plus (mode permitting) global
  // keys; residual + layer norm. Returns (N*S) x d.
  Var<T> passage_attention(Tape<T>& tape, std::size_t layer, const EncoderState<T>& state,
                           const Projections<T>& proj, const TokenizedBatch& batch,
                           AttentionContext ctx) const;

  // Global-token queries over every unmasked passage token (or only the CLS
  // states) plus the global tokens; residual + layer norm. Returns G x d.
  Var<T> global_attention(Tape<T>& tape, std::size_t layer, const EncoderState<T>& state,
                          const Projections<T>& proj, const TokenizedBatch& batch,
                          AttentionContext ctx) const;

  // Every passage token attends over the concatenation of all passages.
  Var<T> full_concat_attention(Tape<T>& tape, std::size_t layer, const EncoderState<T>& state,
                               const Projections<T>& proj, const TokenizedBatch& batch,
                               AttentionContext ctx) const;

  Var<T> feed_forward(Tape<T>& tape, std::size_t layer, const Var<T>& x) const;

  ForwardResult<T> forward(Tape<T>& tape, const TokenizedBatch& batch,
                           ForwardOptions options = {}) const;

 private:
  struct LayerParams {
    Parameter<T>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    Parameter<T>*ln1_g, *ln1_b;
    Parameter<T>*w1, *b1, *w2, *b2;
    Parameter<T>*ln2_g, *ln2_b;
  };

  void check_layer(std::size_t layer) const;
  void check_batch(const TokenizedBatch& batch) const;

  // Multi-head attention of `q_rows` over `keys`. Returns the concatenated
  // head outputs before the output projection.
  Var<T> attend(Tape<T>& tape, std::size_t layer, const std::vector<Var<T>>& q_heads,
                const std::vector<Var<T>>& k_heads, const std::vector<Var<T>>& v_heads,
                const std::vector<std::uint8_t>& key_valid,
                const std::vector<std::size_t>& query_index,
                const std::vector<std::size_t>& key_index, AttentionContext ctx,
                bool global_group) const;

  Var<T> output_residual_norm(Tape<T>& tape, std::size_t layer, const Var<T>& context,
                              const Var<T>& residual) const;

  FusionConfig config_;
  std::size_t vocab_size_;
  Parameter<T>* token_embedding_;
  Parameter<T>* position_embedding_;
  std::vector<LayerParams> layers_;
};

}  // namespace fie
