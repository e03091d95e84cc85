#include "fie/encoder.hpp"

#include <cmath>

#include "fie/error.hpp"
#include "fie/ops.hpp"

namespace fie {

namespace {

struct ModeName {
  FusionMode mode;
  const char* name;
};

constexpr ModeName kModeNames[] = {
    {FusionMode::kNone, "none"},
    {FusionMode::kGlobalTokens, "global_tokens"},
    {FusionMode::kQueryAsGlobal, "query_as_global"},
    {FusionMode::kClsToCls, "cls_to_cls"},
    {FusionMode::kGlobalToClsOnly, "global_to_cls_only"},
    {FusionMode::kFullConcat, "full_concat"},
};

std::vector<std::size_t> iota_from(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> v(count);
  for (std::size_t i = 0; i < count; ++i) v[i] = begin + i;
  return v;
}

}  // namespace

std::string fusion_mode_name(FusionMode m) {
  for (const auto& e : kModeNames)
    if (e.mode == m) return e.name;
  return "unknown";
}

FusionMode parse_fusion_mode(const std::string& s) {
  for (const auto& e : kModeNames)
    if (s == e.name) return e.mode;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

const std::vector<FusionMode>& all_fusion_modes() {
  static const std::vector<FusionMode> modes = {
      FusionMode::kNone,     FusionMode::kGlobalTokens,    FusionMode::kQueryAsGlobal,
      FusionMode::kClsToCls, FusionMode::kGlobalToClsOnly, FusionMode::kFullConcat};
  return modes;
}

bool uses_global_tokens(FusionMode m) {
  return m == FusionMode::kGlobalTokens || m == FusionMode::kQueryAsGlobal ||
         m == FusionMode::kGlobalToClsOnly;
}

void FusionConfig::validate() const {
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (model_dim < 1 || num_heads < 1 || model_dim % num_heads != 0)
    throw ConfigError("model_dim must be a positive multiple of num_heads");
  if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
  if (num_passages < 1) throw ConfigError("num_passages must be >= 1");
  if (seq_len < 2) throw ConfigError("seq_len must be >= 2");
  if (max_answer_len < 1) throw ConfigError("max_answer_len must be >= 1");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

template <typename T>
EncoderOutput<T> ForwardResult<T>::output(std::size_t num_passages, std::size_t seq_len) const {
  EncoderOutput<T> out;
  const auto& all = state.passages.value();
  const std::size_t d = all.cols();
  for (std::size_t j = 0; j < num_passages; ++j) {
    Array<T> a({seq_len, d});
    std::copy_n(all.data() + j * seq_len * d, seq_len * d, a.data());
    out.passage_states.push_back(std::move(a));
  }
  out.global_states = state.globals.value();
  out.attention_traces = traces;
  return out;
}

template <typename T>
Encoder<T>::Encoder(const FusionConfig& config, std::size_t vocab_size, ParameterStore<T>& store,
                    std::mt19937_64& rng)
    : config_(config), vocab_size_(vocab_size) {
  config_.validate();
  const std::size_t d = config_.model_dim, f = config_.ffn_dim;
  const double sd = config_.init_std;
  token_embedding_ = &store.add("embeddings.token", random_normal<T>({vocab_size, d}, sd, rng));
  position_embedding_ =
      &store.add("embeddings.position", random_normal<T>({config_.seq_len, d}, sd, rng));
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams lp{};
    lp.wq = &store.add(p + "attention.query.weight", random_normal<T>({d, d}, sd, rng));
    lp.bq = &store.add(p + "attention.query.bias", Array<T>({d}));
    lp.wk = &store.add(p + "attention.key.weight", random_normal<T>({d, d}, sd, rng));
    lp.bk = &store.add(p + "attention.key.bias", Array<T>({d}));
    lp.wv = &store.add(p + "attention.value.weight", random_normal<T>({d, d}, sd, rng));
    lp.bv = &store.add(p + "attention.value.bias", Array<T>({d}));
    lp.wo = &store.add(p + "attention.output.weight", random_normal<T>({d, d}, sd, rng));
    lp.bo = &store.add(p + "attention.output.bias", Array<T>({d}));
    lp.ln1_g = &store.add(p + "attention.norm.gain", Array<T>({d}, T{1}));
    lp.ln1_b = &store.add(p + "attention.norm.bias", Array<T>({d}));
    lp.w1 = &store.add(p + "ffn.inner.weight", random_normal<T>({d, f}, sd, rng));
    lp.b1 = &store.add(p + "ffn.inner.bias", Array<T>({f}));
    lp.w2 = &store.add(p + "ffn.outer.weight", random_normal<T>({f, d}, sd, rng));
    lp.b2 = &store.add(p + "ffn.outer.bias", Array<T>({d}));
    lp.ln2_g = &store.add(p + "ffn.norm.gain", Array<T>({d}, T{1}));
    lp.ln2_b = &store.add(p + "ffn.norm.bias", Array<T>({d}));
    layers_.push_back(lp);
  }
}

template <typename T>
void Encoder<T>::check_layer(std::size_t layer) const {
  if (layer >= layers_.size()) {
    throw ContractError("layer index " + std::to_string(layer) + " out of range for " +
                        std::to_string(layers_.size()) + " layers");
  }
}

template <typename T>
void Encoder<T>::check_batch(const TokenizedBatch& batch) const {
  if (batch.num_passages() == 0) throw ContractError("batch has no passages");
  if (batch.seq_len != config_.seq_len) {
    throw ContractError("batch seq_len " + std::to_string(batch.seq_len) +
                        " differs from configured " + std::to_string(config_.seq_len));
  }
  const auto m = config_.fusion_mode;
  if ((m == FusionMode::kGlobalTokens || m == FusionMode::kGlobalToClsOnly) &&
      batch.num_global() != config_.num_global_tokens) {
    throw ContractError("batch carries " + std::to_string(batch.num_global()) +
                        " global slots, config expects " +
                        std::to_string(config_.num_global_tokens));
  }
  if (m == FusionMode::kQueryAsGlobal && config_.num_global_tokens > 0 &&
      batch.query_ids.empty() && batch.num_global() < config_.num_global_tokens)
    throw ContractError("query_as_global needs a query or reserved global slots");
}

template <typename T>
EncoderState<T> Encoder<T>::embed(Tape<T>& tape, const TokenizedBatch& batch) const {
  check_batch(batch);
  const std::size_t N = batch.num_passages(), S = batch.seq_len, d = config_.model_dim;
  std::vector<std::size_t> ids, positions;
  ids.reserve(N * S);
  positions.reserve(N * S);
  for (std::size_t j = 0; j < N; ++j) {
    for (std::size_t i = 0; i < S; ++i) {
      ids.push_back(batch.sequence_ids[j][i]);
      positions.push_back(i);
    }
  }
  auto tokens = ops::embedding_lookup(tape, *token_embedding_, ids);
  auto pos = ops::embedding_lookup(tape, *position_embedding_, positions);
  EncoderState<T> state;
  state.passages = ops::add(tokens, pos);

  const std::size_t G = config_.active_globals();
  if (G == 0) {
    state.globals = tape.constant(Array<T>({0, d}));
    return state;
  }
  std::vector<std::size_t> global_ids(G);
  for (std::size_t g = 0; g < G; ++g) {
    // empty query: fall back to the reserved slots
    global_ids[g] = config_.fusion_mode == FusionMode::kQueryAsGlobal && !batch.query_ids.empty()
                        ? batch.query_ids[g % batch.query_ids.size()]
                        : batch.global_slot_ids[g];
  }
  state.globals = ops::embedding_lookup(tape, *token_embedding_, global_ids);
  return state;
}

template <typename T>
Projections<T> Encoder<T>::project(Tape<T>& tape, std::size_t layer,
                                   const EncoderState<T>& state) const {
  check_layer(layer);
  const auto& lp = layers_[layer];
  const bool has_globals = state.globals.rows() > 0;
  const Var<T> x = has_globals ? ops::concat<T>({state.passages, state.globals}, 0) : state.passages;
  Projections<T> p;
  p.query = ops::linear(x, tape.parameter(*lp.wq), tape.parameter(*lp.bq));
  p.key = ops::linear(x, tape.parameter(*lp.wk), tape.parameter(*lp.bk));
  p.value = ops::linear(x, tape.parameter(*lp.wv), tape.parameter(*lp.bv));
  const std::size_t H = config_.num_heads, dh = config_.model_dim / H;
  for (std::size_t h = 0; h < H; ++h) {
    if (H == 1) {
      p.query_heads.push_back(p.query);
      p.key_heads.push_back(p.key);
      p.value_heads.push_back(p.value);
    } else {
      p.query_heads.push_back(ops::slice(p.query, 1, h * dh, (h + 1) * dh));
      p.key_heads.push_back(ops::slice(p.key, 1, h * dh, (h + 1) * dh));
      p.value_heads.push_back(ops::slice(p.value, 1, h * dh, (h + 1) * dh));
    }
  }
  return p;
}

template <typename T>
Var<T> Encoder<T>::attend(Tape<T>& tape, std::size_t layer, const std::vector<Var<T>>& q_heads,
                          const std::vector<Var<T>>& k_heads, const std::vector<Var<T>>& v_heads,
                          const std::vector<std::uint8_t>& key_valid,
                          const std::vector<std::size_t>& query_index,
                          const std::vector<std::size_t>& key_index, AttentionContext ctx,
                          bool global_group) const {
  const std::size_t rows = q_heads.front().rows(), cols = k_heads.front().rows();
  if (ctx.counter) {
    auto& slot = ctx.counter->layers.at(layer);
    (global_group ? slot.global_pairs : slot.passage_pairs) += rows * cols;
  }
  Mask mask({rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) mask(r, c) = key_valid[c];

  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q_heads.front().cols())));
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < q_heads.size(); ++h) {
    auto scores = ops::scale(ops::matmul(q_heads[h], ops::transpose(k_heads[h])), inv_sqrt);
    auto probs = ops::softmax(scores, 1, &mask);
    if (ctx.traces) {
      AttentionRecord rec;
      rec.layer = layer;
      rec.head = h;
      rec.queries = query_index;
      rec.keys = key_index;
      rec.key_valid = key_valid;
      rec.weights = probs.value().template cast<double>();
      ctx.traces->push_back(std::move(rec));
    }
    heads.push_back(ops::matmul(probs, v_heads[h]));
  }
  (void)tape;
  return heads.size() == 1 ? heads.front() : ops::concat(heads, 1);
}

template <typename T>
Var<T> Encoder<T>::output_residual_norm(Tape<T>& tape, std::size_t layer, const Var<T>& context,
                                        const Var<T>& residual) const {
  const auto& lp = layers_[layer];
  auto projected = ops::linear(context, tape.parameter(*lp.wo), tape.parameter(*lp.bo));
  return ops::layer_norm(ops::add(projected, residual), tape.parameter(*lp.ln1_g),
                         tape.parameter(*lp.ln1_b));
}

template <typename T>
Var<T> Encoder<T>::passage_attention(Tape<T>& tape, std::size_t layer,
                                     const EncoderState<T>& state, const Projections<T>& proj,
                                     const TokenizedBatch& batch, AttentionContext ctx) const {
  check_layer(layer);
  const std::size_t N = batch.num_passages(), S = batch.seq_len;
  const std::size_t G = state.globals.rows();
  const std::size_t H = config_.num_heads;
  const bool with_globals = G > 0 && uses_global_tokens(config_.fusion_mode);
  const bool cls_fusion = config_.fusion_mode == FusionMode::kClsToCls && N > 1;

  auto rows_of = [](const std::vector<Var<T>>& heads, std::size_t begin, std::size_t end) {
    std::vector<Var<T>> out;
    for (const auto& h : heads) out.push_back(ops::slice(h, 0, begin, end));
    return out;
  };

  std::vector<Var<T>> global_k, global_v;
  if (with_globals) {
    global_k = rows_of(proj.key_heads, N * S, N * S + G);
    global_v = rows_of(proj.value_heads, N * S, N * S + G);
  }

  std::vector<Var<T>> contexts;
  for (std::size_t j = 0; j < N; ++j) {
    auto q = rows_of(proj.query_heads, j * S, (j + 1) * S);
    auto k = rows_of(proj.key_heads, j * S, (j + 1) * S);
    auto v = rows_of(proj.value_heads, j * S, (j + 1) * S);
    std::vector<std::uint8_t> valid = batch.attention_masks[j];
    std::vector<std::size_t> key_index = iota_from(j * S, S);

    if (cls_fusion) {
      // CLS row: own passage keys plus every other passage's CLS.
      std::vector<std::size_t> other_cls;
      for (std::size_t i = 0; i < N; ++i)
        if (i != j) other_cls.push_back(i * S);
      std::vector<Var<T>> q0, k0, v0, q_rest, k_rest, v_rest;
      for (std::size_t h = 0; h < H; ++h) {
        q0.push_back(ops::slice(q[h], 0, 0, 1));
        k0.push_back(ops::concat<T>({k[h], ops::gather_rows(proj.key_heads[h], other_cls)}, 0));
        v0.push_back(ops::concat<T>({v[h], ops::gather_rows(proj.value_heads[h], other_cls)}, 0));
      }
      std::vector<std::uint8_t> valid0 = valid;
      valid0.insert(valid0.end(), other_cls.size(), 1);
      std::vector<std::size_t> key_index0 = key_index;
      key_index0.insert(key_index0.end(), other_cls.begin(), other_cls.end());
      auto head_row = attend(tape, layer, q0, k0, v0, valid0, {j * S}, key_index0, ctx, false);
      if (S == 1) {
        contexts.push_back(head_row);
        continue;
      }
      for (std::size_t h = 0; h < H; ++h) q_rest.push_back(ops::slice(q[h], 0, 1, S));
      auto rest = attend(tape, layer, q_rest, k, v, valid, iota_from(j * S + 1, S - 1), key_index,
                         ctx, false);
      contexts.push_back(ops::concat<T>({head_row, rest}, 0));
      continue;
    }

    if (with_globals) {
      for (std::size_t h = 0; h < H; ++h) {
        k[h] = ops::concat<T>({k[h], global_k[h]}, 0);
        v[h] = ops::concat<T>({v[h], global_v[h]}, 0);
      }
      valid.insert(valid.end(), G, 1);
      auto gidx = iota_from(N * S, G);
      key_index.insert(key_index.end(), gidx.begin(), gidx.end());
    }
    contexts.push_back(
        attend(tape, layer, q, k, v, valid, iota_from(j * S, S), key_index, ctx, false));
  }
  auto context = contexts.size() == 1 ? contexts.front() : ops::concat(contexts, 0);
  return output_residual_norm(tape, layer, context, state.passages);
}

template <typename T>
Var<T> Encoder<T>::global_attention(Tape<T>& tape, std::size_t layer,
                                    const EncoderState<T>& state, const Projections<T>& proj,
                                    const TokenizedBatch& batch, AttentionContext ctx) const {
  check_layer(layer);
  if (!uses_global_tokens(config_.fusion_mode)) {
    throw ModeError("global_attention is undefined in fusion mode " +
                    fusion_mode_name(config_.fusion_mode));
  }
  const std::size_t N = batch.num_passages(), S = batch.seq_len;
  const std::size_t G = state.globals.rows();
  if (G == 0) return state.globals;

  std::vector<std::size_t> key_rows;
  std::vector<std::uint8_t> valid;
  if (config_.fusion_mode == FusionMode::kGlobalToClsOnly) {
    for (std::size_t j = 0; j < N; ++j) {
      key_rows.push_back(j * S);
      valid.push_back(batch.attention_masks[j][0]);
    }
  } else {
    for (std::size_t j = 0; j < N; ++j) {
      for (std::size_t i = 0; i < S; ++i) {
        key_rows.push_back(j * S + i);
        valid.push_back(batch.attention_masks[j][i]);
      }
    }
  }
  for (std::size_t g = 0; g < G; ++g) {
    key_rows.push_back(N * S + g);
    valid.push_back(1);
  }
  const bool contiguous = key_rows.size() == N * S + G;
  std::vector<Var<T>> q, k, v;
  for (std::size_t h = 0; h < config_.num_heads; ++h) {
    q.push_back(ops::slice(proj.query_heads[h], 0, N * S, N * S + G));
    k.push_back(contiguous ? proj.key_heads[h] : ops::gather_rows(proj.key_heads[h], key_rows));
    v.push_back(contiguous ? proj.value_heads[h] : ops::gather_rows(proj.value_heads[h], key_rows));
  }
  auto context = attend(tape, layer, q, k, v, valid, iota_from(N * S, G), key_rows, ctx, true);
  return output_residual_norm(tape, layer, context, state.globals);
}

template <typename T>
Var<T> Encoder<T>::full_concat_attention(Tape<T>& tape, std::size_t layer,
                                         const EncoderState<T>& state, const Projections<T>& proj,
                                         const TokenizedBatch& batch, AttentionContext ctx) const {
  check_layer(layer);
  if (config_.fusion_mode != FusionMode::kFullConcat) {
    throw ModeError("full_concat_attention needs fusion mode full_concat, got " +
                    fusion_mode_name(config_.fusion_mode));
  }
  const std::size_t N = batch.num_passages(), S = batch.seq_len;
  std::vector<std::uint8_t> valid;
  for (std::size_t j = 0; j < N; ++j)
    valid.insert(valid.end(), batch.attention_masks[j].begin(), batch.attention_masks[j].end());
  std::vector<Var<T>> q, k, v;
  for (std::size_t h = 0; h < config_.num_heads; ++h) {
    q.push_back(ops::slice(proj.query_heads[h], 0, 0, N * S));
    k.push_back(ops::slice(proj.key_heads[h], 0, 0, N * S));
    v.push_back(ops::slice(proj.value_heads[h], 0, 0, N * S));
  }
  const auto index = iota_from(0, N * S);
  auto context = attend(tape, layer, q, k, v, valid, index, index, ctx, false);
  return output_residual_norm(tape, layer, context, state.passages);
}

template <typename T>
Var<T> Encoder<T>::feed_forward(Tape<T>& tape, std::size_t layer, const Var<T>& x) const {
  check_layer(layer);
  if (x.rows() == 0) return x;
  const auto& lp = layers_[layer];
  auto hidden = ops::gelu(ops::linear(x, tape.parameter(*lp.w1), tape.parameter(*lp.b1)));
  auto out = ops::linear(hidden, tape.parameter(*lp.w2), tape.parameter(*lp.b2));
  return ops::layer_norm(ops::add(out, x), tape.parameter(*lp.ln2_g), tape.parameter(*lp.ln2_b));
}

template <typename T>
ForwardResult<T> Encoder<T>::forward(Tape<T>& tape, const TokenizedBatch& batch,
                                     ForwardOptions options) const {
  ForwardResult<T> result;
  result.counter.reset(config_.num_layers);
  AttentionContext ctx{&result.counter, options.record_traces ? &result.traces : nullptr};

  EncoderState<T> state = embed(tape, batch);
  const bool globals_live = uses_global_tokens(config_.fusion_mode) && state.globals.rows() > 0;
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const auto proj = project(tape, l, state);
    const bool concat_layer =
        config_.fusion_mode == FusionMode::kFullConcat && l + 1 == config_.num_layers;
    EncoderState<T> next;
    next.passages = concat_layer ? full_concat_attention(tape, l, state, proj, batch, ctx)
                                 : passage_attention(tape, l, state, proj, batch, ctx);
    next.globals = globals_live ? global_attention(tape, l, state, proj, batch, ctx) : state.globals;
    next.passages = feed_forward(tape, l, next.passages);
    next.globals = feed_forward(tape, l, next.globals);
    if (!ops::all_finite(next.passages.value()) || !ops::all_finite(next.globals.value())) {
      throw NumericError("non-finite activations after encoder layer " + std::to_string(l));
    }
    state = next;
  }
  result.state = state;
  return result;
}

template struct ForwardResult<float>;
template struct ForwardResult<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace fie
