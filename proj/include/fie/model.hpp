#pragma once

#include <cstdint>
#include <random>

#include "fie/encoder.hpp"
#include "fie/span.hpp"

namespace fie {

// Encoder plus span head sharing one parameter store.
template <typename T>
class Reader {
 public:
  Reader(const FusionConfig& config, std::size_t vocab_size, std::uint64_t seed)
      : rng_(seed),
        encoder_(config, vocab_size, store_, rng_),
        head_(config.model_dim, config.init_std, store_, rng_) {}

  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  struct Scored {
    ForwardResult<T> forward;
    ScoredExample<T> scored;
  };

  Scored score(Tape<T>& tape, const TokenizedBatch& batch, ProbSpace variant,
               ForwardOptions options = {}) const {
    Scored out{encoder_.forward(tape, batch, options), {}};
    out.scored = score_example(tape, head_, out.forward.state.passages, batch,
                               encoder_.config().max_answer_len, variant);
    return out;
  }

  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const SpanHead<T>& head() const { return head_; }
  const FusionConfig& config() const { return encoder_.config(); }

 private:
  ParameterStore<T> store_;
  std::mt19937_64 rng_;
  Encoder<T> encoder_;
  SpanHead<T> head_;
};

}  // namespace fie
