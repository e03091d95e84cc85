#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fie/dataset.hpp"
#include "fie/text.hpp"

namespace fie {

// One question with N passages, laid out per passage as
//   [CLS] query [SEP] context [PAD]...
// where the context is `title [SEP] text` (or just `text` for untitled
// passages). Every sequence has exactly `seq_len` positions.
struct TokenizedBatch {
  std::size_t seq_len = 0;
  std::vector<std::size_t> query_ids;
  std::vector<std::string> query_tokens;
  std::vector<std::vector<std::size_t>> sequence_ids;       // N x seq_len
  std::vector<std::vector<std::string>> surface;            // N x seq_len, "" for specials/padding
  std::vector<std::vector<std::uint8_t>> attention_masks;   // N x seq_len, 0 = padding
  std::vector<std::vector<std::uint8_t>> context_masks;     // N x seq_len, 1 = answer-eligible
  std::vector<std::size_t> global_slot_ids;

  std::size_t num_passages() const { return sequence_ids.size(); }
  std::size_t num_global() const { return global_slot_ids.size(); }
  // First position of the context region.
  std::size_t context_offset() const { return query_ids.size() + 2; }

  // Passages built directly from ids; surface strings are the decimal ids.
  // Every context id is answer-eligible.
  static TokenizedBatch from_ids(const std::vector<std::size_t>& query,
                                 const std::vector<std::vector<std::size_t>>& contexts,
                                 std::size_t seq_len,
                                 const std::vector<std::size_t>& global_ids);

  TokenizedBatch permuted(const std::vector<std::size_t>& order) const;
};

struct TokenSpan {
  std::size_t passage = 0;
  std::size_t start = 0;
  std::size_t end = 0;  // inclusive
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct TokenizeOptions {
  std::size_t seq_len = 32;
  std::size_t num_passages = 0;   // 0 keeps every passage of the record
  std::size_t max_query_len = 0;  // 0 = as many as leave one context slot
};

// Builds the encoder input for one record. Passages longer than the budget
// keep their first tokens; missing passages (fewer than num_passages) are
// filled with empty, fully padded contexts.
TokenizedBatch make_batch(const DatasetRecord& record, const Vocabulary& vocab,
                          const TokenizeOptions& options);

// Occurrences of `answer` as a contiguous normalised token sequence inside
// answer-eligible positions: first match per passage plus all later
// non-overlapping repeats.
std::vector<TokenSpan> locate_answer(const TokenizedBatch& batch, const std::string& answer);

// True when at least one answer occurs in some passage with length <= max_len.
bool has_recall(const TokenizedBatch& batch, const std::vector<std::string>& answers,
                std::size_t max_len);

}  // namespace fie
