#include "fie/batch.hpp"

#include <algorithm>

#include "fie/error.hpp"

namespace fie {

namespace {

void append_passage(TokenizedBatch& b, const std::vector<std::size_t>& ctx_ids,
                    const std::vector<std::string>& ctx_surface,
                    const std::vector<std::uint8_t>& ctx_eligible) {
  const std::size_t S = b.seq_len;
  std::vector<std::size_t> ids(S, Vocabulary::kPad);
  std::vector<std::string> surface(S);
  std::vector<std::uint8_t> attn(S, 0), ctx(S, 0);
  std::size_t pos = 0;
  ids[pos] = Vocabulary::kCls;
  attn[pos++] = 1;
  for (std::size_t i = 0; i < b.query_ids.size(); ++i) {
    ids[pos] = b.query_ids[i];
    surface[pos] = b.query_tokens[i];
    attn[pos++] = 1;
  }
  ids[pos] = Vocabulary::kSep;
  attn[pos++] = 1;
  for (std::size_t i = 0; i < ctx_ids.size() && pos < S; ++i, ++pos) {
    ids[pos] = ctx_ids[i];
    surface[pos] = ctx_surface[i];
    attn[pos] = 1;
    ctx[pos] = ctx_eligible[i];
  }
  b.sequence_ids.push_back(std::move(ids));
  b.surface.push_back(std::move(surface));
  b.attention_masks.push_back(std::move(attn));
  b.context_masks.push_back(std::move(ctx));
}

}  // namespace

TokenizedBatch TokenizedBatch::from_ids(const std::vector<std::size_t>& query,
                                        const std::vector<std::vector<std::size_t>>& contexts,
                                        std::size_t seq_len,
                                        const std::vector<std::size_t>& global_ids) {
  if (query.size() + 2 >= seq_len + 1) throw ConfigError("query does not fit in seq_len");
  TokenizedBatch b;
  b.seq_len = seq_len;
  b.query_ids = query;
  for (auto id : query) b.query_tokens.push_back(std::to_string(id));
  b.global_slot_ids = global_ids;
  for (const auto& c : contexts) {
    std::vector<std::string> surface;
    for (auto id : c) surface.push_back(std::to_string(id));
    append_passage(b, c, surface, std::vector<std::uint8_t>(c.size(), 1));
  }
  return b;
}

TokenizedBatch TokenizedBatch::permuted(const std::vector<std::size_t>& order) const {
  if (order.size() != num_passages()) throw ContractError("permutation size mismatch");
  TokenizedBatch b = *this;
  for (std::size_t j = 0; j < order.size(); ++j) {
    b.sequence_ids[j] = sequence_ids.at(order[j]);
    b.surface[j] = surface.at(order[j]);
    b.attention_masks[j] = attention_masks.at(order[j]);
    b.context_masks[j] = context_masks.at(order[j]);
  }
  return b;
}

TokenizedBatch make_batch(const DatasetRecord& record, const Vocabulary& vocab,
                          const TokenizeOptions& options) {
  const std::size_t S = options.seq_len;
  if (S < 4) throw ConfigError("seq_len must leave room for CLS, query, SEP and context");
  TokenizedBatch b;
  b.seq_len = S;
  b.global_slot_ids = vocab.global_ids();

  auto query = tokenize(record.question);
  std::size_t max_q = S - 3;
  if (options.max_query_len > 0) max_q = std::min(max_q, options.max_query_len);
  if (query.size() > max_q) query.resize(max_q);
  b.query_tokens = query;
  for (const auto& t : query) b.query_ids.push_back(vocab.id(t));

  const std::size_t n = options.num_passages == 0 ? record.passages.size() : options.num_passages;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<std::size_t> ids;
    std::vector<std::string> surface;
    std::vector<std::uint8_t> eligible;
    if (j < record.passages.size()) {
      const auto& p = record.passages[j];
      const auto title = tokenize(p.title);
      const auto text = tokenize(p.text);
      for (const auto& t : title) {
        ids.push_back(vocab.id(t));
        surface.push_back(t);
        eligible.push_back(1);
      }
      if (!title.empty()) {
        ids.push_back(Vocabulary::kSep);
        surface.emplace_back();
        eligible.push_back(0);
      }
      for (const auto& t : text) {
        ids.push_back(vocab.id(t));
        surface.push_back(t);
        eligible.push_back(1);
      }
    }
    append_passage(b, ids, surface, eligible);
  }
  return b;
}

std::vector<TokenSpan> locate_answer(const TokenizedBatch& batch, const std::string& answer) {
  std::vector<std::string> needle;
  for (const auto& w : split_whitespace(normalize_answer(answer))) needle.push_back(w);
  std::vector<TokenSpan> found;
  if (needle.empty()) return found;
  for (std::size_t j = 0; j < batch.num_passages(); ++j) {
    const auto& surf = batch.surface[j];
    const auto& ctx = batch.context_masks[j];
    const std::size_t S = surf.size();
    std::size_t i = 0;
    while (i + needle.size() <= S) {
      bool match = true;
      for (std::size_t k = 0; k < needle.size() && match; ++k) {
        match = ctx[i + k] && normalize_answer(surf[i + k]) == needle[k];
      }
      if (match) {
        found.push_back({j, i, i + needle.size() - 1});
        i += needle.size();
      } else {
        ++i;
      }
    }
  }
  return found;
}

bool has_recall(const TokenizedBatch& batch, const std::vector<std::string>& answers,
                std::size_t max_len) {
  for (const auto& a : answers)
    for (const auto& s : locate_answer(batch, a))
      if (s.end - s.start + 1 <= max_len) return true;
  return false;
}

}  // namespace fie
