#include "fie/text.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_map>

#include "fie/error.hpp"

namespace fie {

std::string normalize_answer(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::ispunct(c)) continue;
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  auto tokens = split_whitespace(text);
  for (auto& t : tokens)
    std::transform(t.begin(), t.end(), t.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return tokens;
}

std::string join(const std::vector<std::string>& tokens, std::size_t begin, std::size_t end,
                 std::string_view sep) {
  std::string out;
  for (std::size_t i = begin; i < end && i < tokens.size(); ++i) {
    if (i > begin) out.append(sep);
    out.append(tokens[i]);
  }
  return out;
}

int exact_match(std::string_view prediction, const std::vector<std::string>& gold) {
  const std::string p = normalize_answer(prediction);
  for (const auto& g : gold)
    if (normalize_answer(g) == p) return 1;
  return 0;
}

double evaluate_em(const std::vector<std::string>& predictions,
                   const std::vector<std::vector<std::string>>& gold) {
  if (predictions.size() != gold.size()) {
    throw ContractError("evaluate_em: " + std::to_string(predictions.size()) +
                        " predictions for " + std::to_string(gold.size()) + " gold lists");
  }
  if (predictions.empty()) return 0.0;
  double hits = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += exact_match(predictions[i], gold[i]);
  return hits / static_cast<double>(predictions.size());
}

Vocabulary::Vocabulary(std::vector<std::string> words, std::size_t num_global)
    : words_(std::move(words)), num_global_(num_global) {
  names_ = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  for (const auto& w : words_) {
    if (index_.count(w)) throw VocabularyError("duplicate vocabulary word '" + w + "'");
    index_[w] = names_.size();
    names_.push_back(w);
  }
  for (std::size_t g = 0; g < num_global_; ++g) names_.push_back("[G" + std::to_string(g) + "]");
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& documents,
                             std::size_t min_count, std::size_t num_global) {
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& doc : documents)
    for (const auto& t : doc) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [w, c] : counts)
    if (c >= min_count) kept.emplace_back(w, c);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto& [w, c] : kept) words.push_back(w);
  return Vocabulary(std::move(words), num_global);
}

std::size_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= names_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(names_.size()));
  }
  return names_[id];
}

std::size_t Vocabulary::global_id(std::size_t slot) const {
  if (slot >= num_global_) {
    throw VocabularyError("global slot " + std::to_string(slot) + " but only " +
                          std::to_string(num_global_) + " reserved");
  }
  return kNumSpecial + words_.size() + slot;
}

std::vector<std::size_t> Vocabulary::global_ids() const {
  std::vector<std::size_t> ids;
  for (std::size_t g = 0; g < num_global_; ++g) ids.push_back(global_id(g));
  return ids;
}

}  // namespace fie
