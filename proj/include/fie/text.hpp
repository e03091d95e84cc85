#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace fie {

// Answer normalisation used both for EM scoring and for grouping spans into
// strings: lower-case, drop ASCII punctuation, collapse whitespace.
std::string normalize_answer(std::string_view text);

// Whitespace split; tokens keep their original characters.
std::vector<std::string> split_whitespace(std::string_view text);

// Lower-cased whitespace tokens.
std::vector<std::string> tokenize(std::string_view text);

std::string join(const std::vector<std::string>& tokens, std::size_t begin, std::size_t end,
                 std::string_view sep = " ");

// 1 if the normalised prediction equals any normalised gold answer.
int exact_match(std::string_view prediction, const std::vector<std::string>& gold);

// Mean exact match over aligned lists.
double evaluate_em(const std::vector<std::string>& predictions,
                   const std::vector<std::vector<std::string>>& gold);

// Token vocabulary. Ids 0..3 are PAD, UNK, CLS and SEP, followed by corpus
// words and finally the reserved global-token slots.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kCls = 2;
  static constexpr std::size_t kSep = 3;
  static constexpr std::size_t kNumSpecial = 4;

  Vocabulary() : Vocabulary(std::vector<std::string>{}, 0) {}
  Vocabulary(std::vector<std::string> words, std::size_t num_global);

  // Words seen at least `min_count` times, ordered by descending count then
  // lexicographically.
  static Vocabulary build(const std::vector<std::vector<std::string>>& documents,
                          std::size_t min_count, std::size_t num_global);

  std::size_t id(const std::string& token) const;
  const std::string& token(std::size_t id) const;
  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  std::size_t global_id(std::size_t slot) const;
  std::vector<std::size_t> global_ids() const;
  std::size_t num_global() const { return num_global_; }
  std::size_t num_words() const { return words_.size(); }
  std::size_t size() const { return kNumSpecial + words_.size() + num_global_; }

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::size_t num_global_ = 0;
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> names_;
};

}  // namespace fie
