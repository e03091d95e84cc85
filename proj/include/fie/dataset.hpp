#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fie {

struct Passage {
  std::string title;
  std::string text;
};

struct DatasetRecord {
  std::string question;
  std::vector<std::string> answers;
  std::vector<Passage> passages;
};

struct LoadOptions {
  bool require_answers = true;  // eval/train data must carry answers
  bool strict = false;          // abort on the first malformed line
};

struct LoadReport {
  std::vector<DatasetRecord> records;
  std::size_t skipped_lines = 0;
  std::size_t dropped_passages = 0;
  std::vector<std::string> warnings;  // "line N: reason"
};

// JSON Lines: {"question": str, "answers": [str], "passages": [{"title", "text"}]}.
LoadReport load_jsonl(const std::filesystem::path& path, const LoadOptions& options = {});

void write_jsonl(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);

struct SyntheticTaskSpec {
  std::size_t vocab_size = 200;
  std::size_t num_passages = 8;
  std::size_t passage_len = 24;
  std::size_t answer_len = 2;
  std::size_t num_plants = 3;
  std::size_t num_distractors = 3;
  bool requires_aggregation = true;
  std::size_t max_answer_len = 3;
  std::uint64_t seed = 1;
  std::size_t num_records = 100;

  void validate() const;
};

// Word used for synthetic token index i.
std::string synthetic_word(std::size_t i);

// Cross-passage QA records. Each question is "find <key>"; the gold answer is
// planted after the key token in `num_plants` distinct passages and each
// distractor string once in some other passage. With requires_aggregation
// every plant (gold or distractor) is preceded by the key, so the only thing
// separating the gold string is how often it occurs across passages. Without
// it, distractors are preceded by a different token instead.
std::vector<DatasetRecord> generate_synthetic(const SyntheticTaskSpec& spec);

// Non-overlapping occurrences of `needle` as a whole-token subsequence.
std::size_t count_occurrences(const std::vector<std::string>& haystack,
                              const std::vector<std::string>& needle);

}  // namespace fie
