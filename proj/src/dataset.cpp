#include "fie/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

#include "fie/error.hpp"
#include "fie/text.hpp"

namespace fie {

namespace {

using nlohmann::json;

DatasetRecord parse_record(const json& j, const LoadOptions& options, std::size_t& dropped,
                           std::vector<std::string>& notes) {
  if (!j.is_object()) throw DataError("not a JSON object");
  if (!j.contains("question") || !j["question"].is_string())
    throw DataError("missing string field 'question'");
  DatasetRecord r;
  r.question = j["question"].get<std::string>();
  if (tokenize(r.question).empty()) throw DataError("empty question");
  if (j.contains("answers")) {
    if (!j["answers"].is_array()) throw DataError("'answers' is not an array");
    for (const auto& a : j["answers"]) {
      if (!a.is_string()) throw DataError("non-string answer");
      r.answers.push_back(a.get<std::string>());
    }
  }
  if (options.require_answers && r.answers.empty()) throw DataError("missing 'answers'");
  if (!j.contains("passages") || !j["passages"].is_array())
    throw DataError("missing array field 'passages'");
  for (const auto& p : j["passages"]) {
    if (!p.is_object() || !p.contains("text") || !p["text"].is_string())
      throw DataError("passage without string 'text'");
    Passage passage;
    passage.text = p["text"].get<std::string>();
    if (p.contains("title") && p["title"].is_string()) passage.title = p["title"].get<std::string>();
    if (tokenize(passage.title).empty() && tokenize(passage.text).empty()) {
      ++dropped;
      notes.push_back("dropped empty passage");
      continue;
    }
    r.passages.push_back(std::move(passage));
  }
  if (r.passages.empty()) throw DataError("no non-empty passages");
  return r;
}

}  // namespace

LoadReport load_jsonl(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset '" + path.string() + "'");
  LoadReport report;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      std::vector<std::string> notes;
      auto j = json::parse(line);
      report.records.push_back(parse_record(j, options, report.dropped_passages, notes));
      for (auto& n : notes) report.warnings.push_back("line " + std::to_string(line_no) + ": " + n);
    } catch (const std::exception& e) {
      const std::string msg = "line " + std::to_string(line_no) + ": " + e.what();
      if (options.strict) throw DataError(path.string() + " " + msg);
      report.warnings.push_back(msg);
      ++report.skipped_lines;
    }
  }
  if (report.records.empty()) {
    throw DataError("no valid records in '" + path.string() + "' (" +
                    std::to_string(report.skipped_lines) + " malformed lines)");
  }
  return report;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (const auto& r : records) {
    json j;
    j["question"] = r.question;
    j["answers"] = r.answers;
    j["passages"] = json::array();
    for (const auto& p : r.passages) j["passages"].push_back({{"title", p.title}, {"text", p.text}});
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void SyntheticTaskSpec::validate() const {
  if (num_plants < 1) throw ConfigError("synthetic task needs at least one gold plant");
  if (requires_aggregation && num_plants < 2)
    throw ConfigError("requires_aggregation needs more than one gold plant");
  if (answer_len < 1 || answer_len > max_answer_len)
    throw ConfigError("answer_len must be in [1, max_answer_len]");
  if (num_plants + num_distractors > num_passages)
    throw ConfigError("plants exceed capacity: " + std::to_string(num_plants) + " gold + " +
                      std::to_string(num_distractors) + " distractors over " +
                      std::to_string(num_passages) + " passages");
  if (passage_len < answer_len + 1)
    throw ConfigError("passage_len too short to hold a keyed plant");
  // key, marker, answer and distractor words all need to be distinct-ish
  if (vocab_size < answer_len * (num_distractors + 1) + 4)
    throw ConfigError("vocab_size too small for the requested plants");
}

std::string synthetic_word(std::size_t i) { return "w" + std::to_string(i); }

std::size_t count_occurrences(const std::vector<std::string>& haystack,
                              const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i + needle.size() <= haystack.size();) {
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + static_cast<long>(i))) {
      ++count;
      i += needle.size();
    } else {
      ++i;
    }
  }
  return count;
}

std::vector<DatasetRecord> generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::vector<DatasetRecord> out;
  out.reserve(spec.num_records);

  auto pick = [&](std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  };

  for (std::size_t r = 0; r < spec.num_records; ++r) {
    const std::size_t key = pick(spec.vocab_size);
    std::size_t marker = key;
    while (marker == key) marker = pick(spec.vocab_size);

    auto random_string = [&](std::size_t len) {
      std::vector<std::size_t> s(len);
      for (auto& w : s) {
        do w = pick(spec.vocab_size);
        while (w == key || w == marker);
      }
      return s;
    };

    const auto answer = random_string(spec.answer_len);
    std::vector<std::vector<std::size_t>> distractors;
    while (distractors.size() < spec.num_distractors) {
      auto d = random_string(spec.answer_len);
      if (d == answer || std::find(distractors.begin(), distractors.end(), d) != distractors.end())
        continue;
      distractors.push_back(std::move(d));
    }

    std::vector<std::size_t> order(spec.num_passages);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    auto words = [](const std::vector<std::size_t>& ids) {
      std::vector<std::string> w;
      for (auto i : ids) w.push_back(synthetic_word(i));
      return w;
    };
    const auto answer_words = words(answer);

    std::vector<std::vector<std::size_t>> passages;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw ConfigError("could not place plants without collisions");
      passages.assign(spec.num_passages, {});
      for (auto& p : passages) p = random_string(spec.passage_len);
      auto plant = [&](std::size_t passage, std::size_t lead,
                       const std::vector<std::size_t>& value) {
        auto& p = passages[passage];
        const std::size_t pos = pick(spec.passage_len - value.size());
        p[pos] = lead;
        std::copy(value.begin(), value.end(), p.begin() + static_cast<long>(pos + 1));
      };
      for (std::size_t i = 0; i < spec.num_plants; ++i) plant(order[i], key, answer);
      for (std::size_t i = 0; i < spec.num_distractors; ++i)
        plant(order[spec.num_plants + i], spec.requires_aggregation ? key : marker, distractors[i]);

      // Accept only layouts where filler never recreates a planted string.
      std::size_t gold = 0;
      std::vector<std::size_t> distractor_counts(distractors.size(), 0);
      for (const auto& p : passages) {
        const auto pw = words(p);
        gold += count_occurrences(pw, answer_words);
        for (std::size_t d = 0; d < distractors.size(); ++d)
          distractor_counts[d] += count_occurrences(pw, words(distractors[d]));
      }
      const bool ok = gold == spec.num_plants &&
                      std::all_of(distractor_counts.begin(), distractor_counts.end(),
                                  [](std::size_t c) { return c == 1; });
      if (ok) break;
    }

    DatasetRecord rec;
    rec.question = "find " + synthetic_word(key);
    rec.answers = {join(answer_words, 0, answer_words.size())};
    for (const auto& p : passages) {
      const auto pw = words(p);
      rec.passages.push_back({"", join(pw, 0, pw.size())});
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace fie
