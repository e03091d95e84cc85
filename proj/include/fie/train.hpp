#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fie/analysis.hpp"
#include "fie/array.hpp"
#include "fie/batch.hpp"
#include "fie/dataset.hpp"
#include "fie/encoder.hpp"
#include "fie/span.hpp"
#include "fie/text.hpp"

namespace fie {

struct OptimSettings {
  std::size_t steps = 300;
  double peak_rate = 1e-3;
  double warmup_fraction = 0.1;
  std::size_t grad_accum = 1;
  std::size_t batch_size = 1;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  Precision precision = Precision::kFloat64;
  std::size_t eval_interval = 0;  // 0: max(1, steps / 20)
};

struct DataSettings {
  std::string train;  // JSONL paths; empty train -> synthetic task
  std::string dev;
  SyntheticTaskSpec synthetic;
  std::size_t dev_records = 100;
  std::size_t max_query_len = 0;
};

struct RunConfig {
  FusionConfig model;
  ProbSpaceConfig prob;
  OptimSettings optim;
  DataSettings data;

  RunConfig();
  void validate() const;
  std::size_t eval_interval() const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);  // missing fields keep defaults
  static RunConfig load(const std::filesystem::path& path);
};

struct Corpus {
  Vocabulary vocab;
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> dev;
  std::vector<std::string> warnings;
};

// Loads or generates train/dev records and builds the vocabulary from train.
Corpus prepare_corpus(const RunConfig& config);

TokenizeOptions tokenize_options(const RunConfig& config);

struct MetricsRow {
  std::size_t step = 0;
  std::optional<double> loss;  // mean update loss since the previous row
  double dev_em = 0.0;
  std::size_t skipped = 0;
  double lr = 0.0;
};

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);

struct PredictionRecord {
  std::string question;
  std::string prediction;
  double probability = 0.0;
  int em = 0;
};

void write_predictions(const std::filesystem::path& path,
                       const std::vector<PredictionRecord>& predictions);

struct TrainOptions {
  std::filesystem::path out_dir;      // empty: write nothing
  std::filesystem::path resume_from;  // checkpoint directory
  std::size_t stop_after = 0;         // stop (and checkpoint) after this many updates
  bool skip_dev_eval = false;
  std::function<void(const MetricsRow&)> on_metrics;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::vector<double> update_losses;  // one per update, NaN when all examples skipped
  double dev_em = 0.0;
  std::size_t skipped = 0;
  std::size_t steps_done = 0;
  std::vector<PredictionRecord> predictions;
};

// Run directory: config.json, metrics.csv, checkpoint/, predictions.jsonl.
TrainResult train(const RunConfig& config, const TrainOptions& options = {});

struct EvalResult {
  double em = 0.0;
  std::vector<PredictionRecord> predictions;
};

EvalResult evaluate_checkpoint(const std::filesystem::path& checkpoint,
                               const std::vector<DatasetRecord>& records);

// Rollout, similarity and attention-mass analysis over records.
AnalysisReport analyze_checkpoint(const std::filesystem::path& checkpoint,
                                  const std::vector<DatasetRecord>& records, std::size_t limit);

enum class SweepAxis { kNumGlobalTokens, kNumPassages };
std::string sweep_axis_name(SweepAxis a);
SweepAxis parse_sweep_axis(const std::string& s);

struct SweepRow {
  std::size_t value = 0;
  double em = 0.0;
  std::string error;  // failed points keep going
};

std::vector<SweepRow> sweep(const RunConfig& config, SweepAxis axis,
                            const std::vector<std::size_t>& values,
                            const std::filesystem::path& out_dir = {});

void write_sweep_csv(std::ostream& out, SweepAxis axis, const std::vector<SweepRow>& rows);
std::vector<SweepRow> read_sweep_csv(std::istream& in);

}  // namespace fie
