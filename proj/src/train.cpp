#include "fie/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "fie/checkpoint.hpp"
#include "fie/error.hpp"
#include "fie/model.hpp"
#include "fie/ops.hpp"
#include "fie/optim.hpp"

namespace fie {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Rejects keys the config does not know, so typos do not silently fall back.
void check_keys(const json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("unknown config field '" + where + "." + it.key() + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return seed * 0x9E3779B97F4A7C15ULL + epoch * 0xBF58476D1CE4E5B9ULL + 1;
}

// Example order: a fresh permutation per epoch, derived from the seed only,
// so a resumed run sees the same sequence.
class ExampleOrder {
 public:
  ExampleOrder(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}
  std::size_t at(std::size_t counter) {
    const std::size_t epoch = counter / n_;
    if (epoch != epoch_ || perm_.empty()) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      std::mt19937_64 rng(epoch_seed(seed_, epoch));
      std::shuffle(perm_.begin(), perm_.end(), rng);
      epoch_ = epoch;
    }
    return perm_[counter % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

template <typename T>
PredictionRecord predict_record(const Reader<T>& reader, const DatasetRecord& record,
                                const TokenizedBatch& batch, ProbSpace variant) {
  PredictionRecord p;
  p.question = record.question;
  try {
    Tape<T> tape(false);
    auto scored = reader.score(tape, batch, variant);
    const auto best = predict_answer(scored.scored.table);
    p.prediction = best.text;
    p.probability = best.probability;
  } catch (const DegenerateError&) {
    // no answer-eligible span: empty prediction
  }
  p.em = exact_match(p.prediction, record.answers);
  return p;
}

template <typename T>
std::vector<PredictionRecord> predict_all(const Reader<T>& reader,
                                          const std::vector<DatasetRecord>& records,
                                          const std::vector<TokenizedBatch>& batches,
                                          ProbSpace variant) {
  std::vector<PredictionRecord> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    out.push_back(predict_record(reader, records[i], batches[i], variant));
  return out;
}

double mean_em(const std::vector<PredictionRecord>& preds) {
  if (preds.empty()) return 0.0;
  double s = 0.0;
  for (const auto& p : preds) s += p.em;
  return s / static_cast<double>(preds.size());
}

std::vector<TokenizedBatch> tokenize_records(const std::vector<DatasetRecord>& records,
                                             const Vocabulary& vocab,
                                             const TokenizeOptions& options) {
  std::vector<TokenizedBatch> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(make_batch(r, vocab, options));
  return out;
}

std::vector<std::size_t> answer_positions(const TokenizedBatch& batch,
                                          const std::vector<std::string>& answers) {
  std::vector<std::size_t> pos;
  for (const auto& a : answers)
    for (const auto& s : locate_answer(batch, a))
      for (std::size_t i = s.start; i <= s.end; ++i) pos.push_back(s.passage * batch.seq_len + i);
  std::sort(pos.begin(), pos.end());
  pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
  return pos;
}

template <typename T>
AnalysisReport analyze_records(const Reader<T>& reader, const std::vector<DatasetRecord>& records,
                               const TokenizeOptions& topts, const Vocabulary& vocab,
                               std::size_t limit) {
  AnalysisAccumulator acc;
  const auto& cfg = reader.config();
  const std::size_t n = limit ? std::min(limit, records.size()) : records.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto batch = make_batch(records[i], vocab, topts);
    Tape<T> tape(false);
    auto fwd = reader.encoder().forward(tape, batch, {true});
    JointLayout layout{batch.num_passages(), batch.seq_len, cfg.active_globals(), cfg.num_layers,
                       cfg.num_heads};
    const auto joint = assemble_joint_attention(fwd.traces, layout);
    const auto rollout = attention_rollout(joint, batch.num_passages(), batch.seq_len);
    const auto out = fwd.output(batch.num_passages(), batch.seq_len);
    const auto sim = global_token_similarity(out, batch, answer_positions(batch, records[i].answers));
    const auto mass = attention_mass_stats(fwd.traces, batch);
    acc.add(rollout, sim, mass);
  }
  return acc.report();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  out.flush();
  if (!out) throw IoError("cannot write " + path.string());
}

template <typename T>
TrainResult train_impl(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  Corpus corpus = prepare_corpus(config);
  if (!options.resume_from.empty()) corpus.vocab = load_vocabulary(options.resume_from);
  if (corpus.train.empty()) throw DataError("no training records");
  const auto topts = tokenize_options(config);
  const auto train_batches = tokenize_records(corpus.train, corpus.vocab, topts);
  const auto dev_batches = tokenize_records(corpus.dev, corpus.vocab, topts);

  Reader<T> reader(config.model, corpus.vocab.size(), config.optim.seed);
  auto& store = reader.store();
  Adam<T> adam(store);
  std::size_t start = 0;
  if (!options.resume_from.empty()) {
    load_checkpoint(options.resume_from, store, &adam);
    start = static_cast<std::size_t>(read_checkpoint_meta(options.resume_from).step);
  }

  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    write_text(options.out_dir / "config.json", config.to_json().dump(2) + "\n");
  }

  const auto& opt = config.optim;
  const LinearSchedule schedule{opt.peak_rate, static_cast<std::int64_t>(std::max<std::size_t>(1, opt.steps)),
                                opt.warmup_fraction};
  const std::size_t per_update = opt.grad_accum * opt.batch_size;
  const T inv = static_cast<T>(1.0 / static_cast<double>(per_update));
  ExampleOrder order(train_batches.size(), opt.seed);
  const std::size_t interval = config.eval_interval();
  std::size_t end = opt.steps;
  if (options.stop_after > 0) end = std::min(end, options.stop_after);

  TrainResult result;
  double interval_loss = 0.0;
  std::size_t interval_n = 0;
  double lr = 0.0;

  auto emit = [&](std::size_t step) {
    MetricsRow row;
    row.step = step;
    if (interval_n) row.loss = interval_loss / static_cast<double>(interval_n);
    if (!options.skip_dev_eval && !dev_batches.empty()) {
      row.dev_em = mean_em(predict_all(reader, corpus.dev, dev_batches, config.prob.variant));
    }
    row.skipped = result.skipped;
    row.lr = lr;
    result.metrics.push_back(row);
    if (options.on_metrics) options.on_metrics(row);
    interval_loss = 0.0;
    interval_n = 0;
  };

  if (start >= end) emit(start);
  for (std::size_t u = start; u < end; ++u) {
    double loss_sum = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < per_update; ++k) {
      const std::size_t idx = order.at(u * per_update + k);
      const auto& batch = train_batches[idx];
      Tape<T> tape(true);
      ObjectiveValue<T> obj;
      try {
        auto scored = reader.score(tape, batch, config.prob.variant);
        obj = objective(tape, scored.scored, corpus.train[idx].answers, config.prob);
      } catch (const DegenerateError&) {
        obj.skipped = true;
      }
      if (obj.skipped) {
        ++result.skipped;
        continue;
      }
      const double v = static_cast<double>(obj.loss.value()[0]);
      if (!std::isfinite(v)) {
        throw NumericError("non-finite loss at update " + std::to_string(u + 1) +
                           " on training example " + std::to_string(idx) + " (\"" +
                           corpus.train[idx].question + "\")");
      }
      tape.backward(ops::scale(obj.loss, inv));
      loss_sum += v;
      ++used;
    }
    clip_global_norm(store, opt.clip_norm);
    lr = schedule.rate(static_cast<double>(u + 1));
    adam.step(lr);
    const double mean = used ? loss_sum / static_cast<double>(used)
                             : std::numeric_limits<double>::quiet_NaN();
    result.update_losses.push_back(mean);
    if (used) {
      interval_loss += mean;
      ++interval_n;
    }
    if ((u + 1) % interval == 0 || u + 1 == end) emit(u + 1);
  }
  result.steps_done = end;
  result.dev_em = result.metrics.empty() ? 0.0 : result.metrics.back().dev_em;

  if (!options.skip_dev_eval)
    result.predictions = predict_all(reader, corpus.dev, dev_batches, config.prob.variant);

  if (!options.out_dir.empty()) {
    std::ofstream metrics(options.out_dir / "metrics.csv", std::ios::trunc);
    write_metrics_csv(metrics, result.metrics);
    metrics.flush();
    if (!metrics) throw IoError("cannot write metrics.csv");
    save_checkpoint(options.out_dir / "checkpoint", store, &adam, corpus.vocab, config.to_json(),
                    static_cast<std::int64_t>(end));
    write_predictions(options.out_dir / "predictions.jsonl", result.predictions);
    if (!corpus.dev.empty()) {
      auto report = analyze_records(reader, corpus.dev, topts, corpus.vocab, 20);
      write_text(options.out_dir / "report.json", report.to_json().dump(2) + "\n");
    }
  }
  return result;
}

RunConfig config_from_checkpoint(const fs::path& checkpoint) {
  return RunConfig::from_json(read_checkpoint_meta(checkpoint).config);
}

template <typename T>
EvalResult evaluate_impl(const fs::path& checkpoint, const std::vector<DatasetRecord>& records) {
  const RunConfig config = config_from_checkpoint(checkpoint);
  const Vocabulary vocab = load_vocabulary(checkpoint);
  Reader<T> reader(config.model, vocab.size(), config.optim.seed);
  load_checkpoint<T>(checkpoint, reader.store(), nullptr);
  const auto batches = tokenize_records(records, vocab, tokenize_options(config));
  EvalResult r;
  r.predictions = predict_all(reader, records, batches, config.prob.variant);
  r.em = mean_em(r.predictions);
  return r;
}

template <typename T>
AnalysisReport analyze_impl(const fs::path& checkpoint, const std::vector<DatasetRecord>& records,
                            std::size_t limit) {
  const RunConfig config = config_from_checkpoint(checkpoint);
  const Vocabulary vocab = load_vocabulary(checkpoint);
  Reader<T> reader(config.model, vocab.size(), config.optim.seed);
  load_checkpoint<T>(checkpoint, reader.store(), nullptr);
  return analyze_records(reader, records, tokenize_options(config), vocab, limit);
}

json synthetic_to_json(const SyntheticTaskSpec& s) {
  return {{"vocab_size", s.vocab_size},
          {"num_passages", s.num_passages},
          {"passage_len", s.passage_len},
          {"answer_len", s.answer_len},
          {"num_plants", s.num_plants},
          {"num_distractors", s.num_distractors},
          {"requires_aggregation", s.requires_aggregation},
          {"max_answer_len", s.max_answer_len},
          {"seed", s.seed},
          {"num_records", s.num_records}};
}

SyntheticTaskSpec synthetic_from_json(const json& j) {
  check_keys(j,
             {"vocab_size", "num_passages", "passage_len", "answer_len", "num_plants",
              "num_distractors", "requires_aggregation", "max_answer_len", "seed", "num_records"},
             "data.synthetic");
  SyntheticTaskSpec s;
  read(j, "vocab_size", s.vocab_size);
  read(j, "num_passages", s.num_passages);
  read(j, "passage_len", s.passage_len);
  read(j, "answer_len", s.answer_len);
  read(j, "num_plants", s.num_plants);
  read(j, "num_distractors", s.num_distractors);
  read(j, "requires_aggregation", s.requires_aggregation);
  read(j, "max_answer_len", s.max_answer_len);
  read(j, "seed", s.seed);
  read(j, "num_records", s.num_records);
  return s;
}

}  // namespace

RunConfig::RunConfig() {
  model.num_passages = data.synthetic.num_passages;
  model.max_answer_len = data.synthetic.max_answer_len;
  // "find <key>" plus CLS and SEP, then the passage
  model.seq_len = data.synthetic.passage_len + 4;
}

void RunConfig::validate() const {
  model.validate();
  prob.validate();
  if (optim.steps > 0 && !(optim.peak_rate >= 0.0)) throw ConfigError("peak_rate must be >= 0");
  if (!(optim.warmup_fraction >= 0.0 && optim.warmup_fraction <= 1.0))
    throw ConfigError("warmup_fraction must lie in [0, 1]");
  if (optim.grad_accum < 1) throw ConfigError("grad_accum must be >= 1");
  if (optim.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(optim.clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (data.train.empty()) data.synthetic.validate();
}

std::size_t RunConfig::eval_interval() const {
  if (optim.eval_interval > 0) return optim.eval_interval;
  return std::max<std::size_t>(1, optim.steps / 20);
}

json RunConfig::to_json() const {
  json j;
  j["model"] = {{"num_layers", model.num_layers},
                {"model_dim", model.model_dim},
                {"num_heads", model.num_heads},
                {"ffn_dim", model.ffn_dim},
                {"num_passages", model.num_passages},
                {"seq_len", model.seq_len},
                {"num_global_tokens", model.num_global_tokens},
                {"fusion_mode", fusion_mode_name(model.fusion_mode)},
                {"max_answer_len", model.max_answer_len},
                {"init_std", model.init_std}};
  j["prob"] = {{"variant", prob_space_name(prob.variant)},
               {"objective", objective_name(prob.objective)},
               {"hardem_weight", prob.hardem_weight}};
  j["optim"] = {{"steps", optim.steps},
                {"peak_rate", optim.peak_rate},
                {"warmup_fraction", optim.warmup_fraction},
                {"grad_accum", optim.grad_accum},
                {"batch_size", optim.batch_size},
                {"clip_norm", optim.clip_norm},
                {"seed", optim.seed},
                {"precision", precision_name(optim.precision)},
                {"eval_interval", optim.eval_interval}};
  j["data"] = {{"train", data.train},
               {"dev", data.dev},
               {"dev_records", data.dev_records},
               {"max_query_len", data.max_query_len},
               {"synthetic", synthetic_to_json(data.synthetic)}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  check_keys(j, {"model", "prob", "optim", "data"}, "config");
  RunConfig c;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"train", "dev", "dev_records", "max_query_len", "synthetic"}, "data");
    read(d, "train", c.data.train);
    read(d, "dev", c.data.dev);
    read(d, "dev_records", c.data.dev_records);
    read(d, "max_query_len", c.data.max_query_len);
    if (d.contains("synthetic")) {
      c.data.synthetic = synthetic_from_json(d.at("synthetic"));
      c.model.num_passages = c.data.synthetic.num_passages;
      c.model.max_answer_len = c.data.synthetic.max_answer_len;
      c.model.seq_len = c.data.synthetic.passage_len + 4;
    }
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m,
               {"num_layers", "model_dim", "num_heads", "ffn_dim", "num_passages", "seq_len",
                "num_global_tokens", "fusion_mode", "max_answer_len", "init_std"},
               "model");
    read(m, "num_layers", c.model.num_layers);
    read(m, "model_dim", c.model.model_dim);
    read(m, "num_heads", c.model.num_heads);
    read(m, "ffn_dim", c.model.ffn_dim);
    read(m, "num_passages", c.model.num_passages);
    read(m, "seq_len", c.model.seq_len);
    read(m, "num_global_tokens", c.model.num_global_tokens);
    read(m, "max_answer_len", c.model.max_answer_len);
    read(m, "init_std", c.model.init_std);
    if (m.contains("fusion_mode"))
      c.model.fusion_mode = parse_fusion_mode(m.at("fusion_mode").get<std::string>());
  }
  if (j.contains("prob")) {
    const auto& p = j.at("prob");
    check_keys(p, {"variant", "objective", "hardem_weight"}, "prob");
    if (p.contains("variant")) c.prob.variant = parse_prob_space(p.at("variant").get<std::string>());
    if (p.contains("objective"))
      c.prob.objective = parse_objective(p.at("objective").get<std::string>());
    read(p, "hardem_weight", c.prob.hardem_weight);
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    check_keys(o,
               {"steps", "peak_rate", "warmup_fraction", "grad_accum", "batch_size", "clip_norm",
                "seed", "precision", "eval_interval"},
               "optim");
    read(o, "steps", c.optim.steps);
    read(o, "peak_rate", c.optim.peak_rate);
    read(o, "warmup_fraction", c.optim.warmup_fraction);
    read(o, "grad_accum", c.optim.grad_accum);
    read(o, "batch_size", c.optim.batch_size);
    read(o, "clip_norm", c.optim.clip_norm);
    read(o, "seed", c.optim.seed);
    read(o, "eval_interval", c.optim.eval_interval);
    if (o.contains("precision"))
      c.optim.precision = parse_precision(o.at("precision").get<std::string>());
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

TokenizeOptions tokenize_options(const RunConfig& config) {
  TokenizeOptions t;
  t.seq_len = config.model.seq_len;
  t.num_passages = config.model.num_passages;
  t.max_query_len = config.data.max_query_len;
  return t;
}

Corpus prepare_corpus(const RunConfig& config) {
  Corpus c;
  if (config.data.train.empty()) {
    c.train = generate_synthetic(config.data.synthetic);
    auto dev_spec = config.data.synthetic;
    dev_spec.seed = config.data.synthetic.seed + 1000003;
    dev_spec.num_records = config.data.dev_records;
    if (dev_spec.num_records > 0) c.dev = generate_synthetic(dev_spec);
  } else {
    auto tr = load_jsonl(config.data.train);
    c.train = std::move(tr.records);
    c.warnings = tr.warnings;
    if (!config.data.dev.empty()) {
      auto dv = load_jsonl(config.data.dev);
      c.dev = std::move(dv.records);
      c.warnings.insert(c.warnings.end(), dv.warnings.begin(), dv.warnings.end());
    }
  }
  std::vector<std::vector<std::string>> docs;
  for (const auto& r : c.train) {
    docs.push_back(tokenize(r.question));
    for (const auto& p : r.passages) {
      auto t = tokenize(p.title);
      auto x = tokenize(p.text);
      t.insert(t.end(), x.begin(), x.end());
      docs.push_back(std::move(t));
    }
  }
  c.vocab = Vocabulary::build(docs, 2, config.model.num_global_tokens);
  return c;
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "step,loss,dev_em,skipped,lr\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.step << ',';
    if (r.loss) out << *r.loss;
    out << ',' << r.dev_em << ',' << r.skipped << ',' << r.lr << '\n';
  }
}

void write_predictions(const fs::path& path, const std::vector<PredictionRecord>& predictions) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& p : predictions) {
    out << json{{"question", p.question},
                {"prediction", p.prediction},
                {"probability", p.probability},
                {"em", p.em}}
               .dump()
        << '\n';
  }
  out.flush();
  if (!out) throw IoError("write to " + path.string() + " failed");
}

TrainResult train(const RunConfig& config, const TrainOptions& options) {
  if (config.optim.precision == Precision::kFloat32) return train_impl<float>(config, options);
  return train_impl<double>(config, options);
}

EvalResult evaluate_checkpoint(const fs::path& checkpoint,
                               const std::vector<DatasetRecord>& records) {
  if (read_checkpoint_meta(checkpoint).precision == Precision::kFloat32)
    return evaluate_impl<float>(checkpoint, records);
  return evaluate_impl<double>(checkpoint, records);
}

AnalysisReport analyze_checkpoint(const fs::path& checkpoint,
                                  const std::vector<DatasetRecord>& records, std::size_t limit) {
  if (read_checkpoint_meta(checkpoint).precision == Precision::kFloat32)
    return analyze_impl<float>(checkpoint, records, limit);
  return analyze_impl<double>(checkpoint, records, limit);
}

std::string sweep_axis_name(SweepAxis a) {
  return a == SweepAxis::kNumGlobalTokens ? "num_global_tokens" : "num_passages";
}

SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "num_global_tokens") return SweepAxis::kNumGlobalTokens;
  if (s == "num_passages") return SweepAxis::kNumPassages;
  throw ConfigError("unknown sweep axis '" + s + "' (num_global_tokens, num_passages)");
}

std::vector<SweepRow> sweep(const RunConfig& config, SweepAxis axis,
                            const std::vector<std::size_t>& values, const fs::path& out_dir) {
  std::vector<SweepRow> rows;
  for (auto v : values) {
    SweepRow row;
    row.value = v;
    try {
      RunConfig c = config;
      if (axis == SweepAxis::kNumGlobalTokens)
        c.model.num_global_tokens = v;
      else
        c.model.num_passages = v;
      TrainOptions opts;
      if (!out_dir.empty()) opts.out_dir = out_dir / (sweep_axis_name(axis) + "_" + std::to_string(v));
      row.em = train(c, opts).dev_em;
    } catch (const Error& e) {
      row.error = e.what();
    }
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, SweepAxis axis, const std::vector<SweepRow>& rows) {
  out << "axis,value,em,error\n" << std::setprecision(10);
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << sweep_axis_name(axis) << ',' << r.value << ',' << r.em << ',' << err << '\n';
  }
}

std::vector<SweepRow> read_sweep_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "axis,value,em,error")
    throw DataError("sweep CSV header missing");
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() == 3) cells.emplace_back();
    if (cells.size() != 4) throw DataError("malformed sweep row: " + line);
    SweepRow r;
    r.value = std::stoull(cells[1]);
    r.em = std::stod(cells[2]);
    r.error = cells[3];
    rows.push_back(r);
  }
  return rows;
}

}  // namespace fie
