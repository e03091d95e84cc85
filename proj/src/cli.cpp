#include "fie/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "fie/checkpoint.hpp"
#include "fie/complexity.hpp"
#include "fie/error.hpp"
#include "fie/train.hpp"

namespace fie {

namespace {

namespace fs = std::filesystem;

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// "did you mean" for unknown flags of the active subcommand.
std::string suggest(const CLI::App& app, int argc, const char* const* argv) {
  const CLI::App* scope = &app;
  const auto subs = app.get_subcommands();
  if (!subs.empty()) scope = subs.front();
  std::vector<std::string> names;
  for (const auto* opt : scope->get_options())
    for (const auto& n : opt->get_lnames()) names.push_back(n);
  std::ostringstream msg;
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg.rfind("--", 0) != 0) continue;
    arg = arg.substr(2, arg.find('=') == std::string::npos ? std::string::npos : arg.find('=') - 2);
    if (std::find(names.begin(), names.end(), arg) != names.end()) continue;
    std::string best;
    std::size_t best_d = 3;
    for (const auto& n : names) {
      const auto d = edit_distance(arg, n);
      if (d < best_d) {
        best_d = d;
        best = n;
      }
    }
    if (!best.empty()) msg << "unknown flag --" << arg << ", did you mean --" << best << "?\n";
  }
  return msg.str();
}

std::vector<std::size_t> parse_values(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (cell.empty()) continue;
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(cell, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != cell.size()) throw CLI::ValidationError("--values", "not an integer: " + cell);
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw CLI::ValidationError("--values", "needs at least one value");
  return out;
}

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string precision;
  std::string out;
};

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (!c.precision.empty()) cfg.optim.precision = parse_precision(c.precision);
  return cfg;
}

std::vector<DatasetRecord> load_records(const std::string& path, std::ostream& err) {
  auto rep = load_jsonl(path);
  for (const auto& w : rep.warnings) err << "warning: " << w << "\n";
  return rep.records;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fusion-in-encoder reader: data, training, evaluation, benchmarks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "0.1.0");

  Common common;
  auto add_common = [&](CLI::App* sub, bool with_out_required) {
    sub->add_option("--config", common.config, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "random seed");
    sub->add_option("--precision", common.precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    auto* o = sub->add_option("--out", common.out, "output directory");
    if (with_out_required) o->required();
  };

  auto* gen = app.add_subcommand("gen-data", "write synthetic train.jsonl and dev.jsonl");
  add_common(gen, true);
  std::size_t records = 0;
  gen->add_option("--records", records, "training records (default from config)");

  auto* train_cmd = app.add_subcommand("train", "train a reader, writing a run directory");
  add_common(train_cmd, true);
  std::string data, dev, checkpoint, resume;
  std::size_t steps = 0;
  train_cmd->add_option("--data", data, "training JSONL (default: synthetic task)");
  train_cmd->add_option("--dev", dev, "dev JSONL");
  train_cmd->add_option("--steps", steps, "override optimizer steps");
  train_cmd->add_option("--resume", resume, "checkpoint directory to continue from");

  auto* eval_cmd = app.add_subcommand("eval", "exact match of a checkpoint on a JSONL file");
  add_common(eval_cmd, false);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--data", data, "JSONL records")->required();

  auto* bench_cmd = app.add_subcommand("bench", "attention pair counts and forward timings");
  add_common(bench_cmd, true);
  std::string grid = "small";
  std::size_t repeats = 5;
  bench_cmd->add_option("--grid", grid, "small or verify")->check(CLI::IsMember({"small", "verify"}));
  bench_cmd->add_option("--repeats", repeats, "timed runs per point (median reported)");

  auto* analyze_cmd = app.add_subcommand("analyze", "rollout and global-token analyses");
  add_common(analyze_cmd, true);
  std::size_t limit = 50;
  analyze_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  analyze_cmd->add_option("--data", data, "JSONL records (default: synthetic dev set)");
  analyze_cmd->add_option("--limit", limit, "examples to analyze (0 = all)");

  auto* sweep_cmd = app.add_subcommand("sweep", "train/evaluate per value of one axis");
  add_common(sweep_cmd, true);
  std::string axis = "num_global_tokens", values = "0,4";
  sweep_cmd->add_option("--axis", axis, "num_global_tokens or num_passages")
      ->check(CLI::IsMember({"num_global_tokens", "num_passages"}));
  sweep_cmd->add_option("--values", values, "comma separated values");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();  // delegates to the selected subcommand
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion& e) {
    out << e.what() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << suggest(app, argc, argv);
    err << "run with --help for usage\n";
    return 1;
  }

  for (auto* sub : {gen, train_cmd, eval_cmd, bench_cmd, analyze_cmd, sweep_cmd}) {
    if (auto* o = sub->get_option_no_throw("--seed"); o && o->count() > 0) common.seed_set = true;
  }

  try {
    if (gen->parsed()) {
      RunConfig cfg = load_config(common);
      if (common.seed_set) cfg.data.synthetic.seed = common.seed;
      if (records) cfg.data.synthetic.num_records = records;
      const Corpus corpus = prepare_corpus(cfg);
      fs::create_directories(common.out);
      write_jsonl(fs::path(common.out) / "train.jsonl", corpus.train);
      write_jsonl(fs::path(common.out) / "dev.jsonl", corpus.dev);
      out << "wrote " << corpus.train.size() << " train and " << corpus.dev.size()
          << " dev records to " << common.out << "\n";
    } else if (train_cmd->parsed()) {
      RunConfig cfg = load_config(common);
      if (common.seed_set) cfg.optim.seed = common.seed;
      if (!data.empty()) cfg.data.train = data;
      if (!dev.empty()) cfg.data.dev = dev;
      if (train_cmd->get_option("--steps")->count()) cfg.optim.steps = steps;
      TrainOptions opts;
      opts.out_dir = common.out;
      opts.resume_from = resume;
      opts.on_metrics = [&](const MetricsRow& r) {
        out << "step " << r.step;
        if (r.loss) out << " loss " << std::fixed << std::setprecision(4) << *r.loss;
        out << " dev_em " << std::fixed << std::setprecision(4) << r.dev_em << " skipped "
            << r.skipped << std::defaultfloat << "\n";
      };
      const auto res = train(cfg, opts);
      out << "final dev EM " << std::fixed << std::setprecision(4) << res.dev_em << "\n";
    } else if (eval_cmd->parsed()) {
      const auto recs = load_records(data, err);
      const auto res = evaluate_checkpoint(checkpoint, recs);
      const fs::path dir = common.out.empty() ? fs::path(checkpoint).parent_path() : fs::path(common.out);
      if (!dir.empty()) fs::create_directories(dir);
      write_predictions(dir / "predictions.jsonl", res.predictions);
      out << "EM " << std::fixed << std::setprecision(4) << res.em << "\n";
    } else if (bench_cmd->parsed()) {
      fs::create_directories(common.out);
      if (grid == "verify") {
        VerifyGrid g;
        if (common.seed_set) g.seed = common.seed;
        const auto rep = verify_counts(g);
        out << rep.checks.size() - rep.failures() << "/" << rep.checks.size()
            << " counter checks match the closed forms\n"
            << rep.describe_failures();
        if (!rep.passed()) return 2;
      } else {
        BenchGrid g = BenchGrid::small();
        g.repeats = repeats;
        if (common.seed_set) g.seed = common.seed;
        if (!common.precision.empty()) g.precision = parse_precision(common.precision);
        const auto rep = bench_forward(g);
        std::ofstream csv(fs::path(common.out) / "complexity.csv");
        rep.write_csv(csv);
        if (!csv) throw IoError("cannot write complexity.csv");
        rep.write_csv(out);
      }
    } else if (analyze_cmd->parsed()) {
      std::vector<DatasetRecord> recs;
      if (!data.empty()) {
        recs = load_records(data, err);
      } else {
        const auto meta = read_checkpoint_meta(checkpoint);
        recs = prepare_corpus(RunConfig::from_json(meta.config)).dev;
      }
      const auto rep = analyze_checkpoint(checkpoint, recs, limit);
      fs::create_directories(common.out);
      std::ofstream f(fs::path(common.out) / "report.json");
      f << rep.to_json().dump(2) << "\n";
      if (!f) throw IoError("cannot write report.json");
      out << rep.to_json().dump(2) << "\n";
    } else if (sweep_cmd->parsed()) {
      RunConfig cfg = load_config(common);
      if (common.seed_set) cfg.optim.seed = common.seed;
      const auto ax = parse_sweep_axis(axis);
      const auto rows = sweep(cfg, ax, parse_values(values), common.out);
      fs::create_directories(common.out);
      std::ofstream csv(fs::path(common.out) / "sweep.csv");
      write_sweep_csv(csv, ax, rows);
      write_sweep_csv(out, ax, rows);
    }
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace fie
