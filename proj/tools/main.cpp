// Command-line front end. One binary with subcommands covering the whole
// workflow: generate a synthetic dataset, pretrain or train a model, run the
// random-acquisition and full-information baselines, score checkpoints on the
// cost-accuracy plane, reduce measurements to a Pareto frontier, and narrate
// single episodes as trace files.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "cwcf/checkpoint.hpp"
#include "cwcf/dataset.hpp"
#include "cwcf/evaluation.hpp"
#include "cwcf/model.hpp"
#include "cwcf/schema.hpp"
#include "cwcf/training.hpp"

namespace fs = std::filesystem;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  if (!in.good() && !in.eof()) throw std::runtime_error("cannot read " + path);
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  out << line << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// --- shared flag groups ------------------------------------------------------

// Every subcommand that consumes a dataset reads a schema file and a samples
// file. The files carry no split assignment, so the split is a reproducible
// function of two more flags: --splits gives the train/val/test sample
// counts (default: an 80/10/10 carve of the file) and --split-seed drives
// the shuffle.
struct DataFlags {
  std::string schema_path;
  std::string data_path;
  std::vector<int> splits;
  uint64_t split_seed = 0;
};

void add_data_flags(CLI::App* cmd, DataFlags* flags) {
  cmd->add_option("--schema", flags->schema_path, "schema JSON file")
      ->required();
  cmd->add_option("--data", flags->data_path, "samples JSONL file")
      ->required();
  cmd->add_option("--splits", flags->splits,
                  "train,val,test sample counts (default: 80/10/10)")
      ->delimiter(',')
      ->expected(3);
  cmd->add_option("--split-seed", flags->split_seed,
                  "shuffle seed for the split");
}

cwcf::Dataset load_split_dataset(const DataFlags& flags,
                                 std::shared_ptr<const cwcf::Schema>* schema_out) {
  auto schema = std::make_shared<const cwcf::Schema>(
      cwcf::parse_schema(read_text(flags.schema_path)));
  cwcf::Dataset ds = cwcf::load_dataset(schema, read_text(flags.data_path));
  const int n = static_cast<int>(ds.samples.size());
  int n_train, n_val, n_test;
  if (!flags.splits.empty()) {
    n_train = flags.splits[0];
    n_val = flags.splits[1];
    n_test = flags.splits[2];
  } else {
    n_val = n / 10;
    n_test = n / 10;
    n_train = n - n_val - n_test;
  }
  cwcf::split_dataset(ds, n_train, n_val, n_test, flags.split_seed);
  if (schema_out) *schema_out = schema;
  return ds;
}

// Training-style subcommands take an optional config file; --lambda and
// --seed given on the command line override the file.
struct ConfigFlags {
  std::string config_path;
  double lambda = 0.0;
  uint64_t seed = 0;
  CLI::Option* lambda_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
};

void add_config_flags(CLI::App* cmd, ConfigFlags* flags, bool with_lambda) {
  cmd->add_option("--config", flags->config_path,
                  "training config JSON file (defaults apply when omitted)");
  if (with_lambda) {
    flags->lambda_opt = cmd->add_option(
        "--lambda", flags->lambda, "cost weight in the reward (overrides config)");
  }
  flags->seed_opt =
      cmd->add_option("--seed", flags->seed, "training seed (overrides config)");
}

cwcf::TrainConfig resolve_config(const ConfigFlags& flags) {
  cwcf::TrainConfig cfg;
  if (!flags.config_path.empty())
    cfg = cwcf::parse_train_config(read_text(flags.config_path));
  if (flags.lambda_opt && flags.lambda_opt->count()) cfg.lambda = flags.lambda;
  if (flags.seed_opt && flags.seed_opt->count()) cfg.seed = flags.seed;
  cfg.validate();
  return cfg;
}

std::string metrics_line(const cwcf::ValidationPoint& vp) {
  std::string line = cwcf::metrics_to_jsonl({vp});
  if (!line.empty() && line.back() == '\n') line.pop_back();
  return line;
}

// --- gen-synthetic -----------------------------------------------------------

struct GenFlags {
  std::string out_dir;
  cwcf::SynthConfig cfg;
  uint64_t seed = 0;
};

int run_gen_synthetic(const GenFlags& flags) {
  if (flags.cfg.classes < 2) throw std::runtime_error("--classes must be >= 2");
  if (flags.cfg.samples < 1) throw std::runtime_error("--samples must be >= 1");
  if (flags.cfg.items_min < 1 || flags.cfg.items_max < flags.cfg.items_min)
    throw std::runtime_error("need 1 <= --items-min <= --items-max");
  if (flags.cfg.distractors < 0)
    throw std::runtime_error("--distractors must be >= 0");
  auto [schema, ds] = cwcf::generate_synthetic(flags.cfg, flags.seed);
  fs::create_directories(flags.out_dir);
  write_text(fs::path(flags.out_dir) / "schema.json",
             cwcf::serialize_schema(*schema));
  write_text(fs::path(flags.out_dir) / "samples.jsonl",
             cwcf::serialize_samples(ds));
  std::cout << "wrote " << ds.samples.size() << " samples, "
            << schema->class_count() << " classes -> " << flags.out_dir
            << "/{schema.json,samples.jsonl}\n";
  return 0;
}

// --- pretrain ----------------------------------------------------------------

struct PretrainFlags {
  DataFlags data;
  ConfigFlags config;
  std::string out_dir;
};

int run_pretrain(const PretrainFlags& flags) {
  cwcf::TrainConfig cfg = resolve_config(flags.config);
  cwcf::Dataset ds = load_split_dataset(flags.data, nullptr);
  cwcf::ModelParams params =
      cwcf::init_model(ds.schema, ds.norm, cfg.seed, cfg.embed_dim);
  cwcf::ClassifierTrainResult res =
      cwcf::pretrain_classifier(ds, std::move(params), cfg);
  fs::path out(flags.out_dir);
  fs::create_directories(out);
  write_text(out / "config.json", cwcf::serialize_train_config(cfg));
  cwcf::save_model((out / "pretrained.ckpt").string(), res.params);
  for (size_t e = 0; e < res.val_ce.size(); ++e)
    std::cout << "epoch " << e << " val_ce " << res.val_ce[e] << '\n';
  std::cout << "best epoch " << res.best_epoch << " -> " << flags.out_dir
            << "/pretrained.ckpt\n";
  return 0;
}

// --- train -------------------------------------------------------------------

struct TrainFlags {
  DataFlags data;
  ConfigFlags config;
  std::string out_dir;
  std::string init_path;
};

int run_train(const TrainFlags& flags) {
  cwcf::TrainConfig cfg = resolve_config(flags.config);
  std::shared_ptr<const cwcf::Schema> schema;
  cwcf::Dataset ds = load_split_dataset(flags.data, &schema);
  if (ds.train.empty() || ds.val.empty())
    throw std::runtime_error("training needs non-empty train and val splits");

  cwcf::ModelParams params;
  if (!flags.init_path.empty()) {
    params = cwcf::load_model(flags.init_path, schema);
    cfg.embed_dim = params.embed_dim;
  } else {
    params = cwcf::init_model(schema, ds.norm, cfg.seed, cfg.embed_dim);
    if (cfg.pretrain_epochs > 0) {
      cwcf::ClassifierTrainResult pre =
          cwcf::pretrain_classifier(ds, std::move(params), cfg);
      std::cout << "pretraining: best epoch " << pre.best_epoch << ", val_ce "
                << pre.val_ce[pre.best_epoch] << '\n';
      params = std::move(pre.params);
    }
  }

  fs::path out(flags.out_dir);
  fs::create_directories(out);
  write_text(out / "config.json", cwcf::serialize_train_config(cfg));
  const fs::path metrics_path = out / "metrics.jsonl";
  write_text(metrics_path, "");

  auto on_validation = [&](const cwcf::ValidationPoint& vp,
                           const cwcf::ModelParams& snapshot) {
    const std::string line = metrics_line(vp);
    append_line(metrics_path, line);
    cwcf::ModelParams copy = snapshot;
    cwcf::save_model(
        (out / ("checkpoint_" + std::to_string(vp.step) + ".ckpt")).string(),
        copy);
    std::cout << line << '\n';
  };

  cwcf::TrainedModel tm =
      cwcf::train(ds, std::move(params), cfg, on_validation);
  cwcf::save_model((out / "best.ckpt").string(), tm.params);
  std::cout << "best validation at step " << tm.metrics[tm.best_index].step
            << " (val_reward " << tm.metrics[tm.best_index].val_reward
            << "), max post-clip gradient norm " << tm.max_postclip_norm
            << " -> " << flags.out_dir << "/best.ckpt\n";
  return 0;
}

// --- evaluate ----------------------------------------------------------------

struct EvaluateFlags {
  DataFlags data;
  std::string checkpoint;
  std::string split = "test";
  std::string mode = "greedy";
  std::string out_path;
  double lambda = 0.0;
  uint64_t seed = 0;
};

int run_evaluate(const EvaluateFlags& flags) {
  std::shared_ptr<const cwcf::Schema> schema;
  cwcf::Dataset ds = load_split_dataset(flags.data, &schema);
  cwcf::ModelParams params = cwcf::load_model(flags.checkpoint, schema);
  const cwcf::EvalMode mode = flags.mode == "greedy" ? cwcf::EvalMode::Greedy
                                                     : cwcf::EvalMode::Sampled;
  cwcf::EvalPoint point =
      cwcf::evaluate(params, ds, flags.split, flags.lambda, mode, flags.seed);
  const std::string line = cwcf::evalpoint_to_json(point);
  std::cout << line << '\n';
  if (!flags.out_path.empty()) append_line(flags.out_path, line);
  return 0;
}

// --- baseline-rs / baseline-hmil ----------------------------------------------

struct BaselineFlags {
  DataFlags data;
  ConfigFlags config;
  std::string out_dir;
  std::string split = "test";
  double budget = 0.0;  // baseline-rs only
};

int run_baseline_rs(const BaselineFlags& flags) {
  cwcf::TrainConfig cfg = resolve_config(flags.config);
  cwcf::Dataset ds = load_split_dataset(flags.data, nullptr);
  cwcf::RSPolicy policy = cwcf::train_rs_baseline(ds, flags.budget, cfg);
  cwcf::EvalPoint point = cwcf::evaluate_random_budget(
      policy, ds, flags.split, cfg.lambda, cfg.seed);
  fs::path out(flags.out_dir);
  fs::create_directories(out);
  cwcf::save_model((out / "rs.ckpt").string(), policy.params);
  const std::string line = cwcf::evalpoint_to_json(point);
  append_line(out / "metrics.jsonl", line);
  std::cout << line << '\n';
  return 0;
}

int run_baseline_hmil(const BaselineFlags& flags) {
  cwcf::TrainConfig cfg = resolve_config(flags.config);
  cwcf::Dataset ds = load_split_dataset(flags.data, nullptr);
  cwcf::ClassifierTrainResult res = cwcf::train_hmil_full(ds, cfg);
  // An unbounded budget buys every feature, so the budget-walk evaluator
  // degenerates to full information: accuracy is the classifier ceiling and
  // avg_cost the mean total information cost.
  cwcf::RSPolicy full{std::numeric_limits<double>::infinity(),
                      std::move(res.params)};
  cwcf::EvalPoint point = cwcf::evaluate_random_budget(
      full, ds, flags.split, cfg.lambda, cfg.seed);
  fs::path out(flags.out_dir);
  fs::create_directories(out);
  cwcf::save_model((out / "hmil.ckpt").string(), full.params);
  const std::string line = cwcf::evalpoint_to_json(point);
  append_line(out / "metrics.jsonl", line);
  std::cout << line << '\n';
  return 0;
}

// --- pareto ------------------------------------------------------------------

struct ParetoFlags {
  std::string in_path;
  std::string out_path;
};

int run_pareto(const ParetoFlags& flags) {
  std::vector<cwcf::EvalPoint> points =
      cwcf::evalpoints_from_jsonl(read_text(flags.in_path));
  cwcf::FrontierSet frontier = cwcf::pareto_frontier(points);
  write_text(flags.out_path, cwcf::frontier_to_json(frontier));
  std::cout << "kept " << frontier.points.size() << " of " << points.size()
            << " points -> " << flags.out_path << '\n';
  return 0;
}

// --- trace -------------------------------------------------------------------

struct TraceFlags {
  std::string checkpoint;
  std::string schema_path;
  std::string data_path;
  std::string out_path;
  std::string mode = "greedy";
  int sample_index = 0;
  uint64_t seed = 0;
};

int run_trace(const TraceFlags& flags) {
  auto schema = std::make_shared<const cwcf::Schema>(
      cwcf::parse_schema(read_text(flags.schema_path)));
  // The index addresses the samples file directly (file order), so traces
  // do not depend on any split.
  cwcf::Dataset ds = cwcf::load_dataset(schema, read_text(flags.data_path));
  if (flags.sample_index < 0 ||
      flags.sample_index >= static_cast<int>(ds.samples.size()))
    throw std::runtime_error("--sample-index out of range (file has " +
                             std::to_string(ds.samples.size()) + " samples)");
  cwcf::ModelParams params = cwcf::load_model(flags.checkpoint, schema);
  const cwcf::EvalMode mode = flags.mode == "greedy" ? cwcf::EvalMode::Greedy
                                                     : cwcf::EvalMode::Sampled;
  const cwcf::Sample& sample = ds.samples[flags.sample_index];
  cwcf::Trace trace = cwcf::export_trace(params, sample, mode, flags.seed);
  write_text(flags.out_path, cwcf::trace_to_json(trace, *schema));
  const bool replay_ok = cwcf::verify_trace_replay(trace, params, sample);
  std::cout << trace.steps.size() << " steps, prediction "
            << params.schema->class_names[trace.prediction] << ", label "
            << params.schema->class_names[trace.label] << ", replay "
            << (replay_ok ? "ok" : "MISMATCH") << " -> " << flags.out_path
            << '\n';
  return replay_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Classification of tree-structured samples with costly feature "
      "acquisition"};
  app.require_subcommand(1);

  int rc = 0;

  GenFlags gen;
  CLI::App* gen_cmd = app.add_subcommand(
      "gen-synthetic", "generate the synthetic items/signal dataset");
  gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_option("--classes", gen.cfg.classes, "number of classes");
  gen_cmd->add_option("--samples", gen.cfg.samples, "number of samples");
  gen_cmd->add_option("--items-min", gen.cfg.items_min, "minimum items per sample");
  gen_cmd->add_option("--items-max", gen.cfg.items_max, "maximum items per sample");
  gen_cmd->add_option("--distractors", gen.cfg.distractors,
                      "text distractors per item");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->callback([&] { rc = run_gen_synthetic(gen); });

  PretrainFlags pre;
  CLI::App* pre_cmd = app.add_subcommand(
      "pretrain", "pretrain the classifier on randomly masked samples");
  add_data_flags(pre_cmd, &pre.data);
  add_config_flags(pre_cmd, &pre.config, /*with_lambda=*/false);
  pre_cmd->add_option("--out", pre.out_dir, "output directory")->required();
  pre_cmd->callback([&] { rc = run_pretrain(pre); });

  TrainFlags train;
  CLI::App* train_cmd = app.add_subcommand(
      "train", "train the acquisition policy (pretrains first by default)");
  add_data_flags(train_cmd, &train.data);
  add_config_flags(train_cmd, &train.config, /*with_lambda=*/true);
  train_cmd->add_option("--out", train.out_dir, "output directory")->required();
  train_cmd->add_option("--init", train.init_path,
                        "start from this checkpoint instead of pretraining");
  train_cmd->callback([&] { rc = run_train(train); });

  EvaluateFlags eval;
  CLI::App* eval_cmd = app.add_subcommand(
      "evaluate", "score a checkpoint on the cost-accuracy plane");
  add_data_flags(eval_cmd, &eval.data);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "model checkpoint")
      ->required();
  eval_cmd->add_option("--split", eval.split, "split to score")
      ->check(CLI::IsMember({"test", "val"}));
  eval_cmd->add_option("--mode", eval.mode, "action selection")
      ->check(CLI::IsMember({"greedy", "sampled"}));
  eval_cmd->add_option("--lambda", eval.lambda, "cost weight in the reward");
  eval_cmd->add_option("--seed", eval.seed, "sampling seed (sampled mode)");
  eval_cmd->add_option("--out", eval.out_path,
                       "metrics JSONL file to append the measurement to");
  eval_cmd->callback([&] { rc = run_evaluate(eval); });

  BaselineFlags rs;
  CLI::App* rs_cmd = app.add_subcommand(
      "baseline-rs",
      "random-acquisition baseline: train and score at a budget");
  add_data_flags(rs_cmd, &rs.data);
  add_config_flags(rs_cmd, &rs.config, /*with_lambda=*/true);
  rs_cmd->add_option("--budget", rs.budget, "acquisition budget per sample")
      ->required()
      ->check(CLI::NonNegativeNumber);
  rs_cmd->add_option("--split", rs.split, "split to score")
      ->check(CLI::IsMember({"test", "val"}));
  rs_cmd->add_option("--out", rs.out_dir, "output directory")->required();
  rs_cmd->callback([&] { rc = run_baseline_rs(rs); });

  BaselineFlags hmil;
  CLI::App* hmil_cmd = app.add_subcommand(
      "baseline-hmil", "full-information classifier baseline");
  add_data_flags(hmil_cmd, &hmil.data);
  add_config_flags(hmil_cmd, &hmil.config, /*with_lambda=*/true);
  hmil_cmd->add_option("--split", hmil.split, "split to score")
      ->check(CLI::IsMember({"test", "val"}));
  hmil_cmd->add_option("--out", hmil.out_dir, "output directory")->required();
  hmil_cmd->callback([&] { rc = run_baseline_hmil(hmil); });

  ParetoFlags pareto;
  CLI::App* pareto_cmd = app.add_subcommand(
      "pareto", "reduce a metrics JSONL file to its Pareto frontier");
  pareto_cmd->add_option("--in", pareto.in_path, "metrics JSONL file")
      ->required();
  pareto_cmd->add_option("--out", pareto.out_path, "frontier JSON file")
      ->required();
  pareto_cmd->callback([&] { rc = run_pareto(pareto); });

  TraceFlags trace;
  CLI::App* trace_cmd = app.add_subcommand(
      "trace", "narrate one episode as a step-by-step JSON document");
  trace_cmd->add_option("--checkpoint", trace.checkpoint, "model checkpoint")
      ->required();
  trace_cmd->add_option("--schema", trace.schema_path, "schema JSON file")
      ->required();
  trace_cmd->add_option("--data", trace.data_path, "samples JSONL file")
      ->required();
  trace_cmd->add_option("--sample-index", trace.sample_index,
                        "sample position in the data file")
      ->required();
  trace_cmd->add_option("--mode", trace.mode, "action selection")
      ->check(CLI::IsMember({"greedy", "sampled"}));
  trace_cmd->add_option("--seed", trace.seed, "sampling seed (sampled mode)");
  trace_cmd->add_option("--out", trace.out_path, "trace JSON file")->required();
  trace_cmd->callback([&] { rc = run_trace(trace); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return rc;
}
