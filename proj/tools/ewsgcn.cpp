// ewsgcn: synthetic data generation, pretraining, training, evaluation and
// depth sweeps.
//
// Exit codes: 0 success, 1 unexpected failure, 2 configuration or usage
// error, 3 I/O or malformed input file, 4 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ewsgcn/experiment.hpp"

namespace fs = std::filesystem;
using namespace ewsgcn;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kNumerical = 4 };

struct Options {
  std::string config;
  std::string data;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> layers{0, 1, 2, 3};
  std::vector<std::uint64_t> seeds;
};

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir);
}

std::string in_dir(const std::string& dir, const char* name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig load_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  return load_experiment_config(o.config);
}

/// --data may name the graph file or a directory produced by synth-gen.
TxGraph load_data(const Options& o) {
  if (o.data.empty()) throw ConfigError("--data is required");
  const fs::path p(o.data);
  return load_graph(fs::is_directory(p) ? (p / "graph.jsonl").string() : p.string());
}

void save_config(const ExperimentConfig& cfg, const std::string& dir) {
  write_text(in_dir(dir, "config.json"), to_json(cfg).dump(2) + "\n");
}

void require_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  ensure_dir(o.out);
}

int synth_gen(const Options& o) {
  ExperimentConfig cfg = load_config(o);
  if (o.seed) cfg.gen.seed = *o.seed;
  require_out(o);
  const SynthData d = generate(cfg.gen);
  std::ostringstream graph, truth;
  write_jsonl(d.graph, graph);
  write_truth_jsonl(d.truth, truth);
  write_text(in_dir(o.out, "graph.jsonl"), graph.str());
  write_text(in_dir(o.out, "truth.jsonl"), truth.str());
  const std::string hash = "fnv1a64:" + hex64(fnv1a64(truth.str(), fnv1a64(graph.str())));
  nlohmann::ordered_json manifest{{"format", "ewsgcn-dataset"},
                                  {"dataset_hash", hash},
                                  {"clients", d.graph.size()},
                                  {"transfer_pairs", d.graph.transfers().size()},
                                  {"bayes_auc", bayes_auc(d.truth, d.truth.labels)},
                                  {"expected_bayes_auc", expected_bayes_auc(d.truth.posterior)},
                                  {"gen", to_json(cfg.gen)}};
  write_text(in_dir(o.out, "manifest.json"), manifest.dump(2) + "\n");
  std::cout << "dataset " << hash << " (" << d.graph.size() << " clients)\n";
  return kOk;
}

int pretrain(const Options& o) {
  ExperimentConfig cfg = load_config(o);
  if (o.seed) cfg.train.seed = *o.seed;
  require_out(o);
  const TxGraph g = load_data(o);
  const Split split = split_clients(g, cfg.split);
  std::ostringstream log;
  EncoderParams enc = run_pretrain(g, split, cfg, &log);
  save_encoder(enc, in_dir(o.out, "encoder.bin"));
  write_text(in_dir(o.out, "pretrain_log.jsonl"), log.str());
  save_config(cfg, o.out);
  std::cout << "encoder written to " << in_dir(o.out, "encoder.bin") << '\n';
  return kOk;
}

int train(const Options& o) {
  ExperimentConfig cfg = load_config(o);
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint (pretrained encoder) is required");
  require_out(o);
  const TxGraph g = load_data(o);
  const EncoderParams enc = load_encoder(o.checkpoint);
  const Split split = split_clients(g, cfg.split);
  const Dataset d = build_dataset(g, split, cfg);
  std::ostringstream log;
  Model m = run_train(d, enc, cfg, cfg.model, &log);
  save_model(m, in_dir(o.out, "model.bin"));
  write_text(in_dir(o.out, "train_log.jsonl"), log.str());
  save_config(cfg, o.out);
  std::cout << "model written to " << in_dir(o.out, "model.bin") << '\n';
  return kOk;
}

int eval(const Options& o) {
  ExperimentConfig cfg = load_config(o);
  if (o.seed) cfg.eval.seed = *o.seed;
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint (model) is required");
  require_out(o);
  const TxGraph g = load_data(o);
  Model m = load_model(o.checkpoint);
  cfg.model = m.config;
  const Split split = split_clients(g, cfg.split);
  Dataset d;
  {
    Split test_only;
    test_only.test = split.test;
    d = build_dataset(g, test_only, cfg);
  }
  const ScoredRun run = run_eval(m, d.test, cfg);
  nlohmann::ordered_json report = run.to_json();
  report["checkpoint_hash"] = "fnv1a64:" + hex64(fnv1a64(read_text(o.checkpoint)));
  write_text(in_dir(o.out, "report.json"), report.dump(2) + "\n");
  const std::string table = text_report({run});
  write_text(in_dir(o.out, "report.txt"), table);
  std::ostringstream roc;
  write_roc_csv(roc, roc_curve(run.scores, run.labels));
  write_text(in_dir(o.out, "roc.csv"), roc.str());
  save_config(cfg, o.out);
  std::cout << table;
  return kOk;
}

int sweep(const Options& o) {
  ExperimentConfig cfg = load_config(o);
  require_out(o);
  const TxGraph g = load_data(o);
  std::vector<std::uint64_t> seeds = o.seeds;
  if (seeds.empty()) seeds.push_back(o.seed.value_or(cfg.train.seed));
  const auto rows = sweep_depth(g, cfg, o.layers, seeds);
  nlohmann::ordered_json j{{"model", to_string(cfg.model.kind)}, {"seeds", seeds}, {"rows", nlohmann::ordered_json::array()}};
  for (const DepthRow& r : rows) j["rows"].push_back(r.to_json());
  write_text(in_dir(o.out, "sweep.json"), j.dump(2) + "\n");
  std::ostringstream csv;
  write_depth_csv(csv, rows);
  write_text(in_dir(o.out, "sweep.csv"), csv.str());
  write_text(in_dir(o.out, "sweep.txt"), depth_table(rows));
  save_config(cfg, o.out);
  std::cout << depth_table(rows);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EWS-GCN default scoring on transaction graphs"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub, bool data, bool checkpoint) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->required();
    sub->add_option("--out", o.out, "output directory")->required();
    sub->add_option("--seed", o.seed, "overrides the seed used by this command");
    if (data) sub->add_option("--data", o.data, "graph JSONL file or synth-gen directory")->required();
    if (checkpoint) sub->add_option("--checkpoint", o.checkpoint, "input checkpoint")->required();
  };
  CLI::App* gen = app.add_subcommand("synth-gen", "generate a synthetic dataset");
  common(gen, false, false);
  CLI::App* pre = app.add_subcommand("pretrain", "pretrain the sequence encoder");
  common(pre, true, false);
  CLI::App* tr = app.add_subcommand("train", "three-stage training from a pretrained encoder");
  common(tr, true, true);
  CLI::App* ev = app.add_subcommand("eval", "score the test split with a trained model");
  common(ev, true, true);
  CLI::App* sw = app.add_subcommand("sweep-depth", "test AUC against the number of graph layers");
  common(sw, true, false);
  sw->add_option("--layers", o.layers, "depths to evaluate")->delimiter(',');
  sw->add_option("--seeds", o.seeds, "training seeds")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return synth_gen(o);
    if (*pre) return pretrain(o);
    if (*tr) return train(o);
    if (*ev) return eval(o);
    if (*sw) return sweep(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const SchemaError& e) {
    std::cerr << "malformed input: " << e.what() << '\n';
    return kIo;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
