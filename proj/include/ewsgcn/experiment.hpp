#pragma once

// Experiment configuration and the split / pretrain / train / evaluate
// pipeline shared by the command-line tool and the acceptance runs.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ewsgcn/errors.hpp"
#include "ewsgcn/graph.hpp"
#include "ewsgcn/metrics.hpp"
#include "ewsgcn/models.hpp"
#include "ewsgcn/synth.hpp"
#include "ewsgcn/trainer.hpp"
#include "json.hpp"

namespace ewsgcn {

inline constexpr int kSchemaVersion = 1;

struct SplitConfig {
  std::size_t n_train = 5000;
  std::size_t n_val = 0;
  std::size_t n_test = 1000;
  std::uint64_t seed = 0;
};

struct EvalConfig {
  std::size_t n_boot = 1000;
  std::uint64_t seed = 0;
  std::size_t hop1_max = 25;
  std::size_t hop2_max = 20;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  GenConfig gen;
  EncoderConfig encoder;
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  ExtractOptions extract;
  SplitConfig split;
  EvalConfig eval;
  std::string out_dir = "runs";

  void validate() const {
    if (schema_version != kSchemaVersion)
      throw ConfigError("unsupported schema_version " + std::to_string(schema_version));
    gen.validate();
    model.validate();
    train.validate();
    sampler.validate();
    if (extract.depth < 0) throw ConfigError("extract.depth must be non-negative");
    if (extract.max_nodes == 0) throw ConfigError("extract.max_nodes must be positive");
    if (split.n_train == 0) throw ConfigError("split.n_train must be positive");
    if (eval.n_boot < 100) throw ConfigError("eval.n_boot must be at least 100");
    if (encoder.mcc_vocab < static_cast<std::size_t>(gen.mcc_vocab) ||
        encoder.currency_vocab < static_cast<std::size_t>(gen.currency_vocab))
      throw ConfigError("encoder vocabularies smaller than the generator's");
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError(std::string("unknown field '") + it.key() + "' in " + what);
  }
}

template <class Range>
void read_range(const nlohmann::json& j, const char* key, Range& r) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("field '") + key + "' must be [lo, hi]");
  try {
    r.lo = v[0].get<decltype(r.lo)>();
    r.hi = v[1].get<decltype(r.hi)>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const GenConfig& c) {
  return {{"n_clients", c.n_clients},
          {"mean_degree", c.mean_degree},
          {"tx_per_client", {c.tx_per_client.lo, c.tx_per_client.hi}},
          {"transfers_per_edge", {c.transfers_per_edge.lo, c.transfers_per_edge.hi}},
          {"w0", c.w0},
          {"w1", c.w1},
          {"w2", c.w2},
          {"base_rate", c.base_rate},
          {"seed", c.seed},
          {"start_time", c.start_time},
          {"days", c.days},
          {"risky_mcc_lo", c.risky_mcc_lo},
          {"mcc_vocab", c.mcc_vocab},
          {"currency_vocab", c.currency_vocab}};
}

inline GenConfig gen_config_from(const nlohmann::json& j) {
  detail::require_object(j, "gen");
  detail::reject_unknown(j,
                         {"n_clients", "mean_degree", "tx_per_client", "transfers_per_edge", "w0", "w1", "w2",
                          "base_rate", "seed", "start_time", "days", "risky_mcc_lo", "mcc_vocab", "currency_vocab"},
                         "gen");
  GenConfig c;
  detail::read_field(j, "n_clients", c.n_clients);
  detail::read_field(j, "mean_degree", c.mean_degree);
  detail::read_range(j, "tx_per_client", c.tx_per_client);
  detail::read_range(j, "transfers_per_edge", c.transfers_per_edge);
  detail::read_field(j, "w0", c.w0);
  detail::read_field(j, "w1", c.w1);
  detail::read_field(j, "w2", c.w2);
  detail::read_field(j, "base_rate", c.base_rate);
  detail::read_field(j, "seed", c.seed);
  detail::read_field(j, "start_time", c.start_time);
  detail::read_field(j, "days", c.days);
  detail::read_field(j, "risky_mcc_lo", c.risky_mcc_lo);
  detail::read_field(j, "mcc_vocab", c.mcc_vocab);
  detail::read_field(j, "currency_vocab", c.currency_vocab);
  return c;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"stage_epochs", c.stage_epochs},
          {"pretrain_epochs", c.pretrain_epochs},
          {"lr", c.lr},
          {"pretrain_lr", c.pretrain_lr},
          {"step_lr", {{"step_size", c.step_lr.step_size}, {"gamma", c.step_lr.gamma}}},
          {"batch_size", c.batch_size},
          {"dropout", c.dropout},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from(const nlohmann::json& j) {
  detail::require_object(j, "train");
  detail::reject_unknown(
      j, {"stage_epochs", "pretrain_epochs", "lr", "pretrain_lr", "step_lr", "batch_size", "dropout", "seed"},
      "train");
  TrainConfig c;
  detail::read_field(j, "stage_epochs", c.stage_epochs);
  detail::read_field(j, "pretrain_epochs", c.pretrain_epochs);
  detail::read_field(j, "lr", c.lr);
  detail::read_field(j, "pretrain_lr", c.pretrain_lr);
  if (j.contains("step_lr")) {
    const auto& s = j["step_lr"];
    detail::require_object(s, "train.step_lr");
    detail::reject_unknown(s, {"step_size", "gamma"}, "train.step_lr");
    detail::read_field(s, "step_size", c.step_lr.step_size);
    detail::read_field(s, "gamma", c.step_lr.gamma);
  }
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "dropout", c.dropout);
  detail::read_field(j, "seed", c.seed);
  return c;
}

inline nlohmann::ordered_json to_json(const SamplerConfig& c) {
  return {{"hop1_fanout", {c.hop1_fanout.lo, c.hop1_fanout.hi}},
          {"hop2_fanout", {c.hop2_fanout.lo, c.hop2_fanout.hi}},
          {"tx_drop_fraction", {c.tx_drop_fraction.lo, c.tx_drop_fraction.hi}},
          {"seed", c.seed},
          {"max_nodes", c.max_nodes}};
}

inline SamplerConfig sampler_config_from(const nlohmann::json& j) {
  detail::require_object(j, "sampler");
  detail::reject_unknown(j, {"hop1_fanout", "hop2_fanout", "tx_drop_fraction", "seed", "max_nodes"}, "sampler");
  SamplerConfig c;
  detail::read_range(j, "hop1_fanout", c.hop1_fanout);
  detail::read_range(j, "hop2_fanout", c.hop2_fanout);
  detail::read_range(j, "tx_drop_fraction", c.tx_drop_fraction);
  detail::read_field(j, "seed", c.seed);
  detail::read_field(j, "max_nodes", c.max_nodes);
  return c;
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  return {{"schema_version", c.schema_version},
          {"gen", to_json(c.gen)},
          {"encoder", to_json(c.encoder)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"sampler", to_json(c.sampler)},
          {"extract", {{"depth", c.extract.depth}, {"max_nodes", c.extract.max_nodes}}},
          {"split",
           {{"n_train", c.split.n_train}, {"n_val", c.split.n_val}, {"n_test", c.split.n_test}, {"seed", c.split.seed}}},
          {"eval",
           {{"n_boot", c.eval.n_boot},
            {"seed", c.eval.seed},
            {"hop1_max", c.eval.hop1_max},
            {"hop2_max", c.eval.hop2_max}}},
          {"out_dir", c.out_dir}};
}

/// Parses and validates a config document. Missing sections and fields take
/// their defaults; unknown fields are rejected.
inline ExperimentConfig experiment_config_from(const nlohmann::json& j) {
  detail::require_object(j, "config");
  if (!j.contains("schema_version")) throw ConfigError("config lacks schema_version");
  detail::reject_unknown(
      j, {"schema_version", "gen", "encoder", "model", "train", "sampler", "extract", "split", "eval", "out_dir"},
      "config");
  ExperimentConfig c;
  detail::read_field(j, "schema_version", c.schema_version);
  if (c.schema_version != kSchemaVersion)
    throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version));
  if (j.contains("gen")) c.gen = gen_config_from(j["gen"]);
  if (j.contains("encoder")) c.encoder = encoder_config_from(j["encoder"]);
  if (j.contains("model")) c.model = model_config_from(j["model"]);
  if (j.contains("train")) c.train = train_config_from(j["train"]);
  if (j.contains("sampler")) c.sampler = sampler_config_from(j["sampler"]);
  if (j.contains("extract")) {
    const auto& e = j["extract"];
    detail::require_object(e, "extract");
    detail::reject_unknown(e, {"depth", "max_nodes"}, "extract");
    detail::read_field(e, "depth", c.extract.depth);
    detail::read_field(e, "max_nodes", c.extract.max_nodes);
  }
  if (j.contains("split")) {
    const auto& s = j["split"];
    detail::require_object(s, "split");
    detail::reject_unknown(s, {"n_train", "n_val", "n_test", "seed"}, "split");
    detail::read_field(s, "n_train", c.split.n_train);
    detail::read_field(s, "n_val", c.split.n_val);
    detail::read_field(s, "n_test", c.split.n_test);
    detail::read_field(s, "seed", c.split.seed);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::require_object(e, "eval");
    detail::reject_unknown(e, {"n_boot", "seed", "hop1_max", "hop2_max"}, "eval");
    detail::read_field(e, "n_boot", c.eval.n_boot);
    detail::read_field(e, "seed", c.eval.seed);
    detail::read_field(e, "hop1_max", c.eval.hop1_max);
    detail::read_field(e, "hop2_max", c.eval.hop2_max);
  }
  detail::read_field(j, "out_dir", c.out_dir);
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return experiment_config_from(j);
}

// ---------------------------------------------------------------------------
// Pipeline

struct Split {
  std::vector<std::string> train, val, test;
};

/// Labeled clients shuffled by split.seed and cut into train, val and test.
inline Split split_clients(const TxGraph& g, const SplitConfig& s) {
  std::vector<std::string> ids;
  for (const Client& c : g.clients())
    if (c.label) ids.push_back(c.id);
  if (s.n_train + s.n_val + s.n_test > ids.size())
    throw ConfigError("split asks for " + std::to_string(s.n_train + s.n_val + s.n_test) + " clients but only " +
                      std::to_string(ids.size()) + " are labeled");
  std::mt19937_64 rng(derive_seed(s.seed, 0x5e));
  std::shuffle(ids.begin(), ids.end(), rng);
  Split out;
  auto take = [&](std::size_t from, std::size_t n) {
    return std::vector<std::string>(ids.begin() + static_cast<std::ptrdiff_t>(from),
                                    ids.begin() + static_cast<std::ptrdiff_t>(from + n));
  };
  out.train = take(0, s.n_train);
  out.val = take(s.n_train, s.n_val);
  out.test = take(s.n_train + s.n_val, s.n_test);
  return out;
}

struct Dataset {
  std::vector<EgoSubgraph> train, val, test;
};

/// Full ego subgraphs for training (augmented per step later); evaluation
/// subgraphs are truncated deterministically.
inline Dataset build_dataset(const TxGraph& g, const Split& split, const ExperimentConfig& cfg) {
  Dataset d;
  for (const std::string& id : split.train) d.train.push_back(extract_ego(g, id, cfg.extract));
  auto eval_sub = [&](const std::string& id) {
    return truncate_fanout(extract_ego(g, id, cfg.extract), cfg.eval.hop1_max, cfg.eval.hop2_max,
                           cfg.extract.max_nodes);
  };
  for (const std::string& id : split.val) d.val.push_back(eval_sub(id));
  for (const std::string& id : split.test) d.test.push_back(eval_sub(id));
  return d;
}

/// Pretrains the encoder on the purchase sequences of the training clients.
inline EncoderParams run_pretrain(const TxGraph& g, const Split& split, const ExperimentConfig& cfg,
                                  std::ostream* log = nullptr) {
  std::vector<const EventSequence*> seqs;
  std::vector<int> labels;
  for (const std::string& id : split.train) {
    const Client& c = g.client(*g.find(id));
    seqs.push_back(&c.purchases);
    labels.push_back(*c.label);
  }
  return pretrain_encoder(seqs, labels, cfg.encoder, cfg.train, nullptr, log);
}

inline Model run_train(const Dataset& d, const EncoderParams& encoder, const ExperimentConfig& cfg,
                       const ModelConfig& model, std::ostream* log = nullptr, const TrainHooks& hooks = {}) {
  Model m = Model::init(model, encoder, derive_seed(cfg.train.seed, 0x80));
  train_three_stage(m, d.train, d.val, cfg.train, cfg.sampler, log, hooks);
  return m;
}

inline ScoredRun run_eval(Model& m, std::span<const EgoSubgraph> test, const ExperimentConfig& cfg) {
  std::vector<const EgoSubgraph*> ptrs;
  std::vector<int> labels;
  for (const EgoSubgraph& s : test) {
    if (!s.target_label()) throw std::invalid_argument("evaluation target without label: " + s.nodes.front());
    ptrs.push_back(&s);
    labels.push_back(*s.target_label());
  }
  nlohmann::ordered_json fp = to_json(cfg);
  fp["model"] = to_json(m.config);
  std::string name = to_string(m.config.kind);
  if (m.config.kind != ModelKind::node_only) name += "_L" + std::to_string(m.config.layers);
  return ScoredRun::score(name, predict(m, ptrs), std::move(labels), cfg.eval.n_boot, cfg.eval.seed, fingerprint(fp));
}

/// Trains and scores several model variants on one dataset from a given
/// pretrained encoder, sharing the split and the subgraphs.
inline std::vector<ScoredRun> compare_models(const TxGraph& g, const ExperimentConfig& cfg,
                                             std::span<const ModelConfig> models, const EncoderParams& enc) {
  const Split split = split_clients(g, cfg.split);
  const Dataset d = build_dataset(g, split, cfg);
  std::vector<ScoredRun> out;
  for (const ModelConfig& mc : models) {
    Model m = run_train(d, enc, cfg, mc);
    out.push_back(run_eval(m, d.test, cfg));
  }
  return out;
}

/// Same, with the encoder pretrained on the training split of `g`.
inline std::vector<ScoredRun> compare_models(const TxGraph& g, const ExperimentConfig& cfg,
                                             std::span<const ModelConfig> models) {
  return compare_models(g, cfg, models, run_pretrain(g, split_clients(g, cfg.split), cfg));
}

/// Variant of cfg.model at depth L; depth 0 is the node-only model.
inline ModelConfig at_depth(ModelConfig m, std::size_t layers) {
  if (layers == 0) {
    m.kind = ModelKind::node_only;
    m.layers = 0;
  } else {
    m.layers = layers;
  }
  return m;
}

/// Mean test AUC per depth over training seeds on a fixed dataset.
inline std::vector<DepthRow> sweep_depth(const TxGraph& g, const ExperimentConfig& cfg,
                                         std::span<const std::size_t> layers, std::span<const std::uint64_t> seeds) {
  if (layers.empty()) throw ConfigError("sweep_depth: empty layer list");
  if (seeds.empty()) throw ConfigError("sweep_depth: empty seed list");
  std::vector<ModelConfig> models;
  for (std::size_t l : layers) models.push_back(at_depth(cfg.model, l));
  std::vector<DepthRow> rows(layers.size());
  for (std::size_t k = 0; k < layers.size(); ++k) rows[k].layers = layers[k];
  for (std::uint64_t seed : seeds) {
    ExperimentConfig c = cfg;
    c.train.seed = seed;
    const auto runs = compare_models(g, c, models);
    for (std::size_t k = 0; k < runs.size(); ++k) {
      rows[k].aucs.push_back(runs[k].auc);
      rows[k].ses.push_back(runs[k].auc_se);
    }
  }
  for (DepthRow& r : rows) r.summarize();
  return rows;
}

}  // namespace ewsgcn
