#pragma once

// Encoder pretraining and three-stage training with freezing, StepLR and
// minibatches of ego subgraphs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ewsgcn/errors.hpp"
#include "ewsgcn/graph.hpp"
#include "ewsgcn/metrics.hpp"
#include "ewsgcn/models.hpp"
#include "ewsgcn/optim.hpp"
#include "ewsgcn/seq_encoder.hpp"
#include "json.hpp"

namespace ewsgcn {

struct StepLrConfig {
  int step_size = 2;
  double gamma = 0.5;
};

struct TrainConfig {
  std::array<int, 3> stage_epochs{4, 2, 4};
  int pretrain_epochs = 4;
  double lr = 1e-3;
  double pretrain_lr = 1e-2;
  StepLrConfig step_lr;
  std::size_t batch_size = 16;
  double dropout = 0.25;
  std::uint64_t seed = 0;

  void validate() const {
    for (int e : stage_epochs)
      if (e < 0) throw ConfigError("stage epochs must be non-negative");
    if (pretrain_epochs < 0) throw ConfigError("pretrain_epochs must be non-negative");
    if (!(lr > 0.0) || !(pretrain_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (step_lr.step_size <= 0) throw ConfigError("step_size must be positive");
    if (!(step_lr.gamma > 0.0 && step_lr.gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }
};

/// base_lr * gamma^floor(epoch / step_size).
inline double step_lr(int epoch, double base_lr, int step_size, double gamma) {
  if (step_size <= 0) throw std::invalid_argument("step_lr: step_size must be positive");
  if (epoch < 0) throw std::invalid_argument("step_lr: epoch must be non-negative");
  return base_lr * std::pow(gamma, epoch / step_size);
}

/// -(y ln p + (1 - y) ln(1 - p)) with p clamped to [1e-12, 1 - 1e-12].
inline double bce_loss(double p, int y) {
  const double q = std::clamp(p, 1e-12, 1.0 - 1e-12);
  return -(y * std::log(q) + (1 - y) * std::log(1.0 - q));
}

struct FreezeMask {
  bool node_encoder = false;
  bool edge_encoder = false;
  bool conv = false;
  bool head = false;

  /// Stage 1 trains conv and head, stage 2 adds the edge encoder, stage 3
  /// trains everything.
  static FreezeMask for_stage(int stage) {
    switch (stage) {
      case 1: return {true, true, false, false};
      case 2: return {true, false, false, false};
      case 3: return {};
      default: throw std::invalid_argument("stage must be 1, 2 or 3");
    }
  }

  void apply(Model& m) const {
    m.set_frozen(Component::node_encoder, node_encoder);
    m.set_frozen(Component::edge_encoder, edge_encoder);
    m.set_frozen(Component::conv, conv);
    m.set_frozen(Component::head, head);
  }
};

struct EpochLog {
  int stage = 0;  // 0 for encoder pretraining
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_auc;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j{{"stage", stage}, {"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}};
    j["val_auc"] = val_auc ? nlohmann::ordered_json(*val_auc) : nlohmann::ordered_json(nullptr);
    return j;
  }
};

/// splitmix64 over a seed and a few stream coordinates.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(mix(seed) ^ a) ^ b) ^ c);
}

/// Seed of the encoder initialization used by pretrain_encoder.
inline std::uint64_t encoder_init_seed(std::uint64_t seed) { return derive_seed(seed, 0x70); }

namespace detail {

inline void emit(const EpochLog& e, std::vector<EpochLog>& log, std::ostream* jsonl) {
  log.push_back(e);
  if (jsonl) *jsonl << e.to_json().dump() << '\n';
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline void check_finite(double loss, const char* where) {
  if (!std::isfinite(loss)) throw NumericalError(std::string("non-finite loss during ") + where);
}

}  // namespace detail

/// Trains an encoder with a logistic head on labeled sequences and returns
/// it with amount statistics fitted on `seqs`. The head is not meant for
/// reuse.
inline EncoderParams pretrain_encoder(std::span<const EventSequence* const> seqs, std::span<const int> labels,
                                      const EncoderConfig& enc, const TrainConfig& cfg,
                                      std::vector<EpochLog>* log = nullptr, std::ostream* jsonl = nullptr) {
  cfg.validate();
  if (seqs.size() != labels.size()) throw std::invalid_argument("pretrain: sequences and labels differ in length");
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("pretrain: labels must be 0 or 1");
    pos += y == 1;
  }
  if (pos == 0 || pos == labels.size()) throw std::invalid_argument("pretrain: both classes are required");

  EncoderParams p = EncoderParams::init(enc, encoder_init_seed(cfg.seed));
  p.amount_stats = AmountStats::fit(seqs);
  std::vector<Param*> params = p.encoder_params();
  for (Param* h : p.head_params()) params.push_back(h);
  Adam opt(params);
  std::vector<EpochLog> local;
  std::vector<EpochLog>& out = log ? *log : local;

  for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    const double lr = step_lr(epoch, cfg.pretrain_lr, cfg.step_lr.step_size, cfg.step_lr.gamma);
    const auto order = detail::shuffled(seqs.size(), derive_seed(cfg.seed, 0x71, static_cast<std::uint64_t>(epoch)));
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - s);
      std::vector<SequenceInput> in;
      std::vector<double> y;
      for (std::size_t k = s; k < s + n; ++k) {
        in.push_back(SequenceInput::of(*seqs[order[k]]));
        y.push_back(labels[order[k]]);
      }
      Tape tape;
      Var loss = bce_with_logits(pretrain_logits(tape, p, in), y);
      detail::check_finite(loss.value().item(), "pretraining");
      opt.zero_grad();
      tape.backward(loss);
      opt.step(lr);
      total += loss.value().item() * static_cast<double>(n);
    }
    detail::emit({0, epoch, lr, total / static_cast<double>(seqs.size()), std::nullopt}, out, jsonl);
  }
  return p;
}

struct TrainHooks {
  std::function<void(int stage, Model&)> after_stage;
};

/// Runs the three stages on `train`, each with a fresh Adam state and a
/// StepLR schedule restarting at cfg.lr. Every example is re-sampled with
/// sample_augment at every step; `val`, if non-empty, is scored after each
/// epoch. Returns the per-epoch log and leaves all components unfrozen.
inline std::vector<EpochLog> train_three_stage(Model& m, std::span<const EgoSubgraph> train,
                                               std::span<const EgoSubgraph> val, const TrainConfig& cfg,
                                               const SamplerConfig& sampler, std::ostream* jsonl = nullptr,
                                               const TrainHooks& hooks = {}) {
  cfg.validate();
  sampler.validate();
  if (train.empty()) throw std::invalid_argument("train_three_stage: empty train set");
  for (const EgoSubgraph& s : train)
    if (s.size() == 0 || !s.target_label()) throw std::invalid_argument("train_three_stage: unlabeled target");

  std::vector<const EgoSubgraph*> val_ptrs;
  std::vector<int> val_labels;
  bool val_both = false;
  for (const EgoSubgraph& s : val) {
    val_ptrs.push_back(&s);
    val_labels.push_back(s.target_label().value_or(0));
  }
  if (!val_labels.empty()) {
    const auto pos = std::count(val_labels.begin(), val_labels.end(), 1);
    val_both = pos > 0 && pos < static_cast<std::ptrdiff_t>(val_labels.size());
  }

  std::vector<EpochLog> log;
  for (int stage = 1; stage <= 3; ++stage) {
    FreezeMask::for_stage(stage).apply(m);
    Adam opt(m.params());
    const auto st = static_cast<std::uint64_t>(stage);
    for (int epoch = 0; epoch < cfg.stage_epochs[static_cast<std::size_t>(stage - 1)]; ++epoch) {
      const auto ep = static_cast<std::uint64_t>(epoch);
      const double lr = step_lr(epoch, cfg.lr, cfg.step_lr.step_size, cfg.step_lr.gamma);
      const auto order = detail::shuffled(train.size(), derive_seed(cfg.seed, st, ep, 1));
      std::mt19937_64 drop_rng(derive_seed(cfg.seed, st, ep, 2));
      double total = 0.0;
      for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
        const std::size_t n = std::min(cfg.batch_size, order.size() - s);
        std::vector<EgoSubgraph> aug;
        aug.reserve(n);
        for (std::size_t k = s; k < s + n; ++k) {
          SamplerConfig sc = sampler;
          sc.seed = derive_seed(cfg.seed ^ sampler.seed, st, ep, 16 + order[k]);
          aug.push_back(sample_augment(train[order[k]], sc));
        }
        std::vector<const EgoSubgraph*> ptrs;
        for (const EgoSubgraph& a : aug) ptrs.push_back(&a);
        const Batch b = Batch::of(ptrs);
        Tape tape;
        Var logits = forward_logits(tape, m, b, {true, true, &drop_rng, cfg.dropout});
        Var loss = bce_with_logits(logits, b.labels);
        detail::check_finite(loss.value().item(), "training");
        opt.zero_grad();
        tape.backward(loss);
        opt.step(lr);
        total += loss.value().item() * static_cast<double>(n);
      }
      EpochLog e{stage, epoch, lr, total / static_cast<double>(train.size()), std::nullopt};
      if (val_both) e.val_auc = roc_auc(predict(m, val_ptrs), val_labels);
      detail::emit(e, log, jsonl);
    }
    if (hooks.after_stage) hooks.after_stage(stage, m);
  }
  FreezeMask{}.apply(m);
  return log;
}

}  // namespace ewsgcn
