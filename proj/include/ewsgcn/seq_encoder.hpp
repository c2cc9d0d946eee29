#pragma once

// GRU encoder mapping a variable-length transaction sequence to a fixed-size
// embedding, plus the linear head used to pretrain it on default labels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ewsgcn/autodiff.hpp"
#include "ewsgcn/gru.hpp"
#include "ewsgcn/transaction.hpp"

namespace ewsgcn {

struct EncoderConfig {
  std::size_t hidden_dim = 60;
  std::size_t currency_vocab = 3;
  std::size_t currency_embed_dim = 2;
  std::size_t mcc_vocab = 40;  // one extra reserved row marks "no MCC"
  std::size_t mcc_embed_dim = 8;
  std::size_t projection_dim = 32;
  std::size_t max_events = 512;

  // amount, tod sin/cos, dow sin/cos, log gap, direction
  static constexpr std::size_t numeric_features = 7;

  std::size_t input_dim() const { return currency_embed_dim + mcc_embed_dim + numeric_features; }
  std::size_t no_mcc_token() const { return mcc_vocab; }
};

/// Statistics of log1p(amount), frozen once pretraining has seen the data.
struct AmountStats {
  double mean = 0.0;
  double var = 1.0;

  static AmountStats fit(std::span<const EventSequence* const> seqs) {
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (const EventSequence* seq : seqs)
      for (const Transaction& t : *seq) {
        const double v = std::log1p(t.amount);
        s += v;
        s2 += v * v;
        ++n;
      }
    if (n == 0) return {};
    const double mean = s / static_cast<double>(n);
    return {mean, std::max(s2 / static_cast<double>(n) - mean * mean, 1e-12)};
  }

  double normalize(double amount) const { return (std::log1p(amount) - mean) / std::sqrt(var); }
  friend bool operator==(const AmountStats&, const AmountStats&) = default;
};

struct EncoderParams {
  EncoderConfig config;
  AmountStats amount_stats;
  Param currency_table;  // currency_vocab x currency_embed_dim
  Param mcc_table;       // (mcc_vocab + 1) x mcc_embed_dim
  Param proj_w;          // input_dim x projection_dim
  Param proj_b;
  GruParams gru;
  Param head_w;  // hidden x 1, pretraining only
  Param head_b;

  static EncoderParams init(const EncoderConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    EncoderParams p;
    p.config = cfg;
    std::normal_distribution<double> normal(0.0, 1.0);
    auto gaussian = [&](Shape s) {
      Tensor t(std::move(s));
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = normal(rng);
      return t;
    };
    p.currency_table = Param("currency_table", gaussian({cfg.currency_vocab, cfg.currency_embed_dim}));
    p.mcc_table = Param("mcc_table", gaussian({cfg.mcc_vocab + 1, cfg.mcc_embed_dim}));
    const double pb = 1.0 / std::sqrt(static_cast<double>(cfg.input_dim()));
    p.proj_w = Param("proj_w", uniform_tensor({cfg.input_dim(), cfg.projection_dim}, pb, rng));
    p.proj_b = Param("proj_b", uniform_tensor({cfg.projection_dim}, pb, rng));
    p.gru = GruParams::init("gru.", cfg.projection_dim, cfg.hidden_dim, rng);
    const double hb = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
    p.head_w = Param("head_w", uniform_tensor({cfg.hidden_dim, 1}, hb, rng));
    p.head_b = Param("head_b", uniform_tensor({1}, hb, rng));
    return p;
  }

  /// Encoder weights proper, excluding the pretraining head.
  std::vector<Param*> encoder_params() {
    std::vector<Param*> out{&currency_table, &mcc_table, &proj_w, &proj_b};
    for (Param* g : gru.params()) out.push_back(g);
    return out;
  }
  std::vector<const Param*> encoder_params() const {
    std::vector<const Param*> out{&currency_table, &mcc_table, &proj_w, &proj_b};
    for (const Param* g : gru.params()) out.push_back(g);
    return out;
  }
  std::vector<Param*> head_params() { return {&head_w, &head_b}; }
};

/// Encoder weights bound to a tape.
struct EncoderVars {
  Var currency_table, mcc_table, proj_w, proj_b;
  GruVars gru;

  static EncoderVars bind(Tape& tape, EncoderParams& p, bool track) {
    return {tape.param(p.currency_table, track), tape.param(p.mcc_table, track),
            tape.param(p.proj_w, track), tape.param(p.proj_b, track),
            GruVars::bind(tape, p.gru, track)};
  }
};

/// A sequence to encode. `direction` holds +1/-1 per event for transfers
/// (relative to the pair's stored orientation) and is empty for purchases;
/// `sign` flips it to the viewing node's perspective.
struct SequenceInput {
  std::span<const Transaction> events;
  std::span<const std::int8_t> direction = {};
  std::int8_t sign = 1;

  static SequenceInput of(const EventSequence& s) { return {std::span<const Transaction>(s)}; }
};

namespace detail {

inline std::int64_t floor_mod(std::int64_t a, std::int64_t m) {
  const std::int64_t r = a % m;
  return r < 0 ? r + m : r;
}

inline std::int64_t floor_div(std::int64_t a, std::int64_t m) {
  return (a - floor_mod(a, m)) / m;
}

inline void check_vocab(const Transaction& t, const EncoderConfig& cfg) {
  if (t.currency < 0 || static_cast<std::size_t>(t.currency) >= cfg.currency_vocab) {
    throw std::out_of_range("currency id " + std::to_string(t.currency) + " outside vocabulary of " +
                            std::to_string(cfg.currency_vocab));
  }
  if (t.mcc && (*t.mcc < 0 || static_cast<std::size_t>(*t.mcc) >= cfg.mcc_vocab)) {
    throw std::out_of_range("mcc id " + std::to_string(*t.mcc) + " outside vocabulary of " +
                            std::to_string(cfg.mcc_vocab));
  }
}

}  // namespace detail

/// Writes the numeric block of one event's features.
inline void numeric_features(const Transaction& t, const Transaction* prev, double direction,
                             const AmountStats& stats, double* out) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double tod = static_cast<double>(detail::floor_mod(t.timestamp, 86400)) / 86400.0;
  const double dow = static_cast<double>(detail::floor_mod(detail::floor_div(t.timestamp, 86400), 7)) / 7.0;
  const double gap = prev ? static_cast<double>(std::max<std::int64_t>(0, t.timestamp - prev->timestamp)) : 0.0;
  out[0] = stats.normalize(t.amount);
  out[1] = std::sin(two_pi * tod);
  out[2] = std::cos(two_pi * tod);
  out[3] = std::sin(two_pi * dow);
  out[4] = std::cos(two_pi * dow);
  out[5] = std::log1p(gap / 3600.0);
  out[6] = direction;
}

/// Input vector of a single event: currency embedding, MCC embedding (the
/// reserved row for transfers), then the numeric block.
inline Tensor featurize(const Transaction& t, const EncoderParams& params,
                        const Transaction* prev = nullptr, double direction = 0.0) {
  const EncoderConfig& cfg = params.config;
  detail::check_vocab(t, cfg);
  Tensor out(Shape{cfg.input_dim()});
  std::size_t k = 0;
  for (std::size_t c = 0; c < cfg.currency_embed_dim; ++c)
    out[k++] = params.currency_table.value(static_cast<std::size_t>(t.currency), c);
  const std::size_t mcc_row = t.mcc ? static_cast<std::size_t>(*t.mcc) : cfg.no_mcc_token();
  for (std::size_t c = 0; c < cfg.mcc_embed_dim; ++c) out[k++] = params.mcc_table.value(mcc_row, c);
  numeric_features(t, prev, direction, params.amount_stats, out.data() + k);
  return out;
}

/// Encodes a batch of sequences into [B x hidden]. Each sequence is
/// truncated to its `max_events` most recent events; an empty sequence yields
/// the zero initial state.
///
/// Sequences run in time-major order sorted by length, so the rows still
/// active at step t are always a prefix of the state matrix.
inline Var encode_batch(Tape& tape, const EncoderVars& vars, const EncoderParams& params,
                        std::span<const SequenceInput> seqs) {
  const EncoderConfig& cfg = params.config;
  const std::size_t hidden = cfg.hidden_dim;
  const std::size_t batch = seqs.size();
  if (batch == 0) return tape.constant(Tensor(Shape{0, hidden}));

  std::vector<std::size_t> len(batch), skip(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t n = seqs[i].events.size();
    len[i] = std::min(n, cfg.max_events);
    skip[i] = n - len[i];
  }
  std::vector<std::size_t> order(batch);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return len[a] > len[b]; });
  const std::size_t steps = len[order.front()];
  if (steps == 0) return tape.constant(Tensor(Shape{batch, hidden}));

  // active[t] = number of sequences longer than t
  std::vector<std::size_t> active(steps, 0);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t t = 0; t < len[i]; ++t) ++active[t];
  std::size_t total = 0;
  for (std::size_t a : active) total += a;

  std::vector<std::size_t> cur_ids, mcc_ids;
  cur_ids.reserve(total);
  mcc_ids.reserve(total);
  Tensor numeric(Shape{total, EncoderConfig::numeric_features});
  std::size_t row = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t k = 0; k < active[t]; ++k) {
      const SequenceInput& s = seqs[order[k]];
      const std::size_t e = skip[order[k]] + t;
      const Transaction& tx = s.events[e];
      detail::check_vocab(tx, cfg);
      cur_ids.push_back(static_cast<std::size_t>(tx.currency));
      mcc_ids.push_back(tx.mcc ? static_cast<std::size_t>(*tx.mcc) : cfg.no_mcc_token());
      const double dir = s.direction.empty() ? 0.0 : static_cast<double>(s.direction[e] * s.sign);
      numeric_features(tx, t > 0 ? &s.events[e - 1] : nullptr, dir, params.amount_stats,
                       numeric.data() + row * EncoderConfig::numeric_features);
      ++row;
    }
  }

  Var x = concat_cols({gather_rows(vars.currency_table, std::move(cur_ids)),
                       gather_rows(vars.mcc_table, std::move(mcc_ids)), tape.constant(std::move(numeric))});
  Var p = tanh(add_bias(matmul(x, vars.proj_w), vars.proj_b));
  Var xz = add_bias(matmul(p, vars.gru.wz), vars.gru.bz);
  Var xr = add_bias(matmul(p, vars.gru.wr), vars.gru.br);
  Var xn = add_bias(matmul(p, vars.gru.wn), vars.gru.bn);

  // Rows that stop early are parked in `finished`, deepest first.
  std::vector<Var> finished;
  Var h = tape.constant(Tensor(Shape{active[0], hidden}));
  std::size_t offset = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t b = active[t];
    Var hp = h.value().rows() == b ? h : slice_rows(h, 0, b);
    if (h.value().rows() != b) finished.push_back(slice_rows(h, b, h.value().rows()));
    h = gru_step_projected(slice_rows(xz, offset, offset + b), slice_rows(xr, offset, offset + b),
                           slice_rows(xn, offset, offset + b), hp, vars.gru);
    offset += b;
  }
  finished.push_back(h);
  std::vector<Var> parts(finished.rbegin(), finished.rend());
  const std::size_t nonempty = active[0];
  if (nonempty < batch) parts.push_back(tape.constant(Tensor(Shape{batch - nonempty, hidden})));
  Var sorted = parts.size() == 1 ? parts.front() : concat_rows(parts);

  std::vector<std::size_t> inverse(batch);
  for (std::size_t k = 0; k < batch; ++k) inverse[order[k]] = k;
  bool identity = true;
  for (std::size_t k = 0; k < batch; ++k) identity = identity && inverse[k] == k;
  return identity ? sorted : gather_rows(sorted, std::move(inverse));
}

/// Final hidden state for one sequence.
inline Tensor encode(const EventSequence& seq, EncoderParams& params) {
  Tape tape;
  EncoderVars vars = EncoderVars::bind(tape, params, false);
  const SequenceInput in = SequenceInput::of(seq);
  return encode_batch(tape, vars, params, std::span(&in, 1)).value().reshaped({params.config.hidden_dim});
}

/// Pretraining logits [B x 1].
inline Var pretrain_logits(Tape& tape, EncoderParams& params, std::span<const SequenceInput> seqs,
                           bool track = true) {
  EncoderVars vars = EncoderVars::bind(tape, params, track);
  Var h = encode_batch(tape, vars, params, seqs);
  return add_bias(matmul(h, tape.param(params.head_w, track)), tape.param(params.head_b, track));
}

/// Default logit of a single sequence; sigmoid of it is the probability.
inline double pretrain_forward(const EventSequence& seq, EncoderParams& params) {
  Tape tape;
  const SequenceInput in = SequenceInput::of(seq);
  return pretrain_logits(tape, params, std::span(&in, 1), false).value().item();
}

}  // namespace ewsgcn
