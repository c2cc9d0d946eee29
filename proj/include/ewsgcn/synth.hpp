#pragma once

// Synthetic transaction graphs with planted default signals at hop
// distances 0, 1 and 2, plus the exact posterior used to draw labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ewsgcn/errors.hpp"
#include "ewsgcn/graph.hpp"
#include "ewsgcn/metrics.hpp"
#include "json.hpp"

namespace ewsgcn {

struct GenConfig {
  std::size_t n_clients = 6000;
  double mean_degree = 3.0;
  IntRange tx_per_client{8, 16};
  IntRange transfers_per_edge{1, 4};
  double w0 = 2.0;  // own purchases
  double w1 = 4.0;  // mean over 1-hop neighbours
  double w2 = 4.0;  // mean over exactly-2-hop nodes
  double base_rate = 0.1;
  std::uint64_t seed = 0;

  // event layout
  std::int64_t start_time = 1600000000;
  int days = 90;
  std::int32_t risky_mcc_lo = 30;  // risky groups are [risky_mcc_lo, mcc_vocab)
  std::int32_t mcc_vocab = 40;
  std::int32_t currency_vocab = 3;

  void validate() const {
    if (n_clients < 2) throw ConfigError("n_clients must be at least 2");
    if (!(mean_degree >= 1.0) || mean_degree >= static_cast<double>(n_clients))
      throw ConfigError("mean_degree must lie in [1, n_clients)");
    if (tx_per_client.lo < 0 || tx_per_client.lo > tx_per_client.hi)
      throw ConfigError("tx_per_client must satisfy 0 <= lo <= hi");
    if (transfers_per_edge.lo < 1 || transfers_per_edge.lo > transfers_per_edge.hi)
      throw ConfigError("transfers_per_edge must satisfy 1 <= lo <= hi");
    if (w0 < 0 || w1 < 0 || w2 < 0) throw ConfigError("signal weights must be non-negative");
    if (!(base_rate > 0.0 && base_rate < 1.0)) throw ConfigError("base_rate must lie in (0, 1)");
    if (days < 1) throw ConfigError("days must be positive");
    if (risky_mcc_lo < 1 || risky_mcc_lo >= mcc_vocab) throw ConfigError("risky_mcc_lo must lie in [1, mcc_vocab)");
    if (currency_vocab < 1) throw ConfigError("currency_vocab must be positive");
  }
};

struct GroundTruth {
  std::vector<std::string> ids;
  std::vector<double> rho;
  std::vector<double> risk;  // r_i
  std::vector<double> posterior;
  std::vector<int> labels;
  double offset = 0.0;  // posterior = sigmoid(offset + r_i)
};

struct SynthData {
  TxGraph graph;
  GroundTruth truth;
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Offset c with mean(sigmoid(c + r)) = rate, by bisection.
inline double calibrate_offset(std::span<const double> r, double rate) {
  double lo = -60.0, hi = 60.0;
  auto mean_at = [&](double c) {
    double s = 0.0;
    for (double v : r) s += sigmoid(c + v);
    return s / static_cast<double>(r.size());
  };
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_at(mid) < rate ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// Undirected simple graph from a configuration model with degrees
/// 1 + Poisson(mean - 1); self-loops and multi-edges are dropped.
inline std::vector<std::pair<std::size_t, std::size_t>> configuration_edges(std::size_t n, double mean_degree,
                                                                            std::mt19937_64& rng) {
  std::poisson_distribution<int> extra(mean_degree - 1.0);
  std::vector<std::size_t> stubs;
  for (std::size_t i = 0; i < n; ++i) {
    const int d = 1 + (mean_degree > 1.0 ? extra(rng) : 0);
    for (int k = 0; k < d; ++k) stubs.push_back(i);
  }
  std::shuffle(stubs.begin(), stubs.end(), rng);
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t k = 0; k + 1 < stubs.size(); k += 2) {
    std::size_t a = stubs[k], b = stubs[k + 1];
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    edges.emplace_back(a, b);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

inline std::string client_id(std::size_t i, std::size_t n) {
  const std::size_t width = std::to_string(n - 1).size();
  std::string digits = std::to_string(i);
  return "c" + std::string(width - digits.size(), '0') + digits;
}

}  // namespace detail

/// Draws a graph, latent risks, event sequences and labels. Identical
/// configs give identical output.
inline SynthData generate(const GenConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_clients;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const auto edges = detail::configuration_edges(n, cfg.mean_degree, rng);
  std::vector<std::vector<std::size_t>> adj(n);
  for (auto [a, b] : edges) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }

  GroundTruth gt;
  gt.rho.resize(n);
  for (double& r : gt.rho) r = unif(rng);

  // r_i from own, 1-hop and exactly-2-hop latents; empty sets contribute 0.5
  gt.risk.resize(n);
  std::vector<int> mark(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    mark[i] = static_cast<int>(i);
    double s1 = 0.0;
    for (std::size_t j : adj[i]) {
      s1 += gt.rho[j];
      mark[j] = static_cast<int>(i);
    }
    double s2 = 0.0;
    std::size_t n2 = 0;
    for (std::size_t j : adj[i])
      for (std::size_t k : adj[j])
        if (mark[k] != static_cast<int>(i)) {
          mark[k] = static_cast<int>(i);
          s2 += gt.rho[k];
          ++n2;
        }
    const double m1 = adj[i].empty() ? 0.5 : s1 / static_cast<double>(adj[i].size());
    const double m2 = n2 == 0 ? 0.5 : s2 / static_cast<double>(n2);
    gt.risk[i] = cfg.w0 * gt.rho[i] + cfg.w1 * m1 + cfg.w2 * m2;
  }
  gt.offset = detail::calibrate_offset(gt.risk, cfg.base_rate);
  gt.posterior.resize(n);
  gt.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) gt.posterior[i] = detail::sigmoid(gt.offset + gt.risk[i]);
  for (std::size_t i = 0; i < n; ++i) gt.labels[i] = unif(rng) < gt.posterior[i] ? 1 : 0;

  const std::int64_t span = static_cast<std::int64_t>(cfg.days) * 86400;
  std::uniform_int_distribution<std::int64_t> day(0, cfg.days - 1);
  std::uniform_int_distribution<std::int64_t> second_of_hour(0, 3599);
  std::uniform_int_distribution<int> safe_mcc(0, cfg.risky_mcc_lo - 1), risky_mcc(cfg.risky_mcc_lo, cfg.mcc_vocab - 1);
  std::uniform_int_distribution<int> other_currency(1, std::max(1, cfg.currency_vocab - 1));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto currency = [&] { return cfg.currency_vocab > 1 && unif(rng) < 0.1 ? other_currency(rng) : 0; };
  auto sort_by_time = [](EventSequence& s) {
    std::stable_sort(s.begin(), s.end(), [](const Transaction& a, const Transaction& b) {
      return a.timestamp < b.timestamp;
    });
  };

  TxGraph g;
  gt.ids.resize(n);
  std::uniform_int_distribution<int> n_tx(cfg.tx_per_client.lo, cfg.tx_per_client.hi);
  std::uniform_int_distribution<std::int64_t> any_time(0, span - 1);
  for (std::size_t i = 0; i < n; ++i) {
    gt.ids[i] = detail::client_id(i, n);
    const double rho = gt.rho[i];
    const int k = n_tx(rng);
    EventSequence seq;
    seq.reserve(static_cast<std::size_t>(k));
    for (int e = 0; e < k; ++e) {
      Transaction t;
      t.timestamp = cfg.start_time + any_time(rng);
      t.mcc = unif(rng) < 0.05 + 0.55 * rho ? risky_mcc(rng) : safe_mcc(rng);
      t.amount = std::exp(3.5 + (0.4 + 1.2 * rho) * normal(rng));
      t.currency = currency();
      seq.push_back(t);
    }
    sort_by_time(seq);
    g.add_client(gt.ids[i], std::move(seq), gt.labels[i]);
  }

  std::uniform_int_distribution<int> n_transfers(cfg.transfers_per_edge.lo, cfg.transfers_per_edge.hi);
  std::uniform_int_distribution<std::int64_t> night_hour(0, 5), day_hour(6, 23);
  for (auto [a, b] : edges) {
    const double p_night = 0.05 + 0.7 * std::max(gt.rho[a], gt.rho[b]);
    EventSequence ab, ba;
    const int k = n_transfers(rng);
    for (int e = 0; e < k; ++e) {
      Transaction t;
      const std::int64_t hour = unif(rng) < p_night ? night_hour(rng) : day_hour(rng);
      t.timestamp = cfg.start_time + day(rng) * 86400 + hour * 3600 + second_of_hour(rng);
      t.amount = std::exp(4.0 + 0.8 * normal(rng));
      t.currency = currency();
      (unif(rng) < 0.5 ? ab : ba).push_back(t);
    }
    sort_by_time(ab);
    sort_by_time(ba);
    if (!ab.empty()) g.add_transfer(gt.ids[a], gt.ids[b], std::move(ab));
    if (!ba.empty()) g.add_transfer(gt.ids[b], gt.ids[a], std::move(ba));
  }
  return {std::move(g), std::move(gt)};
}

/// AUC of the true posterior against drawn labels.
inline double bayes_auc(const GroundTruth& gt, std::span<const int> labels) { return roc_auc(gt.posterior, labels); }

/// AUC of the posterior averaged over label draws:
/// sum_{i != j} p_i (1 - p_j) [p_i > p_j] / sum_{i != j} p_i (1 - p_j), ties
/// counting half.
inline double expected_bayes_auc(std::span<const double> posterior) {
  const detail::TieGroups tg(posterior);
  double neg_below = 0.0, num = 0.0, neg_total = 0.0;
  for (double p : posterior) neg_total += 1.0 - p;
  double den = 0.0;
  for (std::size_t g = 0; g + 1 < tg.start.size(); ++g) {
    double gp = 0.0, gn = 0.0;
    for (std::size_t k = tg.start[g]; k < tg.start[g + 1]; ++k) {
      const double p = posterior[tg.order[k]];
      gp += p;
      gn += 1.0 - p;
    }
    for (std::size_t k = tg.start[g]; k < tg.start[g + 1]; ++k) {
      const double p = posterior[tg.order[k]];
      num += p * (neg_below + 0.5 * (gn - (1.0 - p)));
      den += p * (neg_total - (1.0 - p));
    }
    neg_below += gn;
  }
  return num / den;
}

/// One {"id","rho","posterior"} object per line.
inline void write_truth_jsonl(const GroundTruth& gt, std::ostream& os) {
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    nlohmann::ordered_json j{{"id", gt.ids[i]}, {"rho", gt.rho[i]}, {"posterior", gt.posterior[i]}};
    os << j.dump() << '\n';
  }
}

}  // namespace ewsgcn
