#pragma once

// ROC AUC, bootstrap standard errors and run reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace ewsgcn {

namespace detail {

inline void check_binary(std::span<const double> scores, std::span<const int> labels, std::size_t& pos,
                         std::size_t& neg) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("roc: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(labels.size()) + " labels");
  pos = neg = 0;
  for (int y : labels) {
    if (y == 1) ++pos;
    else if (y == 0) ++neg;
    else throw std::invalid_argument("roc: labels must be 0 or 1");
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("roc: both classes must be present");
}

/// Scores sorted ascending, split into runs of equal score.
struct TieGroups {
  std::vector<std::size_t> order;
  std::vector<std::size_t> start;  // group g spans order[start[g] .. start[g+1])

  explicit TieGroups(std::span<const double> scores) : order(scores.size()) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    for (std::size_t k = 0; k < order.size(); ++k)
      if (k == 0 || scores[order[k]] != scores[order[k - 1]]) start.push_back(k);
    start.push_back(order.size());
  }
};

/// Mann-Whitney AUC with per-example multiplicities.
inline double weighted_auc(const TieGroups& tg, std::span<const int> labels, std::span<const double> weight) {
  double neg_below = 0.0, wins = 0.0, pos_total = 0.0;
  for (std::size_t g = 0; g + 1 < tg.start.size(); ++g) {
    double wp = 0.0, wn = 0.0;
    for (std::size_t k = tg.start[g]; k < tg.start[g + 1]; ++k) {
      const std::size_t i = tg.order[k];
      (labels[i] == 1 ? wp : wn) += weight[i];
    }
    wins += wp * (neg_below + 0.5 * wn);
    neg_below += wn;
    pos_total += wp;
  }
  return wins / (pos_total * neg_below);
}

}  // namespace detail

/// P(score+ > score-) + 0.5 P(tie), in O(n log n).
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  std::size_t pos, neg;
  detail::check_binary(scores, labels, pos, neg);
  const std::vector<double> ones(scores.size(), 1.0);
  return detail::weighted_auc(detail::TieGroups(scores), labels, ones);
}

/// Standard deviation of the AUC over stratified bootstrap resamples:
/// positives and negatives are resampled separately, keeping class counts.
inline double auc_se(std::span<const double> scores, std::span<const int> labels, std::size_t n_boot = 1000,
                     std::uint64_t seed = 0) {
  if (n_boot < 100) throw std::invalid_argument("auc_se: n_boot must be at least 100");
  std::size_t pos, neg;
  detail::check_binary(scores, labels, pos, neg);
  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos_idx : neg_idx).push_back(i);
  const detail::TieGroups tg(scores);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_pos(0, pos - 1), pick_neg(0, neg - 1);
  std::vector<double> weight(scores.size());
  double s = 0.0, s2 = 0.0;
  for (std::size_t b = 0; b < n_boot; ++b) {
    std::fill(weight.begin(), weight.end(), 0.0);
    for (std::size_t k = 0; k < pos; ++k) weight[pos_idx[pick_pos(rng)]] += 1.0;
    for (std::size_t k = 0; k < neg; ++k) weight[neg_idx[pick_neg(rng)]] += 1.0;
    const double a = detail::weighted_auc(tg, labels, weight);
    s += a;
    s2 += a * a;
  }
  const double n = static_cast<double>(n_boot);
  const double mean = s / n;
  return std::sqrt(std::max(0.0, (s2 - n * mean * mean) / (n - 1.0)));
}

struct RocPoint {
  double fpr;
  double tpr;
  double threshold;
};

/// ROC curve from the highest threshold down; the first point is (0, 0) at
/// +inf.
inline std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  std::size_t pos, neg;
  detail::check_binary(scores, labels, pos, neg);
  const detail::TieGroups tg(scores);
  std::vector<RocPoint> out{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  double tp = 0, fp = 0;
  for (std::size_t g = tg.start.size() - 1; g-- > 0;) {
    for (std::size_t k = tg.start[g]; k < tg.start[g + 1]; ++k) (labels[tg.order[k]] == 1 ? tp : fp) += 1.0;
    out.push_back({fp / static_cast<double>(neg), tp / static_cast<double>(pos), scores[tg.order[tg.start[g]]]});
  }
  return out;
}

inline void write_roc_csv(std::ostream& os, const std::vector<RocPoint>& curve) {
  os << "fpr,tpr,threshold\n";
  os << std::setprecision(17);
  for (const RocPoint& p : curve) os << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
}

// ---------------------------------------------------------------------------
// Fingerprints

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Stable hash of a JSON document (keys sorted by the dump).
inline std::string fingerprint(const nlohmann::json& j) { return "fnv1a64:" + hex64(fnv1a64(j.dump())); }

// ---------------------------------------------------------------------------
// Reports

struct ScoredRun {
  std::string name;
  std::vector<double> scores;
  std::vector<int> labels;
  double auc = 0.5;
  double auc_se = 0.0;
  std::string fingerprint;

  static ScoredRun score(std::string name, std::vector<double> scores, std::vector<int> labels, std::size_t n_boot,
                         std::uint64_t seed, std::string fp) {
    ScoredRun r{std::move(name), std::move(scores), std::move(labels), 0.0, 0.0, std::move(fp)};
    r.auc = roc_auc(r.scores, r.labels);
    r.auc_se = ewsgcn::auc_se(r.scores, r.labels, n_boot, seed);
    return r;
  }

  nlohmann::ordered_json to_json() const {
    std::size_t pos = 0;
    for (int y : labels) pos += y == 1;
    return {{"name", name},       {"auc", auc},           {"auc_se", auc_se}, {"n", scores.size()},
            {"positives", pos},   {"fingerprint", fingerprint}};
  }
};

inline std::string format_fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

/// Aligned text table: one row per run.
inline std::string text_report(const std::vector<ScoredRun>& runs) {
  std::size_t w = 5;
  for (const ScoredRun& r : runs) w = std::max(w, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "model" << "  " << std::right << std::setw(8) << "auc"
     << "  " << std::setw(8) << "se" << "  " << std::setw(7) << "n" << '\n';
  for (const ScoredRun& r : runs)
    os << std::left << std::setw(static_cast<int>(w)) << r.name << "  " << std::right << std::setw(8)
       << format_fixed(r.auc, 4) << "  " << std::setw(8) << format_fixed(r.auc_se, 4) << "  " << std::setw(7)
       << r.scores.size() << '\n';
  return os.str();
}

struct DepthRow {
  std::size_t layers = 0;
  std::vector<double> aucs;  // one per seed
  std::vector<double> ses;   // bootstrap SE per seed
  double mean_auc = 0.0;
  double se = 0.0;

  /// Mean over seeds; SE is the standard error of that mean, or the bootstrap
  /// SE when there is a single seed.
  void summarize() {
    if (aucs.empty()) throw std::invalid_argument("depth row without runs");
    const double n = static_cast<double>(aucs.size());
    mean_auc = std::accumulate(aucs.begin(), aucs.end(), 0.0) / n;
    if (aucs.size() == 1) {
      se = ses.empty() ? 0.0 : ses.front();
      return;
    }
    double ss = 0.0;
    for (double a : aucs) ss += (a - mean_auc) * (a - mean_auc);
    se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }

  nlohmann::ordered_json to_json() const {
    return {{"layers", layers}, {"mean_auc", mean_auc}, {"se", se}, {"aucs", aucs}, {"auc_se", ses}};
  }
};

inline void write_depth_csv(std::ostream& os, const std::vector<DepthRow>& rows) {
  os << "layers,mean_auc,se\n" << std::setprecision(17);
  for (const DepthRow& r : rows) os << r.layers << ',' << r.mean_auc << ',' << r.se << '\n';
}

inline std::string depth_table(const std::vector<DepthRow>& rows) {
  std::ostringstream os;
  os << std::setw(6) << "L" << "  " << std::setw(8) << "auc" << "  " << std::setw(8) << "se" << '\n';
  for (const DepthRow& r : rows)
    os << std::setw(6) << r.layers << "  " << std::setw(8) << format_fixed(r.mean_auc, 4) << "  " << std::setw(8)
       << format_fixed(r.se, 4) << '\n';
  return os.str();
}

}  // namespace ewsgcn
