#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "ewsgcn/metrics.hpp"

using namespace ewsgcn;

namespace {

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

// Scores from a binormal model: positives shifted by `shift`.
void binormal(std::size_t n, double shift, std::uint64_t seed, std::vector<double>& s, std::vector<int>& y) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  s.clear();
  y.clear();
  for (std::size_t i = 0; i < n; ++i) {
    const int label = i % 10 == 0 ? 1 : 0;
    y.push_back(label);
    s.push_back(nd(rng) + shift * label);
  }
}

}  // namespace

TEST(RocAuc, WorkedExample) {
  EXPECT_DOUBLE_EQ(roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
}

TEST(RocAuc, PerfectAndTied) {
  EXPECT_EQ(roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(roc_auc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{0, 1, 1}), 0.5);
}

TEST(RocAuc, SingleClassThrows) {
  EXPECT_THROW(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), std::invalid_argument);
  EXPECT_THROW(roc_auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), std::invalid_argument);
  EXPECT_THROW(auc_se(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}, 100), std::invalid_argument);
}

TEST(RocAuc, MatchesBruteForceWithTies) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> len(2, 12), level(0, 4), bit(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = len(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = level(rng) * 0.25;
      y[i] = bit(rng);
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(roc_auc(s, y), brute_auc(s, y), 1e-12);
  }
}

TEST(RocAuc, InvariantUnderMonotoneTransform) {
  std::vector<double> s;
  std::vector<int> y;
  binormal(300, 1.0, 2, s, y);
  std::vector<double> t;
  for (double v : s) t.push_back(std::exp(3.0 * v) + 7.0);
  EXPECT_DOUBLE_EQ(roc_auc(s, y), roc_auc(t, y));
  std::vector<double> neg;
  for (double v : s) neg.push_back(-v);
  EXPECT_NEAR(roc_auc(s, y) + roc_auc(neg, y), 1.0, 1e-12);
}

TEST(AucSe, SeparatedSampleHasNearZeroSe) {
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 1000; ++i) {
    y.push_back(i % 2);
    s.push_back(i % 2 + 0.001 * i);
  }
  EXPECT_LT(auc_se(s, y, 200, 3), 1e-12);
}

TEST(AucSe, ShrinksLikeInverseSqrtN) {
  std::vector<double> s;
  std::vector<int> y;
  std::vector<double> se;
  for (std::size_t n : {500u, 5000u, 50000u}) {
    binormal(n, 1.75, 4, s, y);
    se.push_back(auc_se(s, y, 200, 5));
  }
  // ratio sqrt(10) ~ 3.16 per step
  EXPECT_GT(se[0] / se[1], 2.2);
  EXPECT_LT(se[0] / se[1], 4.5);
  EXPECT_GT(se[1] / se[2], 2.2);
  EXPECT_LT(se[1] / se[2], 4.5);
  // n = 50000 at AUC ~0.89: SE of order 1e-3
  EXPECT_GT(se[2], 5e-4);
  EXPECT_LT(se[2], 5e-3);
}

TEST(AucSe, DeterministicAndNeedsEnoughResamples) {
  std::vector<double> s;
  std::vector<int> y;
  binormal(400, 1.0, 6, s, y);
  EXPECT_EQ(auc_se(s, y, 100, 7), auc_se(s, y, 100, 7));
  EXPECT_THROW(auc_se(s, y, 99, 7), std::invalid_argument);
}

TEST(RocCurve, EndpointsAndCsv) {
  auto c = roc_curve(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1});
  EXPECT_EQ(c.front().fpr, 0.0);
  EXPECT_EQ(c.back().fpr, 1.0);
  EXPECT_EQ(c.back().tpr, 1.0);
  // trapezoid area equals the AUC
  double area = 0.0;
  for (std::size_t k = 1; k < c.size(); ++k) area += (c[k].fpr - c[k - 1].fpr) * (c[k].tpr + c[k - 1].tpr) / 2;
  EXPECT_NEAR(area, 0.75, 1e-12);
  std::ostringstream os;
  write_roc_csv(os, c);
  EXPECT_EQ(os.str().substr(0, 18), "fpr,tpr,threshold\n");
}

TEST(Reports, ScoredRunJsonAndText) {
  ScoredRun r = ScoredRun::score("ews_gcn", {0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}, 100, 1, "fnv1a64:0");
  auto j = r.to_json();
  EXPECT_DOUBLE_EQ(j["auc"].get<double>(), 0.75);
  EXPECT_TRUE(j.contains("auc_se"));
  const std::string t = text_report({r});
  EXPECT_NE(t.find("ews_gcn"), std::string::npos);
  EXPECT_NE(t.find("0.7500"), std::string::npos);
}

TEST(Reports, FingerprintIsStable) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  nlohmann::json a{{"x", 1}, {"y", 2}}, b{{"y", 2}, {"x", 1}};
  EXPECT_EQ(fingerprint(a), fingerprint(b));
  EXPECT_NE(fingerprint(a), fingerprint(nlohmann::json{{"x", 2}}));
}

TEST(Reports, DepthRowSummary) {
  DepthRow r;
  r.layers = 2;
  r.aucs = {0.7, 0.8};
  r.summarize();
  EXPECT_NEAR(r.mean_auc, 0.75, 1e-15);
  EXPECT_NEAR(r.se, 0.05, 1e-12);
  std::ostringstream os;
  write_depth_csv(os, {r});
  EXPECT_EQ(os.str().substr(0, 17), "layers,mean_auc,s");
}
