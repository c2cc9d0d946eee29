#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <queue>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ewsgcn/graph.hpp"

namespace ewsgcn {
namespace {

EventSequence seq(std::initializer_list<std::int64_t> stamps, std::optional<int> mcc = 3) {
  EventSequence s;
  for (std::int64_t ts : stamps) s.push_back({10.0 + static_cast<double>(ts % 7), 0, mcc, ts});
  return s;
}

std::string cid(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "c%04d", i);
  return buf;
}

struct RandomGraph {
  TxGraph graph;
  std::vector<std::pair<int, int>> pairs;
};

RandomGraph random_graph(int n, int edges, std::uint64_t seed, bool reversed_insertion = false) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> node(0, n - 1);
  std::uniform_real_distribution<double> amt(0.0, 500.0);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::vector<EventSequence> purchases(n);
  std::vector<std::optional<int>> labels(n);
  for (int i = 0; i < n; ++i) {
    std::int64_t ts = 1'600'000'000 + static_cast<std::int64_t>(rng() % 100000);
    const int len = static_cast<int>(rng() % 6);
    for (int k = 0; k < len; ++k) {
      ts += static_cast<std::int64_t>(rng() % 50000);
      const bool transferish = rng() % 5 == 0;
      purchases[i].push_back({amt(rng), static_cast<std::int32_t>(rng() % 3),
                              transferish ? std::nullopt : std::optional<std::int32_t>(rng() % 40), ts});
    }
    if (rng() % 4) labels[i] = static_cast<int>(rng() % 2);
  }
  std::map<std::pair<int, int>, EventSequence> transfers;
  for (int e = 0; e < edges; ++e) {
    const int a = node(rng), b = node(rng);
    if (a == b || transfers.count({a, b})) continue;
    EventSequence s;
    std::int64_t ts = 1'600'000'000;
    for (int k = 0, len = 1 + static_cast<int>(rng() % 3); k < len; ++k) {
      ts += static_cast<std::int64_t>(rng() % 10000);
      s.push_back({amt(rng), 1, std::nullopt, ts});
    }
    transfers.emplace(std::make_pair(a, b), s);
  }
  if (reversed_insertion) std::reverse(order.begin(), order.end());
  RandomGraph out;
  for (int i : order) out.graph.add_client(cid(i), purchases[i], labels[i]);
  std::vector<std::pair<std::pair<int, int>, EventSequence>> tl(transfers.begin(), transfers.end());
  if (reversed_insertion) std::reverse(tl.begin(), tl.end());
  for (auto& [k, s] : tl) {
    out.graph.add_transfer(cid(k.first), cid(k.second), s);
    out.pairs.push_back(k);
  }
  return out;
}

// Independent BFS over an undirected pair list.
std::set<std::string> brute_force_ball(const std::vector<std::pair<int, int>>& pairs, int n, int target, int depth) {
  std::vector<std::vector<char>> adj(n, std::vector<char>(n, 0));
  for (auto [a, b] : pairs) adj[a][b] = adj[b][a] = 1;
  std::vector<int> dist(n, -1);
  dist[target] = 0;
  for (int d = 0; d < depth; ++d)
    for (int u = 0; u < n; ++u)
      if (dist[u] == d)
        for (int v = 0; v < n; ++v)
          if (adj[u][v] && dist[v] < 0) dist[v] = d + 1;
  std::set<std::string> out;
  for (int v = 0; v < n; ++v)
    if (dist[v] >= 0) out.insert(cid(v));
  return out;
}

TEST(ExtractEgo, IsolatedClient) {
  TxGraph g;
  g.add_client("solo", seq({1, 2}));
  g.add_client("other", seq({1}));
  EgoSubgraph s = extract_ego(g, "solo");
  EXPECT_EQ(s.size(), 1u);
  EXPECT_TRUE(s.edges.empty());
  EXPECT_EQ(s.target(), "solo");
}

TEST(ExtractEgo, Star) {
  TxGraph g;
  for (const char* id : {"t", "x", "y", "z"}) g.add_client(id, seq({1}));
  g.add_transfer("t", "x", seq({5}, std::nullopt));
  g.add_transfer("y", "t", seq({6}, std::nullopt));
  g.add_transfer("t", "z", seq({7}, std::nullopt));
  EgoSubgraph s = extract_ego(g, "t");
  EXPECT_EQ(s.size(), 4u);
  EXPECT_EQ(s.edges.size(), 3u);
  EXPECT_EQ(s.nodes, (std::vector<std::string>{"t", "x", "y", "z"}));
  EXPECT_EQ(s.neighbors[0], (std::vector<std::size_t>{1, 2, 3}));
}

TEST(ExtractEgo, PathStopsAtDepthTwo) {
  TxGraph g;
  for (int i = 0; i < 4; ++i) g.add_client(cid(i), seq({1}));
  g.add_transfer(cid(0), cid(1), seq({1}, std::nullopt));
  g.add_transfer(cid(1), cid(2), seq({1}, std::nullopt));
  g.add_transfer(cid(2), cid(3), seq({1}, std::nullopt));
  EgoSubgraph s = extract_ego(g, cid(0));
  const std::set<std::string> got(s.nodes.begin(), s.nodes.end());
  EXPECT_EQ(got, brute_force_ball({{0, 1}, {1, 2}, {2, 3}}, 4, 0, 2));
  EXPECT_EQ(got, (std::set<std::string>{cid(0), cid(1), cid(2)}));
}

TEST(ExtractEgo, UnknownTargetThrows) {
  TxGraph g;
  EXPECT_THROW(extract_ego(g, "nope"), std::invalid_argument);
}

TEST(ExtractEgo, MatchesBruteForceOnRandomGraphs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RandomGraph rg = random_graph(40, 50, seed);
    for (int target = 0; target < 40; target += 3) {
      EgoSubgraph s = extract_ego(rg.graph, cid(target));
      EXPECT_EQ(std::set<std::string>(s.nodes.begin(), s.nodes.end()), brute_force_ball(rg.pairs, 40, target, 2));
      EXPECT_EQ(s.target(), cid(target));
      EXPECT_TRUE(std::is_sorted(s.nodes.begin() + 1, s.nodes.end()));
      for (int h : s.hop) EXPECT_LE(h, 2);
      for (const SubEdge& e : s.edges) EXPECT_FALSE(e.events.empty());
    }
  }
}

TEST(ExtractEgo, IndependentOfInsertionOrder) {
  RandomGraph a = random_graph(30, 45, 99, false);
  RandomGraph b = random_graph(30, 45, 99, true);
  for (int target = 0; target < 30; ++target) EXPECT_EQ(extract_ego(a.graph, cid(target)), extract_ego(b.graph, cid(target)));
}

TEST(ExtractEgo, BothDirectionsAreMergedByTimestamp) {
  TxGraph g;
  g.add_client("a", {});
  g.add_client("b", {});
  g.add_transfer("a", "b", seq({10, 30}, std::nullopt));
  g.add_transfer("b", "a", seq({20}, std::nullopt));
  EgoSubgraph s = extract_ego(g, "b");
  ASSERT_EQ(s.edges.size(), 1u);
  // node 0 is b, so the stored orientation b->a makes a->b events negative
  EXPECT_EQ(s.edges[0].a, 0u);
  EXPECT_EQ(s.edges[0].a_to_b, (std::vector<std::int8_t>{-1, 1, -1}));
  EXPECT_EQ(s.edges[0].events[1].timestamp, 20);
}

TEST(ExtractEgo, NodeCapIsRespected) {
  TxGraph g;
  g.add_client("hub", seq({1}));
  for (int i = 0; i < 30; ++i) {
    g.add_client(cid(i), seq({1}));
    g.add_transfer("hub", cid(i), seq({1}, std::nullopt));
    for (int k = 0; k < 30; ++k) {
      const std::string leaf = cid(1000 + i * 30 + k);
      g.add_client(leaf, seq({1}));
      g.add_transfer(cid(i), leaf, seq({1}, std::nullopt));
    }
  }
  EgoSubgraph s = extract_ego(g, "hub");
  EXPECT_EQ(s.size(), 500u);
  for (int h : s.hop) EXPECT_LE(h, 2);
}

EgoSubgraph wide_star(int n_neighbors) {
  TxGraph g;
  g.add_client("t", seq({1, 2, 3}));
  for (int i = 0; i < n_neighbors; ++i) {
    g.add_client(cid(i), seq({4, 5}));
    g.add_transfer("t", cid(i), seq({7, 8, 9}, std::nullopt));
  }
  return extract_ego(g, "t");
}

TEST(SampleAugment, FewNeighborsAllKept) {
  EgoSubgraph s = wide_star(3);
  SamplerConfig cfg;
  cfg.tx_drop_fraction = {0.0, 0.0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.seed = seed;
    EXPECT_EQ(sample_augment(s, cfg), s);
  }
}

TEST(SampleAugment, IdentityWhenCapsSlackAndNoDropping) {
  RandomGraph rg = random_graph(40, 60, 5);
  SamplerConfig cfg;
  cfg.tx_drop_fraction = {0.0, 0.0};
  for (int target = 0; target < 40; ++target) {
    EgoSubgraph s = extract_ego(rg.graph, cid(target));
    cfg.seed = static_cast<std::uint64_t>(target);
    EXPECT_EQ(sample_augment(s, cfg), s);
  }
}

TEST(SampleAugment, HopOneFanoutWithinRange) {
  EgoSubgraph s = wide_star(100);
  SamplerConfig cfg;
  cfg.tx_drop_fraction = {0.0, 0.0};
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    cfg.seed = seed;
    EgoSubgraph a = sample_augment(s, cfg);
    const auto hop1 = std::count(a.hop.begin(), a.hop.end(), 1);
    ASSERT_GE(hop1, 20) << seed;
    ASSERT_LE(hop1, 25) << seed;
    ASSERT_FALSE(a.node_seqs[0].empty());
  }
}

TEST(SampleAugment, HopTwoFanoutPerHopOneNode) {
  TxGraph g;
  g.add_client("t", seq({1}));
  g.add_client("mid", seq({1}));
  g.add_transfer("t", "mid", seq({1}, std::nullopt));
  for (int i = 0; i < 60; ++i) {
    g.add_client(cid(i), seq({1}));
    g.add_transfer("mid", cid(i), seq({1}, std::nullopt));
  }
  EgoSubgraph s = extract_ego(g, "t");
  SamplerConfig cfg;
  cfg.tx_drop_fraction = {0.0, 0.0};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    cfg.seed = seed;
    EgoSubgraph a = sample_augment(s, cfg);
    const auto hop2 = std::count(a.hop.begin(), a.hop.end(), 2);
    ASSERT_GE(hop2, 15);
    ASSERT_LE(hop2, 20);
  }
}

TEST(SampleAugment, DeterministicPerSeedAndEdgesNonEmpty) {
  RandomGraph rg = random_graph(60, 150, 8);
  SamplerConfig cfg;
  cfg.tx_drop_fraction = {0.0, 0.9};
  for (int target = 0; target < 60; target += 5) {
    EgoSubgraph s = extract_ego(rg.graph, cid(target));
    cfg.seed = 1234 + static_cast<std::uint64_t>(target);
    EgoSubgraph a = sample_augment(s, cfg);
    EXPECT_EQ(a, sample_augment(s, cfg));
    EXPECT_EQ(a.target(), s.target());
    if (!s.node_seqs[0].empty()) EXPECT_FALSE(a.node_seqs[0].empty());
    for (const SubEdge& e : a.edges) EXPECT_FALSE(e.events.empty());
    for (int h : a.hop) EXPECT_LE(h, 2);
  }
}

TEST(SampleAugment, RejectsBadRanges) {
  EgoSubgraph s = wide_star(2);
  SamplerConfig cfg;
  cfg.hop1_fanout = {5, 3};
  EXPECT_THROW(sample_augment(s, cfg), ConfigError);
}

TEST(TruncateFanout, KeepsFirstByIdOrder) {
  EgoSubgraph s = wide_star(40);
  EgoSubgraph t = truncate_fanout(s);
  EXPECT_EQ(t.size(), 26u);
  EXPECT_EQ(t.nodes[25], cid(24));
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

TEST(Jsonl, EmptyGraphIsHeaderOnly) {
  std::ostringstream os;
  write_jsonl(TxGraph{}, os);
  EXPECT_EQ(lines(os.str()).size(), 1u);
}

TEST(Jsonl, TwoNodesOneTransfer) {
  TxGraph g;
  g.add_client("a", seq({1, 2}), 1);
  g.add_client("b", seq({3}, std::nullopt));
  g.add_transfer("a", "b", seq({4}, std::nullopt));
  std::ostringstream os;
  write_jsonl(g, os);
  const auto ls = lines(os.str());
  ASSERT_EQ(ls.size(), 4u);
  EXPECT_EQ(ls[1].rfind(R"({"type":"node","id":"a","label":1,"tx":[{"amt":11.0,"cur":0,"mcc":3,"ts":1})", 0), 0u) << ls[1];
  EXPECT_NE(ls[2].find(R"("label":null)"), std::string::npos);
  EXPECT_NE(ls[3].find(R"("mcc":null)"), std::string::npos);
  EXPECT_EQ(ls[3].rfind(R"({"type":"edge","src":"a","dst":"b")", 0), 0u);
}

TEST(Jsonl, RandomGraphRoundTripsBitExactly) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RandomGraph rg = random_graph(50, 120, seed);
    std::ostringstream os;
    write_jsonl(rg.graph, os);
    std::istringstream is(os.str());
    TxGraph back = read_jsonl(is);
    EXPECT_EQ(back, rg.graph);
    std::ostringstream os2;
    write_jsonl(back, os2);
    EXPECT_EQ(os.str(), os2.str());
  }
}

TEST(Jsonl, SubgraphRoundTrips) {
  RandomGraph rg = random_graph(50, 120, 3);
  SamplerConfig cfg;
  for (int target = 0; target < 50; target += 7) {
    cfg.seed = static_cast<std::uint64_t>(target);
    EgoSubgraph s = sample_augment(extract_ego(rg.graph, cid(target)), cfg);
    std::ostringstream os;
    write_jsonl(s, os);
    std::istringstream is(os.str());
    EXPECT_EQ(read_subgraph_jsonl(is), s);
  }
}

std::size_t error_line(const std::string& text) {
  std::istringstream is(text);
  try {
    read_jsonl(is);
  } catch (const SchemaError& e) {
    return e.line();
  }
  return 0;
}

TEST(Jsonl, SchemaViolationsReportLineNumbers) {
  const std::string header = R"({"type":"header","format":"ewsgcn-txgraph","version":1})";
  const std::string node_a = R"({"type":"node","id":"a","label":0,"tx":[]})";
  EXPECT_EQ(error_line(header + "\n" + node_a + "\n" + R"({"type":"edge","src":"a","dst":"zz","tx":[{"amt":1,"cur":0,"mcc":null,"ts":1}]})"), 3u);
  EXPECT_EQ(error_line(header + "\n" + R"({"type":"node","id":"a","tx":[{"amt":"x","cur":0,"ts":1}]})"), 2u);
  EXPECT_EQ(error_line(header + "\n" + node_a + "\n" + node_a), 3u);
  EXPECT_EQ(error_line(header + "\nnot json"), 2u);
  EXPECT_EQ(error_line(header + "\n" + R"({"type":"vertex"})"), 2u);
  EXPECT_EQ(error_line(header + "\n" + R"({"type":"node","id":"a","label":0,"tx":[{"amt":1,"cur":0,"ts":5},{"amt":1,"cur":0,"ts":2}]})"), 2u);
  EXPECT_EQ(error_line(header + "\n" + node_a + "\n" + R"({"type":"node","id":"b","tx":[]})" + "\n" +
                       R"({"type":"edge","src":"a","dst":"b","tx":[]})"), 4u);
}

}  // namespace
}  // namespace ewsgcn
