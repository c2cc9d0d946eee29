#pragma once

// Transaction graph, depth-2 ego subgraphs around a target client, training
// augmentation, and the JSONL record format.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <queue>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ewsgcn/errors.hpp"
#include "ewsgcn/transaction.hpp"
#include "json.hpp"

namespace ewsgcn {

struct Client {
  std::string id;
  EventSequence purchases;
  std::optional<int> label;

  friend bool operator==(const Client&, const Client&) = default;
};

/// Directed multigraph of clients. One event sequence per ordered pair; the
/// neighbourhood relation ignores direction.
class TxGraph {
 public:
  using TransferMap = std::map<std::pair<std::size_t, std::size_t>, EventSequence>;

  std::size_t add_client(std::string id, EventSequence purchases, std::optional<int> label = {}) {
    if (index_.count(id)) throw std::invalid_argument("duplicate client id " + id);
    if (!is_time_ordered(purchases)) throw std::invalid_argument("purchases of " + id + " not time-ordered");
    if (label && *label != 0 && *label != 1) throw std::invalid_argument("label must be 0 or 1");
    const std::size_t i = clients_.size();
    index_.emplace(id, i);
    clients_.push_back({std::move(id), std::move(purchases), label});
    adjacency_.emplace_back();
    return i;
  }

  void add_transfer(const std::string& src, const std::string& dst, EventSequence events) {
    const auto s = find(src);
    const auto d = find(dst);
    if (!s || !d) throw std::invalid_argument("transfer endpoint not found: " + (s ? dst : src));
    if (*s == *d) throw std::invalid_argument("self transfer on " + src);
    if (events.empty()) throw std::invalid_argument("empty transfer sequence " + src + "->" + dst);
    if (!is_time_ordered(events)) throw std::invalid_argument("transfers " + src + "->" + dst + " not time-ordered");
    auto [it, inserted] = transfers_.emplace(std::make_pair(*s, *d), std::move(events));
    if (!inserted) throw std::invalid_argument("duplicate transfer " + src + "->" + dst);
    adjacency_[*s].insert(*d);
    adjacency_[*d].insert(*s);
  }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::vector<Client>& clients() const noexcept { return clients_; }
  const Client& client(std::size_t i) const { return clients_.at(i); }
  std::size_t size() const noexcept { return clients_.size(); }
  const TransferMap& transfers() const noexcept { return transfers_; }
  const std::set<std::size_t>& adjacent(std::size_t i) const { return adjacency_.at(i); }

  const EventSequence* transfer(std::size_t src, std::size_t dst) const {
    auto it = transfers_.find({src, dst});
    return it == transfers_.end() ? nullptr : &it->second;
  }

  friend bool operator==(const TxGraph& a, const TxGraph& b) {
    return a.clients_ == b.clients_ && a.transfers_ == b.transfers_;
  }

 private:
  std::vector<Client> clients_;
  std::unordered_map<std::string, std::size_t> index_;
  TransferMap transfers_;
  std::vector<std::set<std::size_t>> adjacency_;
};

/// Undirected edge of a subgraph. Transfers of both directions are merged by
/// timestamp; `a_to_b[k]` is +1 when event k flowed from node a to node b.
struct SubEdge {
  std::size_t a = 0;
  std::size_t b = 0;  // a < b
  EventSequence events;
  std::vector<std::int8_t> a_to_b;

  friend bool operator==(const SubEdge&, const SubEdge&) = default;
};

/// Neighbourhood of one client. Node 0 is the scoring target.
struct EgoSubgraph {
  std::vector<std::string> nodes;
  std::vector<EventSequence> node_seqs;
  std::vector<std::optional<int>> labels;
  std::vector<SubEdge> edges;                       // sorted by (a, b)
  std::vector<std::vector<std::size_t>> neighbors;  // N_i, ascending
  std::vector<int> hop;                             // distance to node 0

  std::size_t size() const noexcept { return nodes.size(); }
  const std::string& target() const { return nodes.front(); }
  std::optional<int> target_label() const { return labels.front(); }

  friend bool operator==(const EgoSubgraph&, const EgoSubgraph&) = default;
};

/// One orientation of a SubEdge as seen from `from`.
struct DirectedEdge {
  std::size_t from = 0;
  std::size_t to = 0;
  std::size_t edge = 0;
  std::int8_t sign = 1;  // multiplies SubEdge::a_to_b
};

/// Both orientations of every edge, grouped by `from` in node order.
inline std::vector<DirectedEdge> directed_edges(const EgoSubgraph& sub) {
  std::vector<DirectedEdge> out;
  out.reserve(sub.edges.size() * 2);
  for (std::size_t e = 0; e < sub.edges.size(); ++e) {
    out.push_back({sub.edges[e].a, sub.edges[e].b, e, 1});
    out.push_back({sub.edges[e].b, sub.edges[e].a, e, -1});
  }
  std::stable_sort(out.begin(), out.end(), [](const DirectedEdge& x, const DirectedEdge& y) {
    return x.from != y.from ? x.from < y.from : x.to < y.to;
  });
  return out;
}

namespace detail {

inline void merge_pair(const EventSequence* fwd, const EventSequence* back, SubEdge& out) {
  const EventSequence empty;
  const EventSequence& f = fwd ? *fwd : empty;
  const EventSequence& r = back ? *back : empty;
  std::size_t i = 0, j = 0;
  while (i < f.size() || j < r.size()) {
    const bool take_f = j == r.size() || (i < f.size() && f[i].timestamp <= r[j].timestamp);
    out.events.push_back(take_f ? f[i++] : r[j++]);
    out.a_to_b.push_back(take_f ? 1 : -1);
  }
}

/// Recomputes neighbour lists and hop distances; drops nodes that are no
/// longer connected to node 0 (or lie beyond max_hop when it is >= 0) and
/// reindexes.
inline void finalize(EgoSubgraph& sub, int max_hop = -1) {
  const std::size_t n = sub.size();
  std::vector<std::vector<std::size_t>> adj(n);
  for (const SubEdge& e : sub.edges) {
    adj[e.a].push_back(e.b);
    adj[e.b].push_back(e.a);
  }
  std::vector<int> dist(n, -1);
  if (n > 0) {
    std::queue<std::size_t> q;
    dist[0] = 0;
    q.push(0);
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop();
      for (std::size_t v : adj[u]) {
        if (dist[v] < 0) {
          dist[v] = dist[u] + 1;
          q.push(v);
        }
      }
    }
  }
  std::vector<std::size_t> remap(n, SIZE_MAX);
  EgoSubgraph out;
  for (std::size_t i = 0; i < n; ++i) {
    if (dist[i] < 0 || (max_hop >= 0 && dist[i] > max_hop)) continue;
    remap[i] = out.nodes.size();
    out.nodes.push_back(std::move(sub.nodes[i]));
    out.node_seqs.push_back(std::move(sub.node_seqs[i]));
    out.labels.push_back(sub.labels[i]);
    out.hop.push_back(dist[i]);
  }
  for (SubEdge& e : sub.edges) {
    if (remap[e.a] == SIZE_MAX || remap[e.b] == SIZE_MAX) continue;
    e.a = remap[e.a];
    e.b = remap[e.b];
    if (e.a > e.b) {
      std::swap(e.a, e.b);
      for (auto& d : e.a_to_b) d = static_cast<std::int8_t>(-d);
    }
    out.edges.push_back(std::move(e));
  }
  std::sort(out.edges.begin(), out.edges.end(),
            [](const SubEdge& x, const SubEdge& y) { return std::tie(x.a, x.b) < std::tie(y.a, y.b); });
  out.neighbors.assign(out.size(), {});
  for (const SubEdge& e : out.edges) {
    out.neighbors[e.a].push_back(e.b);
    out.neighbors[e.b].push_back(e.a);
  }
  for (auto& nb : out.neighbors) std::sort(nb.begin(), nb.end());
  sub = std::move(out);
}

/// Builds a subgraph from graph indices, target first, with all induced edges.
inline EgoSubgraph induced(const TxGraph& g, const std::vector<std::size_t>& members) {
  EgoSubgraph sub;
  std::unordered_map<std::size_t, std::size_t> pos;
  for (std::size_t k = 0; k < members.size(); ++k) {
    const Client& c = g.client(members[k]);
    pos.emplace(members[k], k);
    sub.nodes.push_back(c.id);
    sub.node_seqs.push_back(c.purchases);
    sub.labels.push_back(c.label);
  }
  for (std::size_t k = 0; k < members.size(); ++k) {
    const std::size_t u = members[k];
    for (std::size_t v : g.adjacent(u)) {
      auto it = pos.find(v);
      if (it == pos.end() || it->second <= k) continue;
      SubEdge e;
      e.a = k;
      e.b = it->second;
      merge_pair(g.transfer(u, v), g.transfer(v, u), e);
      sub.edges.push_back(std::move(e));
    }
  }
  finalize(sub);
  return sub;
}

}  // namespace detail

struct ExtractOptions {
  int depth = 2;
  std::size_t max_nodes = 500;
};

/// Breadth-first neighbourhood of `target` up to `depth` hops, direction
/// ignored. Nodes are ordered target first, then by id. If the neighbourhood
/// exceeds `max_nodes`, nodes are kept hop by hop in id order.
inline EgoSubgraph extract_ego(const TxGraph& g, const std::string& target, ExtractOptions opt = {}) {
  const auto t = g.find(target);
  if (!t) throw std::invalid_argument("unknown target client " + target);
  std::map<std::size_t, int> dist{{*t, 0}};
  std::vector<std::vector<std::size_t>> rings{{*t}};
  for (int d = 1; d <= opt.depth; ++d) {
    std::vector<std::size_t> next;
    for (std::size_t u : rings.back())
      for (std::size_t v : g.adjacent(u))
        if (dist.emplace(v, d).second) next.push_back(v);
    std::sort(next.begin(), next.end(),
              [&](std::size_t a, std::size_t b) { return g.client(a).id < g.client(b).id; });
    if (next.empty()) break;
    rings.push_back(std::move(next));
  }
  std::vector<std::size_t> members{*t};
  std::set<std::size_t> kept{*t};
  for (std::size_t d = 1; d < rings.size(); ++d) {
    for (std::size_t v : rings[d]) {
      if (members.size() >= opt.max_nodes) break;
      bool reachable = false;
      for (std::size_t u : g.adjacent(v)) reachable = reachable || (kept.count(u) && dist[u] == static_cast<int>(d) - 1);
      if (!reachable) continue;
      members.push_back(v);
      kept.insert(v);
    }
  }
  std::sort(members.begin() + 1, members.end(),
            [&](std::size_t a, std::size_t b) { return g.client(a).id < g.client(b).id; });
  return detail::induced(g, members);
}

/// Subgraph over every client of `g`, in insertion order (first = target).
inline EgoSubgraph subgraph_of(const TxGraph& g) {
  std::vector<std::size_t> members(g.size());
  for (std::size_t i = 0; i < members.size(); ++i) members[i] = i;
  if (members.empty()) return {};
  return detail::induced(g, members);
}

struct IntRange {
  int lo = 0;
  int hi = 0;
};
struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct SamplerConfig {
  IntRange hop1_fanout{20, 25};
  IntRange hop2_fanout{15, 20};
  RealRange tx_drop_fraction{0.0, 0.25};
  std::uint64_t seed = 0;
  std::size_t max_nodes = 500;

  void validate() const {
    if (hop1_fanout.lo < 0 || hop1_fanout.lo > hop1_fanout.hi || hop2_fanout.lo < 0 ||
        hop2_fanout.lo > hop2_fanout.hi) {
      throw ConfigError("fan-out ranges must satisfy 0 <= lo <= hi");
    }
    if (tx_drop_fraction.lo < 0.0 || tx_drop_fraction.hi >= 1.0 || tx_drop_fraction.lo > tx_drop_fraction.hi) {
      throw ConfigError("transaction drop range must lie in [0, 1)");
    }
  }
};

namespace detail {

/// Keeps node 0, the chosen hop-1 nodes and the hop-2 nodes chosen through
/// them, with induced edges.
template <class Choose>
EgoSubgraph restrict_fanout(const EgoSubgraph& sub, std::size_t max_nodes, Choose&& choose) {
  const std::size_t n = sub.size();
  std::vector<char> keep(n, 0);
  if (n == 0) return sub;
  keep[0] = 1;
  std::vector<std::size_t> hop1;
  for (std::size_t v : sub.neighbors[0])
    if (sub.hop[v] == 1) hop1.push_back(v);
  const std::vector<std::size_t> kept1 = choose(hop1, 1);
  std::size_t count = 1;
  for (std::size_t v : kept1) {
    keep[v] = 1;
    ++count;
  }
  for (std::size_t j : kept1) {
    std::vector<std::size_t> hop2;
    for (std::size_t v : sub.neighbors[j])
      if (sub.hop[v] == 2) hop2.push_back(v);
    for (std::size_t v : choose(hop2, 2)) {
      if (keep[v] || count >= max_nodes) continue;
      keep[v] = 1;
      ++count;
    }
  }
  EgoSubgraph out;
  std::vector<std::size_t> remap(n, SIZE_MAX);
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) continue;
    remap[i] = out.nodes.size();
    out.nodes.push_back(sub.nodes[i]);
    out.node_seqs.push_back(sub.node_seqs[i]);
    out.labels.push_back(sub.labels[i]);
  }
  for (const SubEdge& e : sub.edges) {
    if (!keep[e.a] || !keep[e.b]) continue;
    SubEdge c = e;
    c.a = remap[e.a];
    c.b = remap[e.b];
    out.edges.push_back(std::move(c));
  }
  finalize(out);
  return out;
}

}  // namespace detail

/// Deterministic variant used at evaluation time: the first `hop1_max`
/// hop-1 nodes in id order, and per kept hop-1 node its first `hop2_max`
/// hop-2 neighbours.
inline EgoSubgraph truncate_fanout(const EgoSubgraph& sub, std::size_t hop1_max = 25, std::size_t hop2_max = 20,
                                   std::size_t max_nodes = 500) {
  return detail::restrict_fanout(sub, max_nodes, [&](const std::vector<std::size_t>& c, int hop) {
    const std::size_t k = std::min(c.size(), hop == 1 ? hop1_max : hop2_max);
    return std::vector<std::size_t>(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k));
  });
}

/// Training augmentation: random neighbour fan-out and random deletion of
/// individual transactions. Fully determined by cfg.seed.
inline EgoSubgraph sample_augment(const EgoSubgraph& sub, const SamplerConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  EgoSubgraph out = detail::restrict_fanout(sub, cfg.max_nodes, [&](std::vector<std::size_t> c, int hop) {
    const IntRange r = hop == 1 ? cfg.hop1_fanout : cfg.hop2_fanout;
    const auto k = static_cast<std::size_t>(std::uniform_int_distribution<int>(r.lo, r.hi)(rng));
    if (c.size() <= k) return c;
    // partial Fisher-Yates, then restore node order
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, c.size() - 1);
      std::swap(c[i], c[pick(rng)]);
    }
    c.resize(k);
    std::sort(c.begin(), c.end());
    return c;
  });

  const double p = std::uniform_real_distribution<double>(cfg.tx_drop_fraction.lo, cfg.tx_drop_fraction.hi)(rng);
  if (p <= 0.0) return out;
  std::bernoulli_distribution drop(p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EventSequence& seq = out.node_seqs[i];
    EventSequence kept;
    for (const Transaction& t : seq)
      if (!drop(rng)) kept.push_back(t);
    if (i == 0 && kept.empty() && !seq.empty()) kept.push_back(seq.back());
    seq = std::move(kept);
  }
  std::vector<SubEdge> edges;
  for (SubEdge& e : out.edges) {
    SubEdge k{e.a, e.b, {}, {}};
    for (std::size_t j = 0; j < e.events.size(); ++j) {
      if (drop(rng)) continue;
      k.events.push_back(e.events[j]);
      k.a_to_b.push_back(e.a_to_b[j]);
    }
    if (!k.events.empty()) edges.push_back(std::move(k));
  }
  out.edges = std::move(edges);
  detail::finalize(out, 2);
  return out;
}

// ---------------------------------------------------------------------------
// JSONL
//
//   {"type":"header","format":"ewsgcn-txgraph","version":1}
//   {"type":"node","id":str,"label":0|1|null,"tx":[{"amt":..,"cur":..,"mcc":..|null,"ts":..},...]}
//   {"type":"edge","src":str,"dst":str,"tx":[...]}

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson tx_to_json(const EventSequence& seq) {
  ojson arr = ojson::array();
  for (const Transaction& t : seq) {
    ojson o;
    o["amt"] = t.amount;
    o["cur"] = t.currency;
    o["mcc"] = t.mcc ? ojson(*t.mcc) : ojson(nullptr);
    o["ts"] = t.timestamp;
    arr.push_back(std::move(o));
  }
  return arr;
}

inline EventSequence tx_from_json(const nlohmann::json& arr, std::size_t line) {
  if (!arr.is_array()) throw SchemaError(line, "\"tx\" must be an array");
  EventSequence seq;
  for (const auto& o : arr) {
    if (!o.is_object() || !o.contains("amt") || !o.contains("cur") || !o.contains("ts")) {
      throw SchemaError(line, "transaction needs amt, cur and ts");
    }
    if (!o["amt"].is_number() || !o["cur"].is_number_integer() || !o["ts"].is_number_integer()) {
      throw SchemaError(line, "transaction field has the wrong type");
    }
    Transaction t;
    t.amount = o["amt"].get<double>();
    t.currency = o["cur"].get<std::int32_t>();
    t.timestamp = o["ts"].get<std::int64_t>();
    if (o.contains("mcc") && !o["mcc"].is_null()) {
      if (!o["mcc"].is_number_integer()) throw SchemaError(line, "mcc must be an integer or null");
      t.mcc = o["mcc"].get<std::int32_t>();
    }
    if (!(t.amount >= 0.0)) throw SchemaError(line, "negative or invalid amount");
    if (!seq.empty() && t.timestamp < seq.back().timestamp) throw SchemaError(line, "timestamps decrease");
    seq.push_back(t);
  }
  return seq;
}

inline std::string require_string(const nlohmann::json& o, const char* key, std::size_t line) {
  if (!o.contains(key) || !o[key].is_string()) throw SchemaError(line, std::string("missing string field \"") + key + "\"");
  return o[key].get<std::string>();
}

}  // namespace detail

inline void write_jsonl(const TxGraph& g, std::ostream& os) {
  using detail::ojson;
  os << ojson{{"type", "header"}, {"format", "ewsgcn-txgraph"}, {"version", 1}}.dump() << '\n';
  for (const Client& c : g.clients()) {
    ojson o;
    o["type"] = "node";
    o["id"] = c.id;
    o["label"] = c.label ? ojson(*c.label) : ojson(nullptr);
    o["tx"] = detail::tx_to_json(c.purchases);
    os << o.dump() << '\n';
  }
  for (const auto& [key, seq] : g.transfers()) {
    ojson o;
    o["type"] = "edge";
    o["src"] = g.client(key.first).id;
    o["dst"] = g.client(key.second).id;
    o["tx"] = detail::tx_to_json(seq);
    os << o.dump() << '\n';
  }
}

inline TxGraph read_jsonl(std::istream& is) {
  TxGraph g;
  std::string text;
  std::size_t line = 0;
  bool header = false;
  while (std::getline(is, text)) {
    ++line;
    if (text.empty()) continue;
    nlohmann::json o;
    try {
      o = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(line, std::string("invalid JSON: ") + e.what());
    }
    if (!o.is_object() || !o.contains("type") || !o["type"].is_string()) throw SchemaError(line, "record without \"type\"");
    const std::string type = o["type"].get<std::string>();
    try {
      if (type == "header") {
        if (header || line != 1) throw SchemaError(line, "header must be the first line");
        if (o.value("version", 0) != 1) throw SchemaError(line, "unsupported version");
        header = true;
      } else if (type == "node") {
        std::optional<int> label;
        if (o.contains("label") && !o["label"].is_null()) {
          if (!o["label"].is_number_integer()) throw SchemaError(line, "label must be 0, 1 or null");
          label = o["label"].get<int>();
        }
        if (!o.contains("tx")) throw SchemaError(line, "node without \"tx\"");
        g.add_client(detail::require_string(o, "id", line), detail::tx_from_json(o["tx"], line), label);
      } else if (type == "edge") {
        if (!o.contains("tx")) throw SchemaError(line, "edge without \"tx\"");
        g.add_transfer(detail::require_string(o, "src", line), detail::require_string(o, "dst", line),
                       detail::tx_from_json(o["tx"], line));
      } else {
        throw SchemaError(line, "unknown record type \"" + type + "\"");
      }
    } catch (const std::invalid_argument& e) {
      throw SchemaError(line, e.what());
    }
  }
  return g;
}

/// Writes a subgraph as a graph whose first node is the target.
inline void write_jsonl(const EgoSubgraph& sub, std::ostream& os) {
  TxGraph g;
  for (std::size_t i = 0; i < sub.size(); ++i) g.add_client(sub.nodes[i], sub.node_seqs[i], sub.labels[i]);
  for (const SubEdge& e : sub.edges) {
    EventSequence fwd, back;
    for (std::size_t k = 0; k < e.events.size(); ++k) (e.a_to_b[k] > 0 ? fwd : back).push_back(e.events[k]);
    if (!fwd.empty()) g.add_transfer(sub.nodes[e.a], sub.nodes[e.b], std::move(fwd));
    if (!back.empty()) g.add_transfer(sub.nodes[e.b], sub.nodes[e.a], std::move(back));
  }
  write_jsonl(g, os);
}

inline EgoSubgraph read_subgraph_jsonl(std::istream& is) { return subgraph_of(read_jsonl(is)); }

inline TxGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return read_jsonl(in);
}

inline void save_graph(const TxGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  write_jsonl(g, out);
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace ewsgcn
