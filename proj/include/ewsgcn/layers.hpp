#pragma once

// Graph convolutions over encoded node and edge features.
//
// Layers see a graph only through GraphIndex: a list of directed edges
// (src aggregates from dst), grouped by src. Several subgraphs can be packed
// into one GraphIndex as a disjoint union.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ewsgcn/autodiff.hpp"
#include "ewsgcn/graph.hpp"
#include "ewsgcn/gru.hpp"

namespace ewsgcn {

struct GraphIndex {
  std::size_t nodes = 0;
  std::vector<std::size_t> src;  // aggregating node i
  std::vector<std::size_t> dst;  // neighbour j in N_i

  std::size_t edges() const noexcept { return src.size(); }

  std::vector<std::size_t> degree() const {
    std::vector<std::size_t> d(nodes, 0);
    for (std::size_t s : src) ++d[s];
    return d;
  }

  /// Appends another graph's index, shifting its node ids past ours.
  void append(const GraphIndex& other) {
    for (std::size_t k = 0; k < other.edges(); ++k) {
      src.push_back(other.src[k] + nodes);
      dst.push_back(other.dst[k] + nodes);
    }
    nodes += other.nodes;
  }

  static GraphIndex of(const EgoSubgraph& sub) {
    GraphIndex g;
    g.nodes = sub.size();
    for (const DirectedEdge& e : directed_edges(sub)) {
      g.src.push_back(e.from);
      g.dst.push_back(e.to);
    }
    return g;
  }
};

enum class Activation { identity, relu, elu, tanh };

inline Var activate(const Var& x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::elu: return elu(x);
    case Activation::tanh: return tanh(x);
  }
  return x;
}

namespace detail {

inline Tensor ones(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}, 1.0); }

/// [M x 1] column repeated to [M x width].
inline Var repeat_col(const Var& col, std::size_t width) {
  return matmul(col, col.tape()->constant(ones(1, width)));
}

/// Column c of x as [rows x 1].
inline Var take_col(const Var& x, std::size_t c) {
  Tensor e(Shape{x.value().cols(), 1});
  e[c] = 1.0;
  return matmul(x, x.tape()->constant(std::move(e)));
}

inline Param linear_param(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return Param(std::move(name), uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// EWS-GCN

/// Convolution weights shared by every layer application of a model.
struct EwsGcnParams {
  Param w_x;  // node_dim x channels
  Param w_e;  // edge_dim x channels
  GruParams cell;  // input channels, hidden node_dim

  static EwsGcnParams init(std::size_t node_dim, std::size_t edge_dim, std::size_t channels, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    EwsGcnParams p;
    p.w_x = detail::linear_param("w_x", node_dim, channels, rng);
    p.w_e = detail::linear_param("w_e", edge_dim, channels, rng);
    p.cell = GruParams::init("cell.", channels, node_dim, rng);
    return p;
  }

  std::size_t channels() const { return w_x.value.cols(); }

  std::vector<Param*> params() {
    std::vector<Param*> out{&w_x, &w_e};
    for (Param* q : cell.params()) out.push_back(q);
    return out;
  }
};

struct EwsGcnVars {
  Var w_x, w_e;
  GruVars cell;

  static EwsGcnVars bind(Tape& tape, EwsGcnParams& p, bool track) {
    return {tape.param(p.w_x, track), tape.param(p.w_e, track), GruVars::bind(tape, p.cell, track)};
  }
};

/// Per directed edge (i, j) and channel k:
///   alpha_ij^k = relu([e_ij W_E]_k) / sum_{l in N_i} relu([e_il W_E]_k),
/// with alpha = 0 across a channel whose neighbourhood sum is 0. Returns
/// [edges x channels], rows aligned with g.src.
inline Var ews_attention(const Var& edge_feats, const Var& w_e, const GraphIndex& g) {
  return segment_normalize(relu(matmul(edge_feats, w_e)), g.src, g.nodes);
}

/// a_i = sum_{j in N_i} alpha_ij * (x_j W_X). Returns [nodes x channels].
inline Var ews_aggregate(const Var& alpha, const Var& x, const Var& w_x, const GraphIndex& g) {
  Var projected = gather_rows(matmul(x, w_x), g.dst);
  return scatter_add_rows(mul(alpha, projected), g.src, g.nodes);
}

/// x_i' = GRU(a_i, x_i); keeps the node embedding width.
inline Var ews_update(const Var& a, const Var& x, const GruVars& cell) { return gru_cell(a, x, cell); }

/// One EWS-GCN convolution given precomputed attention.
inline Var ews_layer(const Var& x, const Var& alpha, const EwsGcnVars& v, const GraphIndex& g) {
  return ews_update(ews_aggregate(alpha, x, v.w_x, g), x, v.cell);
}

// ---------------------------------------------------------------------------
// GCN: x_i' = act(mean_{j in N_i} x_j W); isolated nodes map to act(0).

inline Var gcn_layer(const Var& x, const Var& w, const GraphIndex& g, Activation act = Activation::relu) {
  Var summed = scatter_add_rows(gather_rows(matmul(x, w), g.dst), g.src, g.nodes);
  const std::size_t width = summed.value().cols();
  Tensor inv(Shape{g.nodes, width});
  const auto deg = g.degree();
  for (std::size_t i = 0; i < g.nodes; ++i)
    for (std::size_t c = 0; c < width; ++c) inv(i, c) = deg[i] ? 1.0 / static_cast<double>(deg[i]) : 0.0;
  return activate(mul(summed, x.tape()->constant(std::move(inv))), act);
}

// ---------------------------------------------------------------------------
// GAT: per head k, alpha^k from leaky_relu(a_src . h_i + a_dst . h_j) with
// softmax over N_i, h = x W^k. Heads are concatenated or averaged, then ELU.

struct GatHead {
  Param w;      // in x head_dim
  Param a_src;  // head_dim x 1
  Param a_dst;  // head_dim x 1
};

struct GatLayerParams {
  std::vector<GatHead> heads;
  bool concat = true;

  static GatLayerParams init(std::size_t in, std::size_t head_dim, std::size_t n_heads, bool concat,
                             std::mt19937_64& rng, const std::string& prefix) {
    GatLayerParams p;
    p.concat = concat;
    for (std::size_t k = 0; k < n_heads; ++k) {
      const std::string h = prefix + "head" + std::to_string(k) + ".";
      p.heads.push_back({detail::linear_param(h + "w", in, head_dim, rng),
                         detail::linear_param(h + "a_src", head_dim, 1, rng),
                         detail::linear_param(h + "a_dst", head_dim, 1, rng)});
    }
    return p;
  }

  std::size_t out_dim() const {
    const std::size_t d = heads.front().w.value.cols();
    return concat ? d * heads.size() : d;
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (GatHead& h : heads) {
      out.push_back(&h.w);
      out.push_back(&h.a_src);
      out.push_back(&h.a_dst);
    }
    return out;
  }
};

struct GatHeadVars {
  Var w, a_src, a_dst;
};

inline std::vector<GatHeadVars> bind_gat(Tape& tape, GatLayerParams& p, bool track) {
  std::vector<GatHeadVars> out;
  for (GatHead& h : p.heads) out.push_back({tape.param(h.w, track), tape.param(h.a_src, track), tape.param(h.a_dst, track)});
  return out;
}

/// Attention of one head, [edges x 1] aligned with g.src.
inline Var gat_attention(const Var& h, const GatHeadVars& v, const GraphIndex& g) {
  Var s = add(gather_rows(matmul(h, v.a_src), g.src), gather_rows(matmul(h, v.a_dst), g.dst));
  return segment_softmax(leaky_relu(s, 0.2), g.src, g.nodes);
}

inline Var gat_layer(const Var& x, const std::vector<GatHeadVars>& heads, bool concat, const GraphIndex& g) {
  std::vector<Var> outs;
  for (const GatHeadVars& v : heads) {
    Var h = matmul(x, v.w);
    const std::size_t width = h.value().cols();
    Var alpha = gat_attention(h, v, g);
    outs.push_back(scatter_add_rows(mul(detail::repeat_col(alpha, width), gather_rows(h, g.dst)), g.src, g.nodes));
  }
  Var combined;
  if (concat) {
    combined = concat_cols(outs);
  } else {
    combined = outs.front();
    for (std::size_t k = 1; k < outs.size(); ++k) combined = add(combined, outs[k]);
    combined = scale(combined, 1.0 / static_cast<double>(outs.size()));
  }
  return elu(combined);
}

// ---------------------------------------------------------------------------
// EGNN-style: one shared W, C attention channels scored from (x_i, x_j, e_ij)
//   s_ij^c = leaky_relu([x_i W] a_self_c + [x_j W] a_nbr_c + e_ij a_edge_c)
// softmax over N_i per channel, channels concatenated, then ELU.

struct EgnnLayerParams {
  Param w;       // in x head_dim
  Param a_self;  // head_dim x channels
  Param a_nbr;   // head_dim x channels
  Param a_edge;  // edge_dim x channels

  static EgnnLayerParams init(std::size_t in, std::size_t edge_dim, std::size_t head_dim, std::size_t channels,
                              std::mt19937_64& rng, const std::string& prefix) {
    return {detail::linear_param(prefix + "w", in, head_dim, rng),
            detail::linear_param(prefix + "a_self", head_dim, channels, rng),
            detail::linear_param(prefix + "a_nbr", head_dim, channels, rng),
            detail::linear_param(prefix + "a_edge", edge_dim, channels, rng)};
  }

  std::size_t out_dim() const { return w.value.cols() * a_self.value.cols(); }
  std::vector<Param*> params() { return {&w, &a_self, &a_nbr, &a_edge}; }
};

struct EgnnVars {
  Var w, a_self, a_nbr, a_edge;

  static EgnnVars bind(Tape& tape, EgnnLayerParams& p, bool track) {
    return {tape.param(p.w, track), tape.param(p.a_self, track), tape.param(p.a_nbr, track),
            tape.param(p.a_edge, track)};
  }
};

/// [edges x channels] attention aligned with g.src.
inline Var egnn_attention(const Var& h, const Var& edge_feats, const EgnnVars& v, const GraphIndex& g) {
  Var s = add(add(gather_rows(matmul(h, v.a_self), g.src), gather_rows(matmul(h, v.a_nbr), g.dst)),
              matmul(edge_feats, v.a_edge));
  return segment_softmax(leaky_relu(s, 0.2), g.src, g.nodes);
}

inline Var egnn_layer(const Var& x, const Var& edge_feats, const EgnnVars& v, const GraphIndex& g) {
  Var h = matmul(x, v.w);
  const std::size_t width = h.value().cols();
  Var alpha = egnn_attention(h, edge_feats, v, g);
  Var neighbours = gather_rows(h, g.dst);
  std::vector<Var> outs;
  for (std::size_t c = 0; c < alpha.value().cols(); ++c) {
    Var ac = detail::repeat_col(detail::take_col(alpha, c), width);
    outs.push_back(scatter_add_rows(mul(ac, neighbours), g.src, g.nodes));
  }
  return elu(concat_cols(outs));
}

}  // namespace ewsgcn
