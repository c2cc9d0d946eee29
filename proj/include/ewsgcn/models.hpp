#pragma once

// Encoders, graph convolutions and a linear head on the target node.
//
// One Model type covers EWS-GCN and the baselines; `kind` picks the
// convolution stack. Subgraphs are scored in batches packed as a disjoint
// union.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ewsgcn/errors.hpp"
#include "ewsgcn/layers.hpp"
#include "ewsgcn/seq_encoder.hpp"

namespace ewsgcn {

enum class ModelKind { ews_gcn, node_only, gcn, gat, egnn };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::ews_gcn: return "ews_gcn";
    case ModelKind::node_only: return "node_only";
    case ModelKind::gcn: return "gcn";
    case ModelKind::gat: return "gat";
    case ModelKind::egnn: return "egnn";
  }
  return "?";
}

inline ModelKind model_kind_from(const std::string& s) {
  for (ModelKind k : {ModelKind::ews_gcn, ModelKind::node_only, ModelKind::gcn, ModelKind::gat, ModelKind::egnn})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown model kind '" + s + "'");
}

struct ModelConfig {
  ModelKind kind = ModelKind::ews_gcn;
  std::size_t layers = 2;
  std::size_t channels = 80;  // EWS-GCN projection width K
  std::size_t gat_heads = 8;
  std::size_t gat_head_dim = 80;
  std::size_t gat_out_heads = 4;
  std::size_t egnn_channels = 8;
  std::size_t egnn_head_dim = 10;

  /// Convolutions actually applied; the node-only model has none.
  std::size_t depth() const { return kind == ModelKind::node_only ? 0 : layers; }
  bool uses_edges() const { return depth() > 0 && (kind == ModelKind::ews_gcn || kind == ModelKind::egnn); }

  void validate() const {
    if (channels == 0 || gat_heads == 0 || gat_head_dim == 0 || gat_out_heads == 0 || egnn_channels == 0 ||
        egnn_head_dim == 0)
      throw ConfigError("model widths must be positive");
  }
};

enum class Component { node_encoder, edge_encoder, conv, head };
inline constexpr std::array<Component, 4> all_components{Component::node_encoder, Component::edge_encoder,
                                                         Component::conv, Component::head};

inline const char* to_string(Component c) {
  switch (c) {
    case Component::node_encoder: return "node_encoder";
    case Component::edge_encoder: return "edge_encoder";
    case Component::conv: return "conv";
    case Component::head: return "head";
  }
  return "?";
}

struct ParamReport {
  std::vector<std::pair<std::string, std::size_t>> components;
  std::size_t total = 0;

  std::size_t of(const std::string& name) const {
    for (const auto& [n, c] : components)
      if (n == name) return c;
    return 0;
  }
};

/// Subgraphs packed into one graph. Spans point into the source subgraphs,
/// which must outlive the batch.
struct Batch {
  GraphIndex graph;
  std::vector<SequenceInput> nodes;
  std::vector<SequenceInput> edges;  // aligned with graph.src
  std::vector<std::size_t> targets;
  std::vector<double> labels;  // -1 when the target is unlabeled

  static Batch of(std::span<const EgoSubgraph* const> subs) {
    Batch b;
    for (const EgoSubgraph* s : subs) {
      const std::size_t offset = b.graph.nodes;
      b.targets.push_back(offset);
      b.labels.push_back(s->target_label() ? static_cast<double>(*s->target_label()) : -1.0);
      for (const EventSequence& seq : s->node_seqs) b.nodes.push_back(SequenceInput::of(seq));
      for (const DirectedEdge& d : directed_edges(*s)) {
        const SubEdge& e = s->edges[d.edge];
        b.graph.src.push_back(d.from + offset);
        b.graph.dst.push_back(d.to + offset);
        b.edges.push_back({e.events, e.a_to_b, d.sign});
      }
      b.graph.nodes += s->size();
    }
    return b;
  }

  static Batch of(const EgoSubgraph& sub) {
    const EgoSubgraph* p = &sub;
    return of(std::span(&p, 1));
  }
  static Batch of(EgoSubgraph&&) = delete;
};

struct Model {
  ModelConfig config;
  EncoderParams node_encoder;
  EncoderParams edge_encoder;
  EwsGcnParams conv;
  std::vector<Param> gcn;
  std::vector<GatLayerParams> gat;
  std::vector<EgnnLayerParams> egnn;
  Param head_w, head_b;

  /// Fresh model; both encoders start as copies of `encoder`.
  static Model init(const ModelConfig& cfg, const EncoderParams& encoder, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    m.node_encoder = encoder;
    m.edge_encoder = encoder;
    for (Param* p : m.node_encoder.encoder_params()) p->name = "node_encoder." + p->name;
    for (Param* p : m.edge_encoder.encoder_params()) p->name = "edge_encoder." + p->name;
    const std::size_t d = encoder.config.hidden_dim;
    std::mt19937_64 rng(seed);
    std::size_t readout = d;
    switch (cfg.kind) {
      case ModelKind::ews_gcn:
        m.conv = EwsGcnParams::init(d, d, cfg.channels, rng());
        for (Param* p : m.conv.params()) p->name = "conv." + p->name;
        break;
      case ModelKind::node_only: break;
      case ModelKind::gcn:
        for (std::size_t l = 0; l < cfg.layers; ++l)
          m.gcn.push_back(detail::linear_param("conv.layer" + std::to_string(l) + ".w", d, d, rng));
        break;
      case ModelKind::gat: {
        std::size_t in = d;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
          const bool last = l + 1 == cfg.layers;
          const std::string prefix = "conv.layer" + std::to_string(l) + ".";
          m.gat.push_back(last ? GatLayerParams::init(in, d, cfg.gat_out_heads, false, rng, prefix)
                               : GatLayerParams::init(in, cfg.gat_head_dim, cfg.gat_heads, true, rng, prefix));
          in = m.gat.back().out_dim();
          readout += in;
        }
        break;
      }
      case ModelKind::egnn: {
        std::size_t in = d;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
          m.egnn.push_back(EgnnLayerParams::init(in, d, cfg.egnn_head_dim, cfg.egnn_channels, rng,
                                                 "conv.layer" + std::to_string(l) + "."));
          in = m.egnn.back().out_dim();
          readout += in;
        }
        break;
      }
    }
    m.head_w = detail::linear_param("head.w", readout, 1, rng);
    m.head_b = Param("head.b", Tensor(Shape{1}));
    return m;
  }

  std::vector<Param*> params(Component c) {
    switch (c) {
      case Component::node_encoder: return node_encoder.encoder_params();
      case Component::edge_encoder: return config.uses_edges() ? edge_encoder.encoder_params() : std::vector<Param*>{};
      case Component::conv: {
        std::vector<Param*> out;
        if (config.kind == ModelKind::ews_gcn && config.depth() > 0) out = conv.params();
        for (Param& w : gcn) out.push_back(&w);
        for (GatLayerParams& l : gat)
          for (Param* p : l.params()) out.push_back(p);
        for (EgnnLayerParams& l : egnn)
          for (Param* p : l.params()) out.push_back(p);
        return out;
      }
      case Component::head: return {&head_w, &head_b};
    }
    return {};
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (Component c : all_components)
      for (Param* p : params(c)) out.push_back(p);
    return out;
  }

  void set_frozen(Component c, bool frozen) {
    for (Param* p : params(c)) p->frozen = frozen;
  }

  bool frozen(Component c) {
    auto ps = params(c);
    return !ps.empty() && ps.front()->frozen;
  }

  ParamReport param_count() {
    ParamReport r;
    for (Component c : all_components) {
      std::size_t n = 0;
      for (Param* p : params(c)) n += p->numel();
      if (n == 0) continue;
      r.components.emplace_back(to_string(c), n);
      r.total += n;
    }
    return r;
  }
};

struct ForwardOptions {
  bool grad = false;    // record trainable params for backward
  bool train = false;   // enables dropout
  std::mt19937_64* rng = nullptr;
  double dropout = 0.25;
};

/// Target logits [batch x 1].
inline Var forward_logits(Tape& tape, Model& m, const Batch& b, const ForwardOptions& opt = {}) {
  const ModelConfig& cfg = m.config;
  auto track = [&](Component c) { return opt.grad && !m.frozen(c); };
  auto drop = [&](const Var& v) {
    if (!opt.train || opt.dropout <= 0.0) return v;
    if (opt.rng == nullptr) throw std::invalid_argument("dropout needs an rng in train mode");
    return dropout(v, opt.dropout, *opt.rng);
  };
  const GraphIndex& g = b.graph;

  EncoderVars nv = EncoderVars::bind(tape, m.node_encoder, track(Component::node_encoder));
  const bool head_grad = track(Component::head);
  auto head = [&](const Var& t) {
    return add_bias(matmul(drop(t), tape.param(m.head_w, head_grad)), tape.param(m.head_b, head_grad));
  };
  if (cfg.depth() == 0) {
    std::vector<SequenceInput> own;
    for (std::size_t t : b.targets) own.push_back(b.nodes[t]);
    return head(encode_batch(tape, nv, m.node_encoder, own));
  }
  Var x = encode_batch(tape, nv, m.node_encoder, b.nodes);
  Var e;
  if (cfg.uses_edges()) {
    EncoderVars ev = EncoderVars::bind(tape, m.edge_encoder, track(Component::edge_encoder));
    e = encode_batch(tape, ev, m.edge_encoder, b.edges);
  }
  const bool conv_grad = track(Component::conv);
  std::vector<Var> readout{x};
  switch (cfg.kind) {
    case ModelKind::ews_gcn: {
      EwsGcnVars v = EwsGcnVars::bind(tape, m.conv, conv_grad);
      Var alpha = ews_attention(e, v.w_e, g);
      for (std::size_t l = 0; l < cfg.depth(); ++l) x = ews_layer(drop(x), alpha, v, g);
      readout = {x};
      break;
    }
    case ModelKind::node_only: break;
    case ModelKind::gcn:
      for (Param& w : m.gcn) x = gcn_layer(drop(x), tape.param(w, conv_grad), g);
      readout = {x};
      break;
    case ModelKind::gat:
      for (GatLayerParams& l : m.gat) {
        x = gat_layer(drop(x), bind_gat(tape, l, conv_grad), l.concat, g);
        readout.push_back(x);
      }
      break;
    case ModelKind::egnn:
      for (EgnnLayerParams& l : m.egnn) {
        x = egnn_layer(drop(x), e, EgnnVars::bind(tape, l, conv_grad), g);
        readout.push_back(x);
      }
      break;
  }
  Var r = readout.size() == 1 ? readout.front() : concat_cols(readout);
  return head(gather_rows(r, b.targets));
}

/// Default probabilities of the targets, evaluated without dropout.
inline std::vector<double> predict(Model& m, std::span<const EgoSubgraph* const> subs, std::size_t chunk = 64) {
  std::vector<double> out;
  out.reserve(subs.size());
  for (std::size_t s = 0; s < subs.size(); s += chunk) {
    Batch b = Batch::of(subs.subspan(s, std::min(chunk, subs.size() - s)));
    Tape tape;
    const Tensor& z = forward_logits(tape, m, b).value();
    for (std::size_t i = 0; i < z.size(); ++i) out.push_back(sigmoid_value(z[i]));
  }
  return out;
}

inline double forward(Model& m, const EgoSubgraph& sub) {
  const EgoSubgraph* p = &sub;
  return predict(m, std::span(&p, 1)).front();
}

// ---------------------------------------------------------------------------
// Configuration as JSON

inline nlohmann::ordered_json to_json(const EncoderConfig& c) {
  return {{"hidden_dim", c.hidden_dim},         {"currency_vocab", c.currency_vocab},
          {"currency_embed_dim", c.currency_embed_dim}, {"mcc_vocab", c.mcc_vocab},
          {"mcc_embed_dim", c.mcc_embed_dim},   {"projection_dim", c.projection_dim},
          {"max_events", c.max_events}};
}

namespace detail {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

inline void require_object(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
}

}  // namespace detail

inline EncoderConfig encoder_config_from(const nlohmann::json& j) {
  detail::require_object(j, "encoder config");
  EncoderConfig c;
  detail::read_field(j, "hidden_dim", c.hidden_dim);
  detail::read_field(j, "currency_vocab", c.currency_vocab);
  detail::read_field(j, "currency_embed_dim", c.currency_embed_dim);
  detail::read_field(j, "mcc_vocab", c.mcc_vocab);
  detail::read_field(j, "mcc_embed_dim", c.mcc_embed_dim);
  detail::read_field(j, "projection_dim", c.projection_dim);
  detail::read_field(j, "max_events", c.max_events);
  if (c.hidden_dim == 0 || c.projection_dim == 0 || c.currency_vocab == 0 || c.max_events == 0)
    throw ConfigError("encoder dimensions must be positive");
  return c;
}

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"kind", to_string(c.kind)},   {"layers", c.layers},
          {"channels", c.channels},      {"gat_heads", c.gat_heads},
          {"gat_head_dim", c.gat_head_dim},
          {"gat_out_heads", c.gat_out_heads}, {"egnn_channels", c.egnn_channels},
          {"egnn_head_dim", c.egnn_head_dim}};
}

inline ModelConfig model_config_from(const nlohmann::json& j) {
  detail::require_object(j, "model config");
  ModelConfig c;
  if (j.contains("kind")) {
    if (!j["kind"].is_string()) throw ConfigError("field 'kind' must be a string");
    c.kind = model_kind_from(j["kind"].get<std::string>());
  }
  detail::read_field(j, "layers", c.layers);
  detail::read_field(j, "channels", c.channels);
  detail::read_field(j, "gat_heads", c.gat_heads);
  detail::read_field(j, "gat_head_dim", c.gat_head_dim);
  detail::read_field(j, "gat_out_heads", c.gat_out_heads);
  detail::read_field(j, "egnn_channels", c.egnn_channels);
  detail::read_field(j, "egnn_head_dim", c.egnn_head_dim);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints: `path` holds the raw little-endian float64 values and
// `path + ".json"` the manifest describing them.

namespace detail {

inline std::uint64_t bswap64(std::uint64_t v) {
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xff);
  return r;
}

inline void write_f64_le(std::ostream& os, const Tensor& t) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    for (double v : t.values()) {
      auto bits = bswap64(std::bit_cast<std::uint64_t>(v));
      os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

inline void read_f64_le(const std::vector<char>& buf, std::size_t offset, Tensor& t) {
  std::memcpy(t.data(), buf.data() + offset * sizeof(double), t.size() * sizeof(double));
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = std::bit_cast<double>(bswap64(std::bit_cast<std::uint64_t>(t[i])));
  }
}

struct NamedParam {
  std::string component;
  Param* param;
};

inline nlohmann::ordered_json encoder_meta(const EncoderParams& e) {
  return {{"config", to_json(e.config)},
          {"amount_stats", {{"mean", e.amount_stats.mean}, {"var", e.amount_stats.var}}}};
}

inline void apply_encoder_meta(const nlohmann::json& j, EncoderParams& e) {
  e.config = encoder_config_from(j.at("config"));
  e.amount_stats.mean = j.at("amount_stats").at("mean").get<double>();
  e.amount_stats.var = j.at("amount_stats").at("var").get<double>();
}

inline void save_checkpoint(const std::string& path, nlohmann::ordered_json meta, const std::vector<NamedParam>& ps) {
  std::ofstream bin(path, std::ios::binary);
  if (!bin) throw IoError("cannot write checkpoint " + path);
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const NamedParam& np : ps) {
    write_f64_le(bin, np.param->value);
    tensors.push_back({{"component", np.component},
                       {"name", np.param->name},
                       {"offset", offset},
                       {"shape", np.param->value.shape()}});
    offset += np.param->numel();
  }
  if (!bin) throw IoError("failed writing checkpoint " + path);
  meta["scalars"] = offset;
  meta["tensors"] = std::move(tensors);
  std::ofstream man(path + ".json");
  if (!man) throw IoError("cannot write manifest " + path + ".json");
  man << meta.dump(2) << '\n';
  if (!man) throw IoError("failed writing manifest " + path + ".json");
}

inline nlohmann::json read_manifest(const std::string& path) {
  std::ifstream man(path + ".json");
  if (!man) throw IoError("cannot read manifest " + path + ".json");
  try {
    return nlohmann::json::parse(man);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path + ".json: " + e.what());
  }
}

inline void load_values(const std::string& path, const nlohmann::json& meta, const std::vector<NamedParam>& ps) {
  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw IoError("cannot read checkpoint " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const std::size_t scalars = meta.at("scalars").get<std::size_t>();
  if (buf.size() != scalars * sizeof(double))
    throw IoError("checkpoint " + path + " has " + std::to_string(buf.size()) + " bytes, manifest expects " +
                  std::to_string(scalars * sizeof(double)));
  const auto& tensors = meta.at("tensors");
  if (tensors.size() != ps.size())
    throw IoError("checkpoint " + path + " lists " + std::to_string(tensors.size()) + " tensors, model has " +
                  std::to_string(ps.size()));
  for (std::size_t k = 0; k < ps.size(); ++k) {
    const auto& t = tensors[k];
    Param& p = *ps[k].param;
    if (t.at("name").get<std::string>() != p.name || t.at("shape").get<Shape>() != p.value.shape())
      throw IoError("checkpoint tensor " + std::to_string(k) + " does not match parameter " + p.name);
    const std::size_t off = t.at("offset").get<std::size_t>();
    if (off + p.numel() > scalars) throw IoError("checkpoint tensor " + p.name + " out of range");
    read_f64_le(buf, off, p.value);
    p.zero_grad();
  }
}

inline std::vector<NamedParam> named_params(Model& m) {
  std::vector<NamedParam> out;
  for (Component c : all_components)
    for (Param* p : m.params(c)) out.push_back({to_string(c), p});
  return out;
}

}  // namespace detail

inline void save_model(Model& m, const std::string& path) {
  nlohmann::ordered_json meta{{"format", "ewsgcn-checkpoint"},
                              {"version", 1},
                              {"type", "model"},
                              {"model", to_json(m.config)},
                              {"node_encoder", detail::encoder_meta(m.node_encoder)},
                              {"edge_encoder", detail::encoder_meta(m.edge_encoder)}};
  detail::save_checkpoint(path, std::move(meta), detail::named_params(m));
}

inline Model load_model(const std::string& path) {
  const nlohmann::json meta = detail::read_manifest(path);
  try {
    if (meta.at("type").get<std::string>() != "model") throw IoError(path + " is not a model checkpoint");
    EncoderParams enc;
    detail::apply_encoder_meta(meta.at("node_encoder"), enc);
    enc = [&] {
      EncoderParams e = EncoderParams::init(enc.config, 0);
      e.amount_stats = enc.amount_stats;
      return e;
    }();
    Model m = Model::init(model_config_from(meta.at("model")), enc, 0);
    detail::apply_encoder_meta(meta.at("edge_encoder"), m.edge_encoder);
    detail::load_values(path, meta, detail::named_params(m));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path + ".json: " + e.what());
  }
}

inline void save_encoder(EncoderParams& e, const std::string& path) {
  nlohmann::ordered_json meta{{"format", "ewsgcn-checkpoint"},
                              {"version", 1},
                              {"type", "encoder"},
                              {"encoder", detail::encoder_meta(e)}};
  std::vector<detail::NamedParam> ps;
  for (Param* p : e.encoder_params()) ps.push_back({"encoder", p});
  detail::save_checkpoint(path, std::move(meta), ps);
}

inline EncoderParams load_encoder(const std::string& path) {
  const nlohmann::json meta = detail::read_manifest(path);
  try {
    if (meta.at("type").get<std::string>() != "encoder") throw IoError(path + " is not an encoder checkpoint");
    EncoderParams probe;
    detail::apply_encoder_meta(meta.at("encoder"), probe);
    EncoderParams e = EncoderParams::init(probe.config, 0);
    e.amount_stats = probe.amount_stats;
    std::vector<detail::NamedParam> ps;
    for (Param* p : e.encoder_params()) ps.push_back({"encoder", p});
    detail::load_values(path, meta, ps);
    return e;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path + ".json: " + e.what());
  }
}

}  // namespace ewsgcn
