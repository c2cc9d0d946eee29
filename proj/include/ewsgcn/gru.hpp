#pragma once

// Gated recurrent unit shared by the sequence encoder and the EWS-GCN update.
//
//   z  = sigmoid(x Wz + h Uz + bz)
//   r  = sigmoid(x Wr + h Ur + br)
//   n  = tanh(x Wn + (r * h) Un + bn)
//   h' = (1 - z) * n + z * h
//
// One bias per gate, so a cell has 3 (in*hidden + hidden*hidden + hidden)
// scalars.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "ewsgcn/autodiff.hpp"

namespace ewsgcn {

inline Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

struct GruParams {
  Param wz, wr, wn;  // input x hidden
  Param uz, ur, un;  // hidden x hidden
  Param bz, br, bn;  // hidden

  static GruParams init(const std::string& prefix, std::size_t input_dim, std::size_t hidden,
                        std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    auto w = [&](const char* n, std::size_t rows) {
      return Param(prefix + n, uniform_tensor(Shape{rows, hidden}, bound, rng));
    };
    auto b = [&](const char* n) { return Param(prefix + n, uniform_tensor(Shape{hidden}, bound, rng)); };
    GruParams g;
    g.wz = w("wz", input_dim);
    g.wr = w("wr", input_dim);
    g.wn = w("wn", input_dim);
    g.uz = w("uz", hidden);
    g.ur = w("ur", hidden);
    g.un = w("un", hidden);
    g.bz = b("bz");
    g.br = b("br");
    g.bn = b("bn");
    return g;
  }

  std::size_t input_dim() const { return wz.value.rows(); }
  std::size_t hidden_dim() const { return uz.value.rows(); }

  std::vector<Param*> params() { return {&wz, &wr, &wn, &uz, &ur, &un, &bz, &br, &bn}; }
  std::vector<const Param*> params() const { return {&wz, &wr, &wn, &uz, &ur, &un, &bz, &br, &bn}; }
};

/// GRU parameters bound to a tape.
struct GruVars {
  Var wz, wr, wn, uz, ur, un, bz, br, bn;

  static GruVars bind(Tape& tape, GruParams& p, bool track) {
    return {tape.param(p.wz, track), tape.param(p.wr, track), tape.param(p.wn, track),
            tape.param(p.uz, track), tape.param(p.ur, track), tape.param(p.un, track),
            tape.param(p.bz, track), tape.param(p.br, track), tape.param(p.bn, track)};
  }
};

/// One step given the input-side pre-activations (x Wz + bz, ...), which lets
/// a sequence encoder project every timestep in a single product.
inline Var gru_step_projected(const Var& xz, const Var& xr, const Var& xn, const Var& h,
                              const GruVars& g) {
  Var z = sigmoid(add(xz, matmul(h, g.uz)));
  Var r = sigmoid(add(xr, matmul(h, g.ur)));
  Var n = tanh(add(xn, matmul(mul(r, h), g.un)));
  // (1 - z) n + z h == n + z (h - n)
  return add(n, mul(z, sub(h, n)));
}

/// One step for a batch: x [B x in], h [B x hidden] -> [B x hidden].
inline Var gru_cell(const Var& x, const Var& h, const GruVars& g) {
  return gru_step_projected(add_bias(matmul(x, g.wz), g.bz), add_bias(matmul(x, g.wr), g.br),
                            add_bias(matmul(x, g.wn), g.bn), h, g);
}

}  // namespace ewsgcn
