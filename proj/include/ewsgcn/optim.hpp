#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ewsgcn/autodiff.hpp"

namespace ewsgcn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed list of Params. Frozen params are skipped entirely:
/// neither their values nor their moment estimates change.
class Adam {
 public:
  explicit Adam(std::vector<Param*> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    state_.reserve(params_.size());
    for (Param* p : params_) state_.push_back({Tensor(p->value.shape()), Tensor(p->value.shape()), 0});
  }

  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }

  /// Applies one update and throws NumericalError if any parameter becomes
  /// non-finite.
  void step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Param& p = *params_[k];
      if (p.frozen) continue;
      State& s = state_[k];
      ++s.t;
      const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
      const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
        p.value[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg_.eps);
      }
      if (!p.value.all_finite()) throw NumericalError("non-finite parameter after update: " + p.name);
    }
  }

 private:
  struct State {
    Tensor m, v;
    long t;
  };

  std::vector<Param*> params_;
  AdamConfig cfg_;
  std::vector<State> state_;
};

}  // namespace ewsgcn
