#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "photobridge/ad/tensor.hpp"

namespace photobridge::ad {

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  void reset(std::span<const Tensor<double>> params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.size(), 0.0);
      v.emplace_back(p.size(), 0.0);
    }
    step = 0;
  }
};

// One AdamW update with bias correction and decoupled weight decay, reading
// each parameter's accumulated gradient (missing gradients count as zero).
inline void adamw_step(std::span<const Tensor<double>> params, AdamWState& state, const AdamWConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("adamw: lr must be > 0");
  if (state.m.size() != params.size()) state.reset(params);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].mutable_data();
    const bool has = params[k].has_grad();
    const auto& g = params[k].node()->grad;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
      theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace photobridge::ad
