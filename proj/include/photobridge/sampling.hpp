#pragma once

// Gumbel noise, the Gumbel-Softmax relaxation and its hard straight-through
// variant, plus the temperature annealing schedule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "photobridge/ad/ops.hpp"
#include "photobridge/rng.hpp"

namespace photobridge {

inline constexpr double kGumbelClamp = 1e-12;
inline constexpr double kProbFloor = 1e-20;

inline double gumbel_from_uniform(double u) {
  u = std::clamp(u, kGumbelClamp, 1.0 - kGumbelClamp);
  return -std::log(-std::log(u));
}

// g = -log(-log(u)), u ~ U(0,1). With per_position == false one noise row is
// drawn and shared by every row (one draw per sequence).
template <std::floating_point T>
ad::Tensor<T> sample_gumbel(ad::Shape shape, Rng& rng, bool per_position = true) {
  auto g = ad::Tensor<T>::zeros(shape);
  auto d = g.mutable_data();
  if (per_position || shape.size() != 2) {
    for (auto& x : d) x = static_cast<T>(gumbel_from_uniform(rng.uniform()));
  } else {
    const std::size_t r = shape[0], c = shape[1];
    for (std::size_t j = 0; j < c; ++j) d[j] = static_cast<T>(gumbel_from_uniform(rng.uniform()));
    for (std::size_t i = 1; i < r; ++i) std::copy_n(d.begin(), c, d.begin() + i * c);
  }
  return g;
}

// softmax((log p + g) / tau) row-wise, differentiable with respect to p.
template <std::floating_point T>
ad::Tensor<T> gumbel_softmax(const ad::Tensor<T>& p, const ad::Tensor<T>& g, T tau) {
  if (!(tau > T{0})) throw ConfigError("gumbel_softmax: tau must be > 0");
  auto logits = ad::add(ad::log(ad::clamp_min(p, static_cast<T>(kProbFloor))), g);
  return ad::softmax(ad::div_scalar(logits, tau));
}

// argmax(p_gs) - sg[p_gs] + p_gs: exactly one-hot forward (ties to the lowest
// index), gradient copied to p_gs.
template <std::floating_point T>
ad::Tensor<T> straight_through_onehot(const ad::Tensor<T>& p_gs) {
  const auto idx = ad::argmax_rows(p_gs);
  return ad::straight_through(ad::one_hot<T>(idx, p_gs.cols()), p_gs);
}

struct TemperatureSchedule {
  double tau_start = 1.0;
  double tau_end = 1e-4;
  double anneal_epochs = 3.0;

  void validate() const {
    if (!(tau_end > 0.0) || tau_start < tau_end) throw ConfigError("gs schedule: need tau_start >= tau_end > 0");
    if (anneal_epochs < 0.0) throw ConfigError("gs.anneal_epochs must be >= 0");
  }

  static TemperatureSchedule constant(double tau) { return {tau, tau, 0.0}; }
};

// Geometric interpolation from tau_start to tau_end over the first
// anneal_epochs * steps_per_epoch steps, constant afterwards.
inline double temperature_at(const TemperatureSchedule& s, std::uint64_t global_step, std::uint64_t steps_per_epoch) {
  if (steps_per_epoch == 0) throw ConfigError("temperature_at: steps_per_epoch must be > 0");
  s.validate();
  const double horizon = s.anneal_epochs * static_cast<double>(steps_per_epoch);
  const double step = static_cast<double>(global_step);
  if (horizon <= 0.0 || step >= horizon) return s.tau_end;
  if (step <= 0.0) return s.tau_start;
  return s.tau_start * std::pow(s.tau_end / s.tau_start, step / horizon);
}

}  // namespace photobridge
