#pragma once

// Conditional denoiser standing in for the image generator, trained with the
// epsilon-prediction DDPM objective.
//
// Conditioning: c = mean_rows(R^SD E) W_c + b_c, where E is the SD-token
// embedding table. Denoiser (one row per noisy sample):
//   h1 = silu(x_t W_x + c W_c1 + temb(t) W_t + b1)
//   h2 = silu(h1 W2 + c W_c2 + b2)
//   x0_hat = h2 W3 + b3
//   eps_hat = gate_t * (x_t - sqrt(ab_t) x0_hat) / sqrt(1 - ab_t)
// The hidden layers are narrower than the image, so the noise estimate is
// routed through an x0 estimate instead of the bottleneck. gate_t is a learned
// per-timestep scalar. init() starts it at 0.01 sqrt(1 - ab_t) with a small
// random W3, so an untrained denoiser predicts eps_hat close to 0 while
// dL/dc is already nonzero.
// Images are mapped to [-1, 1] before noising.

#include <algorithm>
#include <cmath>
#include <vector>

#include "photobridge/ad/ops.hpp"
#include "photobridge/image.hpp"
#include "photobridge/models/params.hpp"

namespace photobridge::models {

struct GenConfig {
  std::size_t sd_vocab_size = 0;
  std::size_t emb_dim = 64;
  std::size_t cond_dim = 64;
  std::size_t hidden = 256;
  std::size_t temb_dim = 32;
  int diffusion_steps = 64;
  double beta_start = 1e-4;
  double beta_end = 0.2;  // alpha_bar_T ~ 1.7e-3, so x_T is close to pure noise

  void validate() const {
    if (sd_vocab_size == 0) throw ConfigError("gen.sd_vocab_size must be > 0");
    if (emb_dim == 0 || cond_dim == 0 || hidden == 0) throw ConfigError("gen dimensions must be > 0");
    if (temb_dim == 0 || temb_dim % 2 != 0) throw ConfigError("gen.temb_dim must be a positive even number");
    if (diffusion_steps < 1) throw ConfigError("gen.diffusion_steps must be >= 1");
    if (!(beta_start > 0) || !(beta_end >= beta_start) || !(beta_end < 1)) {
      throw ConfigError("gen betas must satisfy 0 < beta_start <= beta_end < 1");
    }
  }
};

// Linear beta schedule; index t in [1, T].
struct NoiseSchedule {
  std::vector<double> beta, alpha_bar;  // index 0 unused

  explicit NoiseSchedule(const GenConfig& cfg) {
    const int n = cfg.diffusion_steps;
    beta.assign(static_cast<std::size_t>(n) + 1, 0.0);
    alpha_bar.assign(static_cast<std::size_t>(n) + 1, 1.0);
    for (int t = 1; t <= n; ++t) {
      const double b = n == 1 ? cfg.beta_start : cfg.beta_start + (cfg.beta_end - cfg.beta_start) * (t - 1) / (n - 1);
      beta[static_cast<std::size_t>(t)] = b;
      alpha_bar[static_cast<std::size_t>(t)] = alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - b);
    }
  }
  int steps() const { return static_cast<int>(beta.size()) - 1; }
};

template <std::floating_point T>
struct Generator {
  using value_type = T;

  GenConfig config;
  Tensor<T> sd_emb, cond_w, cond_b;
  Tensor<T> w_x, w_c1, w_t, b1, w2, w_c2, b2, w3, b3, gate;

  explicit Generator(const GenConfig& cfg) : config(cfg) {
    cfg.validate();
    auto z = [](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
    const auto h = cfg.hidden, c = cfg.cond_dim;
    sd_emb = z({cfg.sd_vocab_size, cfg.emb_dim});
    cond_w = z({cfg.emb_dim, c}), cond_b = z({1, c});
    w_x = z({kImageSize, h}), w_c1 = z({c, h}), w_t = z({cfg.temb_dim, h}), b1 = z({1, h});
    w2 = z({h, h}), w_c2 = z({c, h}), b2 = z({1, h});
    w3 = z({h, kImageSize}), b3 = z({1, kImageSize});
    gate = z({static_cast<std::size_t>(cfg.diffusion_steps), 1});
  }

  static Generator init(const GenConfig& cfg, Rng& rng) {
    Generator g(cfg);
    auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
    const auto h = cfg.hidden, c = cfg.cond_dim;
    g.sd_emb = normal_init<T>({cfg.sd_vocab_size, cfg.emb_dim}, rng, 1.0);
    g.cond_w = normal_init<T>({cfg.emb_dim, c}, rng, fan(cfg.emb_dim));
    g.w_x = normal_init<T>({kImageSize, h}, rng, fan(kImageSize));
    g.w_c1 = normal_init<T>({c, h}, rng, fan(c));
    g.w_t = normal_init<T>({cfg.temb_dim, h}, rng, fan(cfg.temb_dim));
    g.w2 = normal_init<T>({h, h}, rng, fan(h));
    g.w_c2 = normal_init<T>({c, h}, rng, fan(c));
    g.w3 = normal_init<T>({h, kImageSize}, rng, 0.1 * fan(h));
    const NoiseSchedule s(cfg);
    std::vector<T> gate(static_cast<std::size_t>(cfg.diffusion_steps));
    for (std::size_t t = 1; t <= gate.size(); ++t) gate[t - 1] = static_cast<T>(0.01 * std::sqrt(1.0 - s.alpha_bar[t]));
    const std::size_t n = gate.size();
    g.gate = Tensor<T>::from({n, 1}, std::move(gate), true);
    return g;
  }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    f("gen.sd_emb", s.sd_emb), f("gen.cond_w", s.cond_w), f("gen.cond_b", s.cond_b);
    f("gen.w_x", s.w_x), f("gen.w_c1", s.w_c1), f("gen.w_t", s.w_t), f("gen.b1", s.b1);
    f("gen.w2", s.w2), f("gen.w_c2", s.w_c2), f("gen.b2", s.b2);
    f("gen.w3", s.w3), f("gen.b3", s.b3), f("gen.gate", s.gate);
  }
};

// Sinusoidal timestep embedding, one row per timestep.
template <std::floating_point T>
Tensor<T> timestep_embedding(std::span<const int> ts, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> v(ts.size() * dim);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(1000.0) * static_cast<double>(k) / static_cast<double>(half));
      v[i * dim + k] = static_cast<T>(std::sin(ts[i] * freq));
      v[i * dim + half + k] = static_cast<T>(std::cos(ts[i] * freq));
    }
  }
  return Tensor<T>::from({ts.size(), dim}, std::move(v));
}

// 1 x cond_dim conditioning vector from R^SD (n_sd x |V^SD|).
template <std::floating_point T>
Tensor<T> condition(const Generator<T>& g, const Tensor<T>& r_sd) {
  if (r_sd.rank() != 2 || r_sd.cols() != g.config.sd_vocab_size) {
    throw DimensionError("condition: R^SD width " + std::to_string(r_sd.cols()) + " != |V^SD| " +
                         std::to_string(g.config.sd_vocab_size));
  }
  return ad::linear(ad::mean(ad::matmul(r_sd, g.sd_emb), 0), g.cond_w, g.cond_b);
}

// eps_hat for k noisy rows (k x 768) sharing one condition (1 x cond_dim).
template <std::floating_point T>
Tensor<T> predict_noise(const Generator<T>& g, const Tensor<T>& x_t, const Tensor<T>& cond, std::span<const int> ts) {
  const std::size_t k = x_t.rows();
  const auto cb = ad::broadcast_rows(cond, k);
  auto h1 = ad::matmul(x_t, g.w_x);
  h1 = ad::add(h1, ad::matmul(cb, g.w_c1));
  h1 = ad::add(h1, ad::matmul(timestep_embedding<T>(ts, g.config.temb_dim), g.w_t));
  h1 = ad::silu(ad::add(h1, g.b1));
  auto h2 = ad::silu(ad::add(ad::add(ad::matmul(h1, g.w2), ad::matmul(cb, g.w_c2)), g.b2));
  const auto x0_hat = ad::linear(h2, g.w3, g.b3);
  const NoiseSchedule s(g.config);
  std::vector<T> inv(k * kImageSize), snr(k * kImageSize);
  for (std::size_t i = 0; i < k; ++i) {
    if (ts[i] < 1 || ts[i] > s.steps()) {
      throw ConfigError("diffusion timestep " + std::to_string(ts[i]) + " outside [1, " + std::to_string(s.steps()) + "]");
    }
    const double ab = s.alpha_bar[static_cast<std::size_t>(ts[i])];
    std::fill_n(inv.begin() + static_cast<std::ptrdiff_t>(i * kImageSize), kImageSize, static_cast<T>(1.0 / std::sqrt(1.0 - ab)));
    std::fill_n(snr.begin() + static_cast<std::ptrdiff_t>(i * kImageSize), kImageSize,
                static_cast<T>(std::sqrt(ab) / std::sqrt(1.0 - ab)));
  }
  const auto resid = ad::sub(ad::mul(Tensor<T>::from({k, kImageSize}, std::move(inv)), x_t),
                             ad::mul(Tensor<T>::from({k, kImageSize}, std::move(snr)), x0_hat));
  std::vector<int> rows(ts.begin(), ts.end());
  for (auto& r : rows) --r;
  const auto gate = ad::matmul(ad::gather_rows(g.gate, rows), Tensor<T>::filled({1, kImageSize}, T(1)));
  return ad::mul(gate, resid);
}

inline std::vector<double> to_signed(const ToyImage& img) {
  std::vector<double> x(kImageSize);
  for (std::size_t i = 0; i < kImageSize; ++i) x[i] = 2.0 * img.pixels[i] - 1.0;
  return x;
}

// Noised rows x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, one per timestep.
template <std::floating_point T>
Tensor<T> forward_noise(const NoiseSchedule& s, const ToyImage& img, std::span<const int> ts, const Tensor<T>& eps) {
  const auto x0 = to_signed(img);
  std::vector<T> v(ts.size() * kImageSize);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (ts[i] < 1 || ts[i] > s.steps()) {
      throw ConfigError("diffusion timestep " + std::to_string(ts[i]) + " outside [1, " + std::to_string(s.steps()) + "]");
    }
    const double ab = s.alpha_bar[static_cast<std::size_t>(ts[i])];
    for (std::size_t j = 0; j < kImageSize; ++j) {
      v[i * kImageSize + j] = static_cast<T>(std::sqrt(ab) * x0[j]) + static_cast<T>(std::sqrt(1 - ab)) * eps.data()[i * kImageSize + j];
    }
  }
  return Tensor<T>::from({ts.size(), kImageSize}, std::move(v));
}

// L^v = MSE(eps_hat, eps) with explicit timesteps and noise (k x 768).
template <std::floating_point T>
Tensor<T> diffusion_loss(const Generator<T>& g, const Tensor<T>& r_sd, const ToyImage& img, std::span<const int> ts,
                         const Tensor<T>& eps) {
  if (ts.empty()) throw ConfigError("diffusion_loss: no timesteps");
  if (eps.rank() != 2 || eps.rows() != ts.size() || eps.cols() != kImageSize) {
    throw DimensionError("diffusion_loss: noise must be " + std::to_string(ts.size()) + " x " + std::to_string(kImageSize));
  }
  const NoiseSchedule s(g.config);
  const auto x_t = forward_noise(s, img, ts, eps);
  return ad::mse(predict_noise(g, x_t, condition(g, r_sd), ts), eps);
}

struct DiffusionDraw {
  std::vector<int> ts;
  ad::Tensor<double> eps;
};

inline DiffusionDraw draw_diffusion_noise(const GenConfig& cfg, std::size_t k, Rng& rng) {
  DiffusionDraw d;
  for (std::size_t i = 0; i < k; ++i) d.ts.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.diffusion_steps))));
  std::vector<double> e(k * kImageSize);
  for (auto& x : e) x = rng.normal();
  d.eps = ad::Tensor<double>::from({k, kImageSize}, std::move(e));
  return d;
}

// Samples k timesteps and Gaussian noise from rng.
template <std::floating_point T>
Tensor<T> diffusion_loss(const Generator<T>& g, const Tensor<T>& r_sd, const ToyImage& img, std::size_t k, Rng& rng) {
  const auto d = draw_diffusion_noise(g.config, k, rng);
  return diffusion_loss(g, r_sd, img, d.ts, d.eps.template cast<T>());
}

// Ancestral sampling from pure noise with a given condition row. With
// steps < T the schedule is respaced over evenly spaced timesteps. The
// predicted x0 is clipped to [-1, 1] at every step.
inline ToyImage sample_image_from_condition(const Generator<double>& g, const Tensor<double>& cond, int steps, Rng& rng) {
  ad::NoGradGuard no_grad;
  const NoiseSchedule s(g.config);
  const int n = s.steps();
  steps = std::clamp(steps, 1, n);
  std::vector<int> seq;
  for (int i = 0; i < steps; ++i) seq.push_back(static_cast<int>(std::lround(1.0 + (n - 1.0) * i / std::max(steps - 1, 1))));
  if (steps == 1) seq = {n};
  std::vector<double> x(kImageSize);
  for (auto& v : x) v = rng.normal();
  for (int i = steps - 1; i >= 0; --i) {
    const int t = seq[static_cast<std::size_t>(i)];
    const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
    const double ab_prev = i > 0 ? s.alpha_bar[static_cast<std::size_t>(seq[static_cast<std::size_t>(i) - 1])] : 1.0;
    const double beta = 1.0 - ab / ab_prev;
    const std::vector<int> ts{t};
    const auto eps = predict_noise(g, ad::Tensor<double>::from({1, kImageSize}, x), cond, ts);
    for (std::size_t j = 0; j < kImageSize; ++j) {
      double x0 = (x[j] - std::sqrt(1 - ab) * eps.data()[j]) / std::sqrt(ab);
      x0 = std::clamp(x0, -1.0, 1.0);
      // Posterior q(x_{t-1} | x_t, x0).
      const double mean = (std::sqrt(ab_prev) * beta / (1 - ab)) * x0 + (std::sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * x[j];
      x[j] = mean;
    }
    if (i > 0) {
      const double var = beta * (1 - ab_prev) / (1 - ab);
      for (auto& v : x) v += std::sqrt(var) * rng.normal();
    }
  }
  ToyImage img;
  for (std::size_t j = 0; j < kImageSize; ++j) img.pixels[j] = std::clamp((x[j] + 1.0) / 2.0, 0.0, 1.0);
  return img;
}

inline ToyImage sample_image(const Generator<double>& g, const Tensor<double>& r_sd, int steps, Rng& rng) {
  ad::NoGradGuard no_grad;
  return sample_image_from_condition(g, condition(g, r_sd), steps, rng);
}

}  // namespace photobridge::models
