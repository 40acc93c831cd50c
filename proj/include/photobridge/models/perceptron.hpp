#pragma once

// Image perceptron: 4x4 patches (48 values, CHW order inside a patch) are
// projected to d, learned position codes are added, and a summary row (mean of
// the patch rows plus a learned code) is appended: 17 rows per image.

#include <vector>

#include "photobridge/ad/ops.hpp"
#include "photobridge/image.hpp"
#include "photobridge/models/params.hpp"

namespace photobridge::models {

inline constexpr std::size_t kPatch = 4;
inline constexpr std::size_t kPatchesPerSide = kImageSide / kPatch;
inline constexpr std::size_t kNumPatches = kPatchesPerSide * kPatchesPerSide;
inline constexpr std::size_t kPatchDim = kImageChannels * kPatch * kPatch;
inline constexpr std::size_t kImageEmbeddingRows = kNumPatches + 1;

struct PerceptronConfig {
  std::size_t d_model = 128;
};

template <std::floating_point T>
struct Perceptron {
  using value_type = T;

  PerceptronConfig config;
  Tensor<T> proj_w, proj_b, pos, summary;

  explicit Perceptron(const PerceptronConfig& cfg) : config(cfg) {
    if (cfg.d_model == 0) throw ConfigError("perceptron.d_model must be > 0");
    const auto d = cfg.d_model;
    proj_w = Tensor<T>::zeros({kPatchDim, d}, true);
    proj_b = Tensor<T>::zeros({1, d}, true);
    pos = Tensor<T>::zeros({kNumPatches, d}, true);
    summary = Tensor<T>::zeros({1, d}, true);
  }

  static Perceptron init(const PerceptronConfig& cfg, Rng& rng) {
    Perceptron p(cfg);
    p.proj_w = normal_init<T>({kPatchDim, cfg.d_model}, rng, 1.0 / std::sqrt(double(kPatchDim)));
    p.pos = normal_init<T>({kNumPatches, cfg.d_model}, rng, 0.1);
    p.summary = normal_init<T>({1, cfg.d_model}, rng, 0.1);
    return p;
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
    f("perceptron.proj_w", s.proj_w);
    f("perceptron.proj_b", s.proj_b);
    f("perceptron.pos", s.pos);
    f("perceptron.summary", s.summary);
  }
};

// 16 x 48 patch matrix, patches in row-major grid order.
template <std::floating_point T>
Tensor<T> image_patches(const ToyImage& img) {
  if (img.pixels.size() != kImageSize) {
    throw DimensionError("perceive_image: expected " + std::to_string(kImageSize) + " values, got " +
                         std::to_string(img.pixels.size()));
  }
  std::vector<T> v(kNumPatches * kPatchDim);
  for (std::size_t py = 0; py < kPatchesPerSide; ++py)
    for (std::size_t px = 0; px < kPatchesPerSide; ++px) {
      const std::size_t row = py * kPatchesPerSide + px;
      std::size_t k = 0;
      for (std::size_t c = 0; c < kImageChannels; ++c)
        for (std::size_t y = 0; y < kPatch; ++y)
          for (std::size_t x = 0; x < kPatch; ++x)
            v[row * kPatchDim + k++] = static_cast<T>(img.at(c, py * kPatch + y, px * kPatch + x));
    }
  return Tensor<T>::from({kNumPatches, kPatchDim}, std::move(v));
}

// Patch-local projection, before position codes.
template <std::floating_point T>
Tensor<T> project_patches(const Perceptron<T>& p, const Tensor<T>& patches) {
  return ad::linear(patches, p.proj_w, p.proj_b);
}

// 17 x d: patch rows then the summary row.
template <std::floating_point T>
Tensor<T> perceive_image(const Perceptron<T>& p, const ToyImage& img) {
  auto e = ad::add(project_patches(p, image_patches<T>(img)), p.pos);
  auto s = ad::add(ad::mean(e, 0), p.summary);
  return ad::concat_rows(std::vector<Tensor<T>>{e, s});
}

}  // namespace photobridge::models
