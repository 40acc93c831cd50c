#pragma once

// 3x16x16 synthetic photos of one coloured shape, their captions, a PPM (P6)
// codec, and the template-matching attribute oracle.
//
// Pixel layout is CHW, values in [0, 1]. Clean renders only use values k/255,
// so a PPM round trip is exact.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "photobridge/errors.hpp"
#include "photobridge/rng.hpp"

namespace photobridge {

inline constexpr std::size_t kImageSide = 16;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kImageSize = kImageChannels * kImagePixels;

inline constexpr std::array<std::string_view, 4> kShapes = {"circle", "square", "triangle", "cross"};
inline constexpr std::array<std::string_view, 6> kColors = {"red", "green", "blue", "yellow", "purple", "orange"};
inline constexpr std::array<std::array<int, 3>, 6> kColorRgb = {
    {{255, 0, 0}, {0, 200, 0}, {0, 0, 255}, {255, 255, 0}, {160, 32, 240}, {255, 140, 0}}};
inline constexpr std::array<std::string_view, 9> kPositions = {"top left",    "top middle",    "top right",
                                                               "middle left", "center",        "middle right",
                                                               "bottom left", "bottom middle", "bottom right"};
inline constexpr std::array<std::string_view, 2> kSizes = {"small", "large"};

struct Attributes {
  int shape = 0;
  int color = 0;
  int position = 0;
  int size = 0;

  bool operator==(const Attributes&) const = default;

  // Dense index in [0, 432): shape-major.
  int index() const { return ((shape * 6 + color) * 9 + position) * 2 + size; }
  static Attributes from_index(int k) {
    Attributes a;
    a.size = k % 2;
    k /= 2;
    a.position = k % 9;
    k /= 9;
    a.color = k % 6;
    a.shape = k / 6;
    return a;
  }
  static constexpr int kCount = 4 * 6 * 9 * 2;

  static Attributes random(Rng& rng) {
    return {static_cast<int>(rng.below(4)), static_cast<int>(rng.below(6)), static_cast<int>(rng.below(9)),
            static_cast<int>(rng.below(2))};
  }
};

// "a {size} {color} {shape} in the {position}"
inline std::string caption_for(const Attributes& a) {
  std::string s = "a ";
  s += kSizes.at(static_cast<std::size_t>(a.size));
  s += ' ';
  s += kColors.at(static_cast<std::size_t>(a.color));
  s += ' ';
  s += kShapes.at(static_cast<std::size_t>(a.shape));
  s += " in the ";
  s += kPositions.at(static_cast<std::size_t>(a.position));
  return s;
}

// Inverse of caption_for; nullopt for anything else.
inline std::optional<Attributes> parse_caption(std::string_view text) {
  for (int k = 0; k < Attributes::kCount; ++k) {
    const auto a = Attributes::from_index(k);
    if (caption_for(a) == text) return a;
  }
  return std::nullopt;
}

struct ToyImage {
  std::vector<double> pixels = std::vector<double>(kImageSize, 0.0);

  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * kImageSide + y) * kImageSide + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * kImageSide + y) * kImageSide + x]; }
  bool operator==(const ToyImage&) const = default;
};

namespace detail {

inline bool inside(int shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 2:  // apex up, base at dy = +r
      return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    default: {
      const double arm = 0.35 * r;
      return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
    }
  }
}

}  // namespace detail

inline constexpr double kSmallRadius = 2.6;
inline constexpr double kLargeRadius = 3.8;

// Binary coverage sampled at pixel centres on a black background.
inline ToyImage render(const Attributes& a) {
  ToyImage img;
  const double cell = static_cast<double>(kImageSide) / 3.0;
  const double cy = (a.position / 3 + 0.5) * cell;
  const double cx = (a.position % 3 + 0.5) * cell;
  const double r = a.size == 0 ? kSmallRadius : kLargeRadius;
  const auto& rgb = kColorRgb.at(static_cast<std::size_t>(a.color));
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      if (!detail::inside(a.shape, x + 0.5 - cx, y + 0.5 - cy, r)) continue;
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c] / 255.0;
    }
  }
  return img;
}

inline ToyImage uniform_noise_image(Rng& rng) {
  ToyImage img;
  for (auto& v : img.pixels) v = static_cast<double>(rng.below(256)) / 255.0;
  return img;
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255). Pixels are rounded to the nearest k/255 and clamped.

inline std::string encode_ppm(const ToyImage& img) {
  std::string out = "P6\n16 16\n255\n";
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

inline ToyImage decode_ppm(const std::string& bytes, const std::string& origin = "<ppm>") {
  std::istringstream is(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (!is || magic != "P6") throw FormatError(origin + ": not a binary PPM (P6)");
  if (w != static_cast<int>(kImageSide) || h != static_cast<int>(kImageSide) || maxval != 255) {
    throw FormatError(origin + ": expected a 16x16 PPM with maxval 255");
  }
  is.get();  // single whitespace byte after maxval
  ToyImage img;
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const int b = is.get();
        if (b == std::char_traits<char>::eof()) throw FormatError(origin + ": truncated pixel data");
        img.at(c, y, x) = b / 255.0;
      }
    }
  }
  return img;
}

inline void save_ppm(const ToyImage& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write image " + path);
  const auto bytes = encode_ppm(img);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline ToyImage load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return decode_ppm(ss.str(), path);
}

// ---------------------------------------------------------------------------
// Attribute oracle: match against every clean template. Score is the number of
// values within kOracleTolerance; ties resolve to the lower squared error, then
// the lower template index.

inline constexpr double kOracleTolerance = 0.1;

inline const std::vector<ToyImage>& template_bank() {
  static const std::vector<ToyImage> bank = [] {
    std::vector<ToyImage> b;
    b.reserve(Attributes::kCount);
    for (int k = 0; k < Attributes::kCount; ++k) b.push_back(render(Attributes::from_index(k)));
    return b;
  }();
  return bank;
}

inline Attributes decode_attributes(const ToyImage& img) {
  const auto& bank = template_bank();
  int best = 0;
  std::size_t best_score = 0;
  double best_sse = std::numeric_limits<double>::infinity();
  for (int k = 0; k < Attributes::kCount; ++k) {
    const auto& t = bank[static_cast<std::size_t>(k)].pixels;
    std::size_t score = 0;
    double sse = 0;
    for (std::size_t i = 0; i < kImageSize; ++i) {
      const double d = img.pixels[i] - t[i];
      score += std::abs(d) <= kOracleTolerance;
      sse += d * d;
    }
    if (score > best_score || (score == best_score && sse < best_sse)) {
      best = k;
      best_score = score;
      best_sse = sse;
    }
  }
  return Attributes::from_index(best);
}

// Posterior over the 432 templates, p(k|x) proportional to
// exp(-sse_k / (2 sigma^2)) with sigma = kOracleTolerance.
inline std::vector<double> template_posterior(const ToyImage& img) {
  const auto& bank = template_bank();
  std::vector<double> logp(Attributes::kCount);
  for (std::size_t k = 0; k < logp.size(); ++k) {
    double sse = 0;
    for (std::size_t i = 0; i < kImageSize; ++i) {
      const double d = img.pixels[i] - bank[k].pixels[i];
      sse += d * d;
    }
    logp[k] = -sse / (2 * kOracleTolerance * kOracleTolerance);
  }
  const double mx = *std::max_element(logp.begin(), logp.end());
  double z = 0;
  for (auto& v : logp) z += v = std::exp(v - mx);
  for (auto& v : logp) v /= z;
  return logp;
}

// Deterministic stand-in picture for a caption with no pixels (ingestion).
inline ToyImage placeholder_render(std::string_view caption) {
  return render(Attributes::from_index(static_cast<int>(splitmix64(fnv1a(caption)) % Attributes::kCount)));
}

}  // namespace photobridge
