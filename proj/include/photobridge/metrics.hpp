#pragma once

// Text and image metrics.
//
// BLEU: clipped n-gram precision for orders 1..n (n <= 2), geometric mean,
// brevity penalty exp(1 - r/c) when c < r. A zero order-2 count is smoothed
// to 1/(total+1); order 1 is never smoothed. Corpus BLEU sums the counts over
// sentences (micro average) before combining.
// Rouge-L: LCS F1 with beta = 1; corpus value is the mean over sentences.
//
// Image metrics use the attribute oracle and a frozen random probe:
// 16 conv filters (3x3x3, stride 2, pad 1) drawn from the probe seed, ReLU,
// then 4x4 average pooling, giving 64 features per image. probe_fd is the
// Frechet distance between Gaussian fits of probe features, with 1e-6 added to
// the covariance diagonals and negative eigenvalues clamped to 0 inside the
// matrix square root. probe_is = exp(mean KL(p_i || mean_j p_j)) over the
// oracle's template posteriors.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "photobridge/errors.hpp"
#include "photobridge/image.hpp"
#include "photobridge/log.hpp"
#include "photobridge/vocab.hpp"

namespace photobridge::metrics {

using Words = std::vector<std::string>;

// Lower-cased whitespace tokens.
inline Words words(std::string_view text) { return split_words(normalize_text(text)); }

struct BleuCounts {
  std::array<double, 2> matched{};
  std::array<double, 2> total{};
  double hyp_len = 0;
  double ref_len = 0;

  BleuCounts& operator+=(const BleuCounts& o) {
    for (std::size_t k = 0; k < 2; ++k) matched[k] += o.matched[k], total[k] += o.total[k];
    hyp_len += o.hyp_len, ref_len += o.ref_len;
    return *this;
  }
};

inline BleuCounts bleu_counts(const Words& hyp, const Words& ref) {
  BleuCounts c;
  c.hyp_len = static_cast<double>(hyp.size());
  c.ref_len = static_cast<double>(ref.size());
  for (std::size_t n = 1; n <= 2; ++n) {
    std::map<std::vector<std::string>, int> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}];
    for (const auto& [g, k] : hyp_counts) {
      const auto it = ref_counts.find(g);
      c.matched[n - 1] += std::min(k, it == ref_counts.end() ? 0 : it->second);
      c.total[n - 1] += k;
    }
  }
  return c;
}

inline double bleu_from_counts(const BleuCounts& c, int n) {
  if (n != 1 && n != 2) throw ConfigError("bleu: order must be 1 or 2, got " + std::to_string(n));
  if (c.hyp_len == 0) {
    log::warn("bleu_empty_hypothesis");
    return 0.0;
  }
  double log_p = 0;
  for (int k = 0; k < n; ++k) {
    double p;
    if (k == 0) {
      p = c.matched[0] / c.total[0];
      if (p == 0) return 0.0;
    } else {
      p = c.matched[k] > 0 ? c.matched[k] / c.total[k] : 1.0 / (c.total[k] + 1.0);
    }
    log_p += std::log(p) / n;
  }
  const double bp = c.hyp_len < c.ref_len ? std::exp(1.0 - c.ref_len / c.hyp_len) : 1.0;
  return bp * std::exp(log_p);
}

inline double bleu(const Words& hyp, const Words& ref, int n) { return bleu_from_counts(bleu_counts(hyp, ref), n); }

inline std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l(const Words& hyp, const Words& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(hyp, ref));
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(hyp.size());
  const double r = lcs / static_cast<double>(ref.size());
  return 2 * p * r / (p + r);
}

// ---------------------------------------------------------------------------

struct AttributeAccuracy {
  double shape = 0, color = 0, position = 0, size = 0, joint = 0;
  std::size_t count = 0;
};

// Running tally; a missing prediction (no image produced) counts as wrong on
// every attribute.
class AttributeTally {
 public:
  void add(const std::optional<Attributes>& predicted, const Attributes& expected) {
    ++n_;
    if (!predicted) return;
    const auto& p = *predicted;
    shape_ += p.shape == expected.shape;
    color_ += p.color == expected.color;
    position_ += p.position == expected.position;
    size_ += p.size == expected.size;
    joint_ += p == expected;
  }
  AttributeAccuracy result() const {
    if (n_ == 0) return {};
    const double n = static_cast<double>(n_);
    return {shape_ / n, color_ / n, position_ / n, size_ / n, joint_ / n, n_};
  }

 private:
  std::size_t n_ = 0;
  double shape_ = 0, color_ = 0, position_ = 0, size_ = 0, joint_ = 0;
};

inline AttributeAccuracy attribute_accuracy(std::span<const ToyImage> images, std::span<const Attributes> expected) {
  if (images.size() != expected.size()) throw DimensionError("attribute_accuracy: image and label counts differ");
  AttributeTally t;
  for (std::size_t i = 0; i < images.size(); ++i) t.add(decode_attributes(images[i]), expected[i]);
  return t.result();
}

// ---------------------------------------------------------------------------

inline constexpr std::size_t kProbeFilters = 16;
inline constexpr std::size_t kProbeFeatures = kProbeFilters * 4;
inline constexpr std::size_t kMinProbeSet = 64;
inline constexpr double kProbeRegularization = 1e-6;

class Probe {
 public:
  explicit Probe(std::uint64_t seed) : seed_(seed) {
    Rng rng = Rng(seed).split("probe");
    weights_.resize(kProbeFilters * 27);
    bias_.resize(kProbeFilters);
    for (auto& w : weights_) w = rng.normal() / std::sqrt(27.0);
    for (auto& b : bias_) b = 0.1 * rng.normal();
  }

  std::uint64_t seed() const { return seed_; }

  std::vector<double> features(const ToyImage& img) const {
    constexpr int side = static_cast<int>(kImageSide);
    constexpr int out = side / 2;
    std::vector<double> f(kProbeFeatures, 0.0);
    for (std::size_t k = 0; k < kProbeFilters; ++k)
      for (int oy = 0; oy < out; ++oy)
        for (int ox = 0; ox < out; ++ox) {
          double acc = bias_[k];
          for (int c = 0; c < 3; ++c)
            for (int dy = 0; dy < 3; ++dy)
              for (int dx = 0; dx < 3; ++dx) {
                const int y = 2 * oy + dy - 1, x = 2 * ox + dx - 1;
                if (y < 0 || y >= side || x < 0 || x >= side) continue;
                acc += weights_[k * 27 + static_cast<std::size_t>(c * 9 + dy * 3 + dx)] *
                       img.at(static_cast<std::size_t>(c), static_cast<std::size_t>(y), static_cast<std::size_t>(x));
              }
          const std::size_t cell = static_cast<std::size_t>((oy / 4) * 2 + ox / 4);
          f[k * 4 + cell] += std::max(acc, 0.0) / 16.0;
        }
    return f;
  }

 private:
  std::uint64_t seed_;
  std::vector<double> weights_, bias_;
};

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline Gaussian fit_gaussian(const Probe& probe, std::span<const ToyImage> images) {
  if (images.size() < kMinProbeSet) {
    throw StatisticsError("probe statistics need >= " + std::to_string(kMinProbeSet) + " images, got " +
                          std::to_string(images.size()));
  }
  const auto n = static_cast<Eigen::Index>(images.size());
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(kProbeFeatures));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto f = probe.features(images[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = f[static_cast<std::size_t>(j)];
  }
  Gaussian g;
  g.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - g.mean.transpose();
  g.cov = centered.transpose() * centered / static_cast<double>(n - 1);
  g.cov.diagonal().array() += kProbeRegularization;
  return g;
}

// Symmetric PSD square root with negative eigenvalues clamped to 0.
inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

inline double frechet_distance(const Gaussian& a, const Gaussian& b) {
  const Eigen::MatrixXd sa = sqrt_psd(a.cov);
  const Eigen::MatrixXd inner = sa * b.cov * sa;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

inline double probe_fd(std::span<const ToyImage> generated, std::span<const ToyImage> reference, std::uint64_t probe_seed) {
  const Probe probe(probe_seed);
  return frechet_distance(fit_gaussian(probe, generated), fit_gaussian(probe, reference));
}

inline double probe_is(std::span<const ToyImage> images) {
  if (images.empty()) throw StatisticsError("probe_is: empty image set");
  std::vector<std::vector<double>> post;
  std::vector<double> marginal(Attributes::kCount, 0.0);
  for (const auto& img : images) {
    post.push_back(template_posterior(img));
    for (std::size_t k = 0; k < marginal.size(); ++k) marginal[k] += post.back()[k] / static_cast<double>(images.size());
  }
  double kl = 0;
  for (const auto& p : post)
    for (std::size_t k = 0; k < p.size(); ++k)
      if (p[k] > 0) kl += p[k] * (std::log(p[k]) - std::log(marginal[k]));
  return std::exp(std::max(kl / static_cast<double>(images.size()), 0.0));
}

struct ProbeScores {
  double probe_fd = 0;
  double probe_is = 1;
};

inline ProbeScores probe_scores(std::span<const ToyImage> generated, std::span<const ToyImage> reference,
                                std::uint64_t probe_seed) {
  return {probe_fd(generated, reference, probe_seed), probe_is(generated)};
}

// ---------------------------------------------------------------------------

// Accumulates one (hypothesis, reference) pair per evaluated dialogue.
class TextTally {
 public:
  void add(const Words& hyp, const Words& ref) {
    counts_ += bleu_counts(hyp, ref);
    rouge_sum_ += rouge_l(hyp, ref);
    ++n_;
  }
  std::size_t count() const { return n_; }
  double bleu1() const { return n_ ? bleu_from_counts(counts_, 1) : 0.0; }
  double bleu2() const { return n_ ? bleu_from_counts(counts_, 2) : 0.0; }
  double rouge() const { return n_ ? rouge_sum_ / static_cast<double>(n_) : 0.0; }

 private:
  BleuCounts counts_;
  double rouge_sum_ = 0;
  std::size_t n_ = 0;
};

struct MetricReport {
  double bleu1 = 0, bleu2 = 0, rougeL = 0;
  AttributeAccuracy attributes;
  std::optional<double> probe_fd;  // absent when fewer than 64 images on a side
  std::optional<double> probe_is;
  std::size_t n_samples = 0;
  std::size_t n_image_samples = 0;
  std::uint64_t probe_seed = 0;
  std::map<std::string, MetricReport> per_speaker;
};

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  j["bleu1"] = r.bleu1;
  j["bleu2"] = r.bleu2;
  j["rougeL"] = r.rougeL;
  j["attribute_accuracy"] = {{"shape", r.attributes.shape},       {"color", r.attributes.color},
                             {"position", r.attributes.position}, {"size", r.attributes.size},
                             {"joint", r.attributes.joint},       {"count", r.attributes.count}};
  j["probe_fd"] = r.probe_fd ? nlohmann::json(*r.probe_fd) : nlohmann::json(nullptr);
  j["probe_is"] = r.probe_is ? nlohmann::json(*r.probe_is) : nlohmann::json(nullptr);
  j["n_samples"] = r.n_samples;
  j["n_image_samples"] = r.n_image_samples;
  j["probe_seed"] = r.probe_seed;
  if (!r.per_speaker.empty()) {
    j["per_speaker"] = nlohmann::json::object();
    for (const auto& [k, v] : r.per_speaker) j["per_speaker"][k] = to_json(v);
  }
  return j;
}

inline std::string csv_header() {
  return "bleu1,bleu2,rougeL,acc_shape,acc_color,acc_position,acc_size,acc_joint,probe_fd,probe_is,n_samples,"
         "n_image_samples,probe_seed";
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string csv_row(const MetricReport& r) {
  const auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  return fmt(r.bleu1) + "," + fmt(r.bleu2) + "," + fmt(r.rougeL) + "," + fmt(r.attributes.shape) + "," +
         fmt(r.attributes.color) + "," + fmt(r.attributes.position) + "," + fmt(r.attributes.size) + "," +
         fmt(r.attributes.joint) + "," + opt(r.probe_fd) + "," + opt(r.probe_is) + "," + std::to_string(r.n_samples) +
         "," + std::to_string(r.n_image_samples) + "," + std::to_string(r.probe_seed);
}

}  // namespace photobridge::metrics
