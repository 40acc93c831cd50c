#pragma once

// Joint training L = L^t + alpha * L^v over the dialogue model, the image
// perceptron and the image generator, plus evaluation, gradient-flow audits
// and the fixed-temperature sweep.
//
// Mode semantics:
//   e2e                   context images via the perceptron; output captions
//                         reach the generator through the straight-through
//                         bridge.
//   pipeline              context images as caption text; output captions are
//                         handed over as detached argmax text.
//   e2e_minus_perceptron  caption text in the context; bridged output.
//   e2e_minus_generator   perceptron in the context; detached output.
//
// Randomness: every stream derives from RunConfig::seed by name
//   "vocab.llm", "vocab.sd"          tokenizer training
//   "init.lm", "init.perceptron", "init.gen"
//   "order".split(epoch)             batch order
//   "train".split(step).split(i)     Gumbel and diffusion noise of sample i
//   "dev"                            dev-loss noise (same every epoch)
//   "samples"                        epoch sample images
//   "eval".split(i)                  decoding and image sampling of sample i

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "photobridge/ad/adamw.hpp"
#include "photobridge/ad/checkpoint.hpp"
#include "photobridge/ad/ops.hpp"
#include "photobridge/bridge.hpp"
#include "photobridge/config.hpp"
#include "photobridge/data.hpp"
#include "photobridge/log.hpp"
#include "photobridge/metrics.hpp"
#include "photobridge/models/generator.hpp"
#include "photobridge/models/lm.hpp"
#include "photobridge/models/params.hpp"
#include "photobridge/models/perceptron.hpp"
#include "photobridge/sampling.hpp"
#include "photobridge/vocab.hpp"

namespace photobridge::trainer {

using ad::Tensor;
using models::Generator;
using models::LanguageModel;
using models::Perceptron;

// ---------------------------------------------------------------------------
// System: tokenizers and the three trainable models.

struct System {
  RunConfig config;
  Vocabulary v_llm, v_sd;
  LanguageModel<double> lm;
  Perceptron<double> perceptron;
  Generator<double> gen;

  std::vector<Tensor<double>> parameters() const {
    auto p = models::parameters(lm);
    for (auto& t : models::parameters(perceptron)) p.push_back(t);
    for (auto& t : models::parameters(gen)) p.push_back(t);
    return p;
  }

  void zero_grads() const {
    for (const auto& t : parameters()) t.zero_grad();
  }

  // Independent copy: fresh parameter leaves, same values.
  System clone() const {
    return {config, v_llm, v_sd, models::detach_model(lm), models::detach_model(perceptron), models::detach_model(gen)};
  }
};

inline models::LmConfig lm_config(const RunConfig& cfg, const Vocabulary& v_llm) {
  auto c = cfg.lm;
  c.vocab_size = v_llm.size();
  return c;
}

inline models::GenConfig gen_config(const RunConfig& cfg, const Vocabulary& v_sd) {
  auto c = cfg.gen;
  c.sd_vocab_size = v_sd.size();
  return c;
}

// Tokenizers are trained on the train split: the dialogue tokenizer on every
// utterance and caption, the generator tokenizer on captions only.
inline System init_system(const RunConfig& cfg, const data::Dataset& train) {
  cfg.validate();
  if (train.empty()) throw DataError("init_system: empty training set");
  const Rng root(cfg.seed);
  auto llm_corpus = data::text_lines(train);
  auto sd_corpus = data::caption_lines(train);
  if (sd_corpus.empty()) sd_corpus = llm_corpus;
  auto v_llm = train_bpe(llm_corpus, cfg.llm_vocab_size, root.split("vocab.llm").seed());
  auto v_sd = train_bpe(sd_corpus, cfg.sd_vocab_size, root.split("vocab.sd").seed());
  Rng r_lm = root.split("init.lm"), r_p = root.split("init.perceptron"), r_g = root.split("init.gen");
  auto lm = LanguageModel<double>::init(lm_config(cfg, v_llm), r_lm);
  auto p = Perceptron<double>::init(models::PerceptronConfig{cfg.lm.d_model}, r_p);
  auto g = Generator<double>::init(gen_config(cfg, v_sd), r_g);
  return {cfg, std::move(v_llm), std::move(v_sd), std::move(lm), std::move(p), std::move(g)};
}

// Checkpoints are self-contained: the metadata carries the effective config
// and both vocabularies.
inline ad::Checkpoint to_checkpoint(const System& s, std::uint64_t step, const Json& extra = Json::object()) {
  ad::Checkpoint ck;
  ck.step = step;
  Json meta = extra;
  meta["config"] = config_to_json(s.config);
  meta["llm_vocab"] = s.v_llm.to_text();
  meta["sd_vocab"] = s.v_sd.to_text();
  ck.metadata = meta.dump();
  models::append_arrays(s.lm, ck.arrays);
  models::append_arrays(s.perceptron, ck.arrays);
  models::append_arrays(s.gen, ck.arrays);
  return ck;
}

inline System from_checkpoint(const ad::Checkpoint& ck, const std::string& origin = "<checkpoint>") {
  const Json meta = Json::parse(ck.metadata, nullptr, false);
  if (meta.is_discarded() || !meta.is_object()) throw FormatError(origin + ": checkpoint metadata is not a JSON object");
  for (const char* key : {"config", "llm_vocab", "sd_vocab"}) {
    if (!meta.contains(key)) throw FormatError(origin + ": checkpoint metadata lacks '" + key + "'");
  }
  const auto cfg = config_from_json(meta["config"], origin + ":config");
  auto v_llm = Vocabulary::from_text(meta["llm_vocab"].get<std::string>(), origin + ":llm_vocab");
  auto v_sd = Vocabulary::from_text(meta["sd_vocab"].get<std::string>(), origin + ":sd_vocab");
  LanguageModel<double> lm(lm_config(cfg, v_llm));
  Perceptron<double> p(models::PerceptronConfig{cfg.lm.d_model});
  Generator<double> g(gen_config(cfg, v_sd));
  models::load_arrays(lm, ck);
  models::load_arrays(p, ck);
  models::load_arrays(g, ck);
  return {cfg, std::move(v_llm), std::move(v_sd), std::move(lm), std::move(p), std::move(g)};
}

inline void save_system(const std::filesystem::path& path, const System& s, std::uint64_t step,
                        const Json& extra = Json::object()) {
  ad::save_checkpoint(path.string(), to_checkpoint(s, step, extra));
}

inline System load_system(const std::filesystem::path& path) {
  return from_checkpoint(ad::load_checkpoint(path.string()), path.string());
}

// ---------------------------------------------------------------------------
// Dialogue encoding.

struct EncodedContext {
  std::vector<int> ids;                 // prompt tokens, ending with the response speaker tag
  std::vector<const ToyImage*> images;  // one per IMAGE_PLACEHOLDER in ids, in order
};

struct EncodedDialogue {
  EncodedContext context;
  std::vector<int> response;                          // formatted response, EOS-terminated
  std::vector<const data::Element*> response_images;  // one per caption span, in order
};

inline std::vector<int> speaker_tag(const Vocabulary& v, data::Speaker s) {
  return v.encode_ids(s == data::Speaker::a ? "a:" : "b:");
}

// Each speaker turn opens with its tag. Context images become a placeholder
// token (perceive) or "[IMG] caption [/IMG]" text. The oldest context
// elements are dropped until the prompt fits `budget` tokens; a single
// oversized text element is cut from the left.
inline EncodedContext encode_context(const data::DialogueSample& d, const data::Dataset& ds, const Vocabulary& v,
                                     bool perceive, std::size_t budget) {
  struct Piece {
    data::Speaker speaker;
    std::vector<int> ids;
    const ToyImage* image = nullptr;
  };
  std::vector<Piece> pieces;
  for (const auto& e : d.context) {
    Piece p{e.speaker, {}, nullptr};
    if (e.is_image() && perceive) {
      p.ids = {v.image_placeholder()};
      p.image = &ds.image(e.image);
    } else if (e.is_image()) {
      p.ids.push_back(v.img_open());
      const auto c = v.encode_ids(e.text);
      p.ids.insert(p.ids.end(), c.begin(), c.end());
      p.ids.push_back(v.img_close());
    } else {
      p.ids = v.encode_ids(e.text);
    }
    pieces.push_back(std::move(p));
  }
  const auto tail = speaker_tag(v, d.response.empty() ? data::Speaker::a : d.response_speaker());

  auto assemble = [&](std::size_t start) {
    std::vector<int> ids;
    std::optional<data::Speaker> prev;
    for (std::size_t i = start; i < pieces.size(); ++i) {
      if (!prev || *prev != pieces[i].speaker) {
        const auto t = speaker_tag(v, pieces[i].speaker);
        ids.insert(ids.end(), t.begin(), t.end());
      }
      prev = pieces[i].speaker;
      ids.insert(ids.end(), pieces[i].ids.begin(), pieces[i].ids.end());
    }
    ids.insert(ids.end(), tail.begin(), tail.end());
    return ids;
  };

  std::size_t start = 0;
  auto ids = assemble(start);
  while (ids.size() > budget && start + 1 < pieces.size()) ids = assemble(++start);
  if (ids.size() > budget && !pieces.empty()) {
    auto& last = pieces.back();
    const std::size_t fixed = speaker_tag(v, last.speaker).size() + tail.size();
    const bool plain_text = last.image == nullptr && !last.ids.empty() && last.ids.front() != v.img_open();
    if (plain_text && budget > fixed) {
      last.ids.erase(last.ids.begin(), last.ids.end() - static_cast<std::ptrdiff_t>(std::min(last.ids.size(), budget - fixed)));
      ids = assemble(start);
    } else {
      ids = assemble(++start);
    }
  }
  if (ids.size() > budget) {
    throw DataError("dialogue " + d.id + ": prompt needs " + std::to_string(ids.size()) + " tokens, budget is " +
                    std::to_string(budget) + " (raise model.max_len)");
  }
  EncodedContext out{std::move(ids), {}};
  for (std::size_t i = start; i < pieces.size(); ++i)
    if (pieces[i].image) out.images.push_back(pieces[i].image);
  return out;
}

// Teacher-forcing layout: the prompt gets whatever room the response leaves.
inline EncodedDialogue encode_dialogue(const data::DialogueSample& d, const data::Dataset& ds, const Vocabulary& v,
                                       bool perceive, std::size_t max_len) {
  EncodedDialogue out;
  std::vector<ResponseElement> elems;
  for (const auto& e : d.response) {
    elems.push_back(e.is_image() ? ResponseElement::caption(e.text) : ResponseElement::text(e.text));
    if (e.is_image()) out.response_images.push_back(&e);
  }
  out.response = format_response(v, elems);
  if (out.response.size() > max_len) {
    throw DataError("dialogue " + d.id + ": response of " + std::to_string(out.response.size()) +
                    " tokens exceeds model.max_len " + std::to_string(max_len));
  }
  out.context = encode_context(d, ds, v, perceive, max_len - out.response.size());
  return out;
}

// Memory rows: every patch row and the summary row of each image.
// Placeholder embeddings: the summary rows.
inline models::ImageContext<double> image_context(const Perceptron<double>& p, std::span<const ToyImage* const> images) {
  if (images.empty()) return {};
  std::vector<Tensor<double>> mem, summary;
  for (const auto* img : images) {
    auto r = models::perceive_image(p, *img);
    summary.push_back(ad::slice_rows(r, models::kImageEmbeddingRows - 1, models::kImageEmbeddingRows));
    mem.push_back(std::move(r));
  }
  return {ad::concat_rows(mem), ad::concat_rows(summary)};
}

inline std::string join_elements(std::span<const data::Element> elems) {
  std::string s;
  for (const auto& e : elems) s += (s.empty() ? "" : " ") + e.text;
  return s;
}

inline std::string join_elements(std::span<const ResponseElement> elems) {
  std::string s;
  for (const auto& e : elems) s += (s.empty() ? "" : " ") + e.content;
  return s;
}

// ---------------------------------------------------------------------------
// Per-sample loss terms.

struct SampleTerms {
  Tensor<double> loss_t;
  std::vector<Tensor<double>> loss_v;  // one per caption span
  std::vector<Tensor<double>> r_llm;   // bridged caption rows; gradient audit reads their grads
  std::vector<std::string> handoff;    // caption text handed to the generator
  std::size_t fallbacks = 0;           // sampled captions with no generator tokens
};

inline Tensor<double> mean_of(const std::vector<Tensor<double>>& xs) {
  auto acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = ad::add(acc, xs[i]);
  return xs.size() == 1 ? acc : ad::div_scalar(acc, static_cast<double>(xs.size()));
}

// Teacher-forced L^t; for each gold caption span the caption is sampled with
// hard straight-through Gumbel-Softmax at `tau` from the teacher-forced
// distributions, handed to the generator (bridged or detached, per mode) and
// scored with L^v against the gold image.
inline SampleTerms forward_sample(const System& s, const data::DialogueSample& d, const data::Dataset& ds, double tau,
                                  Rng& rng, bool text_only = false) {
  const auto& cfg = s.config;
  const Mode mode = cfg.train.mode;
  const auto enc = encode_dialogue(d, ds, s.v_llm, perceives_images(mode), s.lm.config.max_len);
  const auto ex = models::make_lm_example(enc.context.ids, enc.response, s.lm.config.max_len);
  const auto images = image_context(s.perceptron, enc.context.images);
  const auto logits = models::lm_forward(s.lm, ex.input_ids, images);

  SampleTerms out;
  out.loss_t = ad::cross_entropy(logits, ex.targets);
  if (text_only) return out;

  for (std::size_t c = 0; c < ex.caption_rows.size() && c < enc.response_images.size(); ++c) {
    const auto& rows = ex.caption_rows[c];
    const auto* gold = enc.response_images[c];
    const ToyImage& img = ds.image(gold->image);
    Tensor<double> r_sd;
    std::string text;
    if (cfg.train.caption_source == "gold") {
      text = gold->text;
      r_sd = ad::one_hot<double>(s.v_sd.encode_ids(text), s.v_sd.size());
    } else {
      const std::vector<int> idx(rows.begin(), rows.end());
      const auto caption_logits = ad::gather_rows(logits, idx);
      if (bridges_output(mode)) {
        const auto p = ad::softmax(caption_logits);
        const auto g = sample_gumbel<double>(p.shape(), rng, cfg.gs_per_position_noise);
        auto r_llm = straight_through_onehot(gumbel_softmax(p, g, tau));
        const auto ids = ad::argmax_rows(r_llm);
        text = s.v_llm.decode(ids, true);
        if (s.v_sd.encode_ids(text).empty()) {
          text = gold->text;
          ++out.fallbacks;
        }
        const auto m = build_dynamic_matrix(text, s.v_llm, s.v_sd, ids);
        r_sd = pool_straight_through(r_llm, m, text, s.v_sd, BridgeOptions{cfg.train.normalize_rows});
        out.r_llm.push_back(std::move(r_llm));
      } else {
        // Detached handoff: argmax tokens -> text -> generator tokenizer.
        const auto ids = ad::argmax_rows(caption_logits);
        text = s.v_llm.decode(ids, true);
        auto sd_ids = s.v_sd.encode_ids(text);
        if (sd_ids.empty()) {
          text = gold->text;
          sd_ids = s.v_sd.encode_ids(text);
          ++out.fallbacks;
        }
        r_sd = ad::one_hot<double>(sd_ids, s.v_sd.size());
      }
    }
    out.loss_v.push_back(models::diffusion_loss(s.gen, r_sd, img, cfg.train.noise_samples, rng));
    out.handoff.push_back(std::move(text));
  }
  return out;
}

inline Tensor<double> total_loss(const SampleTerms& t, double alpha) {
  if (t.loss_v.empty()) return t.loss_t;
  return ad::add(t.loss_t, ad::scale(mean_of(t.loss_v), alpha));
}

// ---------------------------------------------------------------------------
// Learning-rate warmup.

inline std::uint64_t warmup_steps(const TrainConfig& tc, std::uint64_t total_steps) {
  if (tc.warmup_steps >= 0) return static_cast<std::uint64_t>(tc.warmup_steps);
  return std::min<std::uint64_t>(1000, total_steps / 10);
}

// step is 1-based: lr * step / warmup below warmup, lr from then on.
inline double lr_at(double lr, std::uint64_t step, std::uint64_t warmup) {
  if (warmup == 0 || step >= warmup) return lr;
  return lr * static_cast<double>(step) / static_cast<double>(warmup);
}

// ---------------------------------------------------------------------------
// Training.

struct StepRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0, tau = 0, loss_t = 0;
  std::optional<double> loss_v;  // absent when the batch has no caption
  double loss = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  std::optional<double> dev_loss;
  bool best = false;
};

struct TrainOptions {
  std::filesystem::path run_dir;  // empty: nothing is written
  bool text_only = false;         // skip the L^v path (reference run for alpha = 0)
  // Runs at the start of each step, after the last-good snapshot.
  std::function<void(std::uint64_t step, System&)> before_step;
  std::size_t sample_images = 4;  // per epoch, from dev captions
  bool write_checkpoints = true;
};

struct TrainResult {
  System system;
  std::vector<StepRecord> log;
  std::vector<EpochRecord> epochs;
  std::uint64_t steps = 0;
  std::uint64_t warmup = 0;
  std::size_t fallbacks = 0;
  std::size_t best_epoch = 0;
};

inline std::string fmt_num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string metrics_csv_header() { return "step,epoch,lr,tau,loss_t,loss_v,loss"; }

inline std::string metrics_csv_row(const StepRecord& r) {
  return std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt_num(r.lr) + "," + fmt_num(r.tau) + "," +
         fmt_num(r.loss_t) + "," + (r.loss_v ? fmt_num(*r.loss_v) : std::string()) + "," + fmt_num(r.loss);
}

struct DevLoss {
  double loss_t = 0;
  std::optional<double> loss_v;
  double loss = 0;
};

// Teacher-forced losses over a split with a fixed noise stream.
inline DevLoss dev_loss(const System& s, const data::Dataset& split, double tau, const Rng& stream) {
  ad::NoGradGuard no_grad;
  DevLoss out;
  double lv = 0;
  std::size_t n_v = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    Rng r = stream.split(static_cast<std::uint64_t>(i));
    const auto t = forward_sample(s, split.dialogues[i], split, tau, r);
    out.loss_t += t.loss_t.item();
    if (!t.loss_v.empty()) {
      lv += mean_of(t.loss_v).item();
      ++n_v;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(split.size(), 1));
  out.loss_t /= n;
  if (n_v) out.loss_v = lv / static_cast<double>(n_v);
  out.loss = out.loss_t + s.config.train.alpha * out.loss_v.value_or(0.0);
  return out;
}

namespace detail {

inline std::vector<std::vector<double>> snapshot(const std::vector<Tensor<double>>& params) {
  std::vector<std::vector<double>> v;
  v.reserve(params.size());
  for (const auto& p : params) v.emplace_back(p.data().begin(), p.data().end());
  return v;
}

inline void restore(const std::vector<Tensor<double>>& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t k = 0; k < params.size(); ++k) std::copy(snap[k].begin(), snap[k].end(), params[k].mutable_data().begin());
}

inline bool all_finite(const std::vector<Tensor<double>>& params) {
  for (const auto& p : params)
    for (const double x : p.data())
      if (!std::isfinite(x)) return false;
  return true;
}

inline void clip_grads(const std::vector<Tensor<double>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p.has_grad())
      for (const double g : p.node()->grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double f = max_norm / norm;
  for (const auto& p : params)
    if (p.has_grad())
      for (auto& g : p.node()->grad) g *= f;
}

inline void write_samples(const System& s, const data::Dataset& dev, const std::filesystem::path& dir,
                          std::size_t epoch, std::size_t count, const Rng& stream) {
  ad::NoGradGuard no_grad;
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / ("epoch-" + std::to_string(epoch) + ".txt"));
  std::size_t k = 0;
  for (const auto& d : dev.dialogues) {
    if (k >= count) break;
    const auto* img = d.response_image();
    if (!img) continue;
    Rng r = stream.split(static_cast<std::uint64_t>(k));
    const auto sd = s.v_sd.encode_ids(img->text);
    const auto out = models::sample_image(s.gen, ad::one_hot<double>(sd, s.v_sd.size()), s.config.eval.sample_steps, r);
    const std::string name = "epoch-" + std::to_string(epoch) + "-" + d.id + ".ppm";
    save_ppm(out, (dir / name).string());
    index << name << '\t' << img->text << '\n';
    ++k;
  }
}

}  // namespace detail

// Trains `init` in place of a fresh system (warm start / fine-tuning); its
// config is replaced by `cfg`.
inline TrainResult train(System init, const RunConfig& cfg, const data::Dataset& dataset, const TrainOptions& opt = {}) {
  cfg.validate();
  const auto train_set = dataset.split("train");
  if (train_set.empty()) throw DataError("train: dataset has no 'train' dialogues");
  const auto dev_set = dataset.split("dev");
  init.config = cfg;
  TrainResult res{std::move(init), {}, {}, 0, 0, 0, 0};
  System& s = res.system;
  const auto& tc = cfg.train;
  const Rng root(cfg.seed);

  const std::size_t n = train_set.size();
  const std::uint64_t spe = (n + tc.batch_size - 1) / tc.batch_size;
  std::uint64_t total = spe * tc.epochs;
  if (tc.max_steps > 0) total = std::min<std::uint64_t>(total, tc.max_steps);
  res.warmup = warmup_steps(tc, total);

  const bool writing = !opt.run_dir.empty();
  std::ofstream csv;
  if (writing) {
    std::filesystem::create_directories(opt.run_dir / "checkpoints");
    std::filesystem::create_directories(opt.run_dir / "samples");
    save_config(cfg, opt.run_dir / "config.json");
    s.v_llm.save((opt.run_dir / "llm_vocab.txt").string());
    s.v_sd.save((opt.run_dir / "sd_vocab.txt").string());
    csv.open(opt.run_dir / "metrics.csv");
    if (!csv) throw DataError("cannot write " + (opt.run_dir / "metrics.csv").string());
    csv << metrics_csv_header() << '\n';
  }
  log::info("train.start")
      .kv("mode", mode_name(tc.mode))
      .kv("train", n)
      .kv("dev", dev_set.size())
      .kv("steps", total)
      .kv("warmup", res.warmup)
      .kv("params", s.parameters().size());

  const auto params = s.parameters();
  ad::AdamWState opt_state;
  opt_state.reset(params);
  std::optional<double> best;
  std::uint64_t step = 0;

  for (std::size_t epoch = 1; step < total; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng orng = root.split("order").split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[orng.below(i + 1)]);

    for (std::size_t b0 = 0; b0 < n && step < total; b0 += tc.batch_size) {
      ++step;
      const std::size_t b1 = std::min(n, b0 + tc.batch_size);
      const double B = static_cast<double>(b1 - b0);
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr_at(tc.lr, step, res.warmup);
      rec.tau = temperature_at(cfg.gs, step - 1, spe);

      const auto snap = detail::snapshot(params);
      if (opt.before_step) opt.before_step(step, s);
      auto diverged = [&](const std::string& why) {
        detail::restore(params, snap);
        std::string where = "(not written)";
        if (writing) {
          const auto p = opt.run_dir / "checkpoints" / "last_good.ckpt";
          save_system(p, s, step - 1, {{"epoch", epoch}, {"reason", "divergence"}});
          where = p.string();
        }
        log::error("train.diverged").kv("step", step).kv("reason", why).kv("last_good", where);
        throw NumericError("training diverged at step " + std::to_string(step) + " (" + why + "); last good checkpoint: " + where);
      };

      s.zero_grads();
      double lt_sum = 0, lv_sum = 0, l_sum = 0;
      std::size_t n_v = 0;
      try {
        const Rng step_rng = root.split("train").split(step);
        for (std::size_t k = b0; k < b1; ++k) {
          Rng r = step_rng.split(static_cast<std::uint64_t>(k - b0));
          const auto terms = forward_sample(s, train_set.dialogues[order[k]], train_set, rec.tau, r, opt.text_only);
          res.fallbacks += terms.fallbacks;
          const auto loss = total_loss(terms, tc.alpha);
          lt_sum += terms.loss_t.item();
          if (!terms.loss_v.empty()) {
            lv_sum += mean_of(terms.loss_v).item();
            ++n_v;
          }
          l_sum += loss.item();
          ad::backward(ad::scale(loss, 1.0 / B));
        }
      } catch (const NumericError& e) {
        diverged(e.what());
      }
      if (tc.grad_clip > 0) detail::clip_grads(params, tc.grad_clip);
      ad::adamw_step(params, opt_state, ad::AdamWConfig{rec.lr, 0.9, 0.999, 1e-8, tc.weight_decay});
      if (!detail::all_finite(params)) diverged("non-finite parameter after update");

      rec.loss_t = lt_sum / B;
      if (n_v) rec.loss_v = lv_sum / static_cast<double>(n_v);
      rec.loss = l_sum / B;
      if (!std::isfinite(rec.loss)) diverged("non-finite loss");
      if (writing) csv << metrics_csv_row(rec) << '\n' << std::flush;
      res.log.push_back(rec);
    }

    EpochRecord er;
    er.epoch = epoch;
    er.step = step;
    if (!dev_set.empty()) er.dev_loss = dev_loss(s, dev_set, temperature_at(cfg.gs, step, spe), root.split("dev")).loss;
    if (!best || (er.dev_loss && *er.dev_loss < *best) || (!er.dev_loss)) {
      er.best = true;
      if (er.dev_loss) best = er.dev_loss;
      res.best_epoch = epoch;
    }
    if (writing && opt.write_checkpoints) {
      const Json meta = {{"epoch", epoch}, {"dev_loss", er.dev_loss ? Json(*er.dev_loss) : Json(nullptr)}};
      save_system(opt.run_dir / "checkpoints" / ("epoch-" + std::to_string(epoch) + ".ckpt"), s, step, meta);
      if (er.best) save_system(opt.run_dir / "checkpoints" / "best.ckpt", s, step, meta);
    }
    if (writing && opt.sample_images > 0) {
      detail::write_samples(s, dev_set.empty() ? train_set : dev_set, opt.run_dir / "samples", epoch, opt.sample_images,
                            root.split("samples"));
    }
    log::info("train.epoch")
        .kv("epoch", epoch)
        .kv("step", step)
        .kv("loss", res.log.empty() ? 0.0 : res.log.back().loss)
        .kv("dev_loss", er.dev_loss ? fmt_num(*er.dev_loss) : std::string("none"))
        .kv("best", er.best);
    res.epochs.push_back(er);
  }
  res.steps = step;
  if (res.fallbacks) log::warn("train.caption_fallback").kv("count", res.fallbacks);
  return res;
}

inline TrainResult train(const RunConfig& cfg, const data::Dataset& dataset, const TrainOptions& opt = {}) {
  return train(init_system(cfg, dataset.split("train")), cfg, dataset, opt);
}

// ---------------------------------------------------------------------------
// Gradient-flow audit.

struct GroupNorms {
  double from_lt = 0;  // backward of L^t alone
  double from_lv = 0;  // backward of alpha * L^v alone
  double total = 0;    // backward of L
};

struct GradFlowReport {
  std::map<std::string, GroupNorms> groups;  // lm_embeddings, lm_blocks, perceptron, bridge, generator
  std::size_t n_samples = 0;
  std::size_t n_captions = 0;

  // Norm over every dialogue-model parameter.
  double lm(double GroupNorms::*term) const {
    const double a = groups.at("lm_embeddings").*term, b = groups.at("lm_blocks").*term;
    return std::sqrt(a * a + b * b);
  }
};

inline constexpr std::array<std::string_view, 5> kGradGroups = {"lm_embeddings", "lm_blocks", "perceptron", "bridge",
                                                                  "generator"};

// Three separate forward/backward passes over the batch with identical noise
// (the stream is rewound for each), averaging over the batch like train().
// "bridge" is the norm of dL/dR^LLM over the sampled caption rows.
inline GradFlowReport grad_flow_report(const System& s, std::span<const data::DialogueSample> batch,
                                       const data::Dataset& ds, double tau, const Rng& stream) {
  GradFlowReport rep;
  rep.n_samples = batch.size();
  const double alpha = s.config.train.alpha;
  const double B = static_cast<double>(std::max<std::size_t>(batch.size(), 1));
  for (const auto term : {&GroupNorms::from_lt, &GroupNorms::from_lv, &GroupNorms::total}) {
    s.zero_grads();
    double bridge_sq = 0;
    std::size_t caps = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Rng r = stream.split(static_cast<std::uint64_t>(i));
      auto t = forward_sample(s, batch[i], ds, tau, r);
      caps += t.loss_v.size();
      Tensor<double> loss;
      if (term == &GroupNorms::from_lt) {
        loss = t.loss_t;
      } else if (term == &GroupNorms::from_lv) {
        if (t.loss_v.empty()) continue;
        loss = ad::scale(mean_of(t.loss_v), alpha);
      } else {
        loss = total_loss(t, alpha);
      }
      ad::backward(ad::scale(loss, 1.0 / B));
      for (const auto& r_llm : t.r_llm)
        for (const double g : r_llm.grad()) bridge_sq += g * g;
    }
    rep.n_captions = caps;
    double emb = 0, blocks = 0;
    s.lm.visit([&](const std::string& name, const Tensor<double>& p) {
      double sq = 0;
      for (const double g : p.grad()) sq += g * g;
      (name == "lm.tok_emb" || name == "lm.pos_emb" ? emb : blocks) += sq;
    });
    rep.groups["lm_embeddings"].*term = std::sqrt(emb);
    rep.groups["lm_blocks"].*term = std::sqrt(blocks);
    rep.groups["perceptron"].*term = models::grad_norm(s.perceptron);
    rep.groups["bridge"].*term = std::sqrt(bridge_sq);
    rep.groups["generator"].*term = models::grad_norm(s.gen);
  }
  s.zero_grads();
  return rep;
}

inline Json to_json(const GradFlowReport& r) {
  Json j = {{"n_samples", r.n_samples}, {"n_captions", r.n_captions}, {"groups", Json::object()}};
  for (const auto& [k, v] : r.groups) j["groups"][k] = {{"from_lt", v.from_lt}, {"from_lv", v.from_lv}, {"total", v.total}};
  return j;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct Prediction {
  std::vector<ResponseElement> elements;
  std::optional<std::string> caption;  // first generated caption
  std::optional<ToyImage> image;       // generated from `caption`
};

// Greedy text, hard Gumbel-Softmax captions at eval.tau, image sampled from
// the generator-tokenizer one-hot of the first caption.
inline Prediction predict(const System& s, const data::DialogueSample& d, const data::Dataset& ds, const EvalConfig& ec,
                          Rng& rng) {
  ad::NoGradGuard no_grad;
  const std::size_t max_len = s.lm.config.max_len;
  const std::size_t reserve = std::min(ec.max_len, max_len / 2);
  const auto enc = encode_context(d, ds, s.v_llm, perceives_images(s.config.train.mode), max_len - 1 - reserve);
  const auto images = image_context(s.perceptron, enc.images);
  const auto dec = models::generate_response(
      s.lm, enc.ids, images, s.v_llm,
      models::DecodeOptions{ec.max_len, ec.tau, s.config.gs_per_position_noise}, rng);
  Prediction p;
  p.elements = dec.elements;
  for (const auto& c : dec.captions) {
    const auto sd = s.v_sd.encode_ids(c.text);
    if (sd.empty()) continue;
    p.caption = c.text;
    p.image = models::sample_image(s.gen, ad::one_hot<double>(sd, s.v_sd.size()), ec.sample_steps, rng);
    break;
  }
  return p;
}

namespace detail {

inline metrics::MetricReport score_subset(std::span<const data::DialogueSample> samples,
                                          std::span<const Prediction> preds, const data::Dataset& ds,
                                          const std::vector<std::size_t>& idx, std::uint64_t probe_seed) {
  metrics::MetricReport r;
  r.probe_seed = probe_seed;
  metrics::TextTally text;
  metrics::AttributeTally attrs;
  std::vector<ToyImage> generated, reference;
  for (const std::size_t i : idx) {
    const auto& d = samples[i];
    const auto& p = preds[i];
    ++r.n_samples;
    text.add(metrics::words(join_elements(p.elements)), metrics::words(join_elements(d.response)));
    const auto* gold = d.response_image();
    if (!gold) continue;
    ++r.n_image_samples;
    const auto& gold_img = ds.image(gold->image);
    if (const auto want = parse_caption(gold->text)) {
      attrs.add(p.image ? std::optional<Attributes>(decode_attributes(*p.image)) : std::nullopt, *want);
    }
    if (p.image) {
      generated.push_back(*p.image);
      reference.push_back(gold_img);
    }
  }
  r.bleu1 = text.bleu1();
  r.bleu2 = text.bleu2();
  r.rougeL = text.rouge();
  r.attributes = attrs.result();
  if (generated.size() >= metrics::kMinProbeSet) r.probe_fd = metrics::probe_fd(generated, reference, probe_seed);
  if (!generated.empty()) r.probe_is = metrics::probe_is(generated);
  return r;
}

}  // namespace detail

// Overall report plus per-speaker ("A", "B") sub-reports keyed by the
// response speaker. Text metrics compare the joined response elements,
// captions included; a gold image with no generated image counts as wrong
// on every attribute.
inline metrics::MetricReport score(std::span<const data::DialogueSample> samples, std::span<const Prediction> preds,
                                   const data::Dataset& ds, std::uint64_t probe_seed) {
  if (samples.size() != preds.size()) throw DimensionError("score: sample and prediction counts differ");
  std::vector<std::size_t> all(samples.size());
  std::map<std::string, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    all[i] = i;
    by_speaker[std::string(data::speaker_name(samples[i].response_speaker()))].push_back(i);
  }
  auto r = detail::score_subset(samples, preds, ds, all, probe_seed);
  for (const auto& [k, idx] : by_speaker) r.per_speaker[k] = detail::score_subset(samples, preds, ds, idx, probe_seed);
  return r;
}

inline std::vector<data::DialogueSample> eval_samples(const data::Dataset& ds, const EvalConfig& ec) {
  auto split = ds.split(ec.split).dialogues;
  if (ec.max_dialogues > 0 && split.size() > ec.max_dialogues) split.resize(ec.max_dialogues);
  return split;
}

inline metrics::MetricReport evaluate(const System& s, const data::Dataset& ds, const EvalConfig& ec,
                                      std::vector<Prediction>* predictions = nullptr) {
  ec.validate();
  const auto samples = eval_samples(ds, ec);
  if (samples.empty()) throw DataError("evaluate: split '" + ec.split + "' is empty");
  const Rng stream = Rng(s.config.seed).split("eval");
  std::vector<Prediction> preds;
  preds.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng r = stream.split(static_cast<std::uint64_t>(i));
    preds.push_back(predict(s, samples[i], ds, ec, r));
  }
  auto rep = score(samples, preds, ds, ec.probe_seed);
  if (predictions) *predictions = std::move(preds);
  return rep;
}

// ---------------------------------------------------------------------------
// Temperature sweep.

struct SweepRow {
  double tau = 0;
  std::uint64_t seed = 0;
  metrics::MetricReport report;
};

inline std::string sweep_csv_header() { return "tau,seed,attribute_acc,probe_fd,bleu1,bleu2,rougeL"; }

inline std::string sweep_csv_row(const SweepRow& r) {
  return fmt_num(r.tau) + "," + std::to_string(r.seed) + "," + fmt_num(r.report.attributes.joint) + "," +
         (r.report.probe_fd ? fmt_num(*r.report.probe_fd) : std::string()) + "," + fmt_num(r.report.bleu1) + "," +
         fmt_num(r.report.bleu2) + "," + fmt_num(r.report.rougeL);
}

struct MeanStd {
  double mean = 0, std = 0;  // sample standard deviation (n - 1); 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd m;
  m.n = xs.size();
  if (xs.empty()) return m;
  for (const double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0;
    for (const double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return m;
}

// Per tau: mean and sample standard deviation over seeds of each column.
inline std::string sweep_summary_csv(std::span<const SweepRow> rows) {
  std::string out = "# mean and sample standard deviation (n-1) over seeds\n";
  out += "tau,n_seeds,attribute_acc_mean,attribute_acc_std,probe_fd_mean,probe_fd_std,bleu1_mean,bleu1_std,bleu2_mean,"
         "bleu2_std,rougeL_mean,rougeL_std\n";
  std::vector<double> taus;
  for (const auto& r : rows)
    if (std::find(taus.begin(), taus.end(), r.tau) == taus.end()) taus.push_back(r.tau);
  for (const double tau : taus) {
    std::vector<double> acc, fd, b1, b2, rl;
    for (const auto& r : rows) {
      if (r.tau != tau) continue;
      acc.push_back(r.report.attributes.joint);
      if (r.report.probe_fd) fd.push_back(*r.report.probe_fd);
      b1.push_back(r.report.bleu1);
      b2.push_back(r.report.bleu2);
      rl.push_back(r.report.rougeL);
    }
    auto cell = [](std::span<const double> v) {
      if (v.empty()) return std::string(",");
      const auto m = mean_std(v);
      return fmt_num(m.mean) + "," + fmt_num(m.std);
    };
    out += fmt_num(tau) + "," + std::to_string(acc.size()) + "," + cell(acc) + "," + cell(fd) + "," + cell(b1) + "," +
           cell(b2) + "," + cell(rl) + "\n";
  }
  return out;
}

// For each seed: one warm-start run of sweep.warm_epochs with the configured
// schedule, then per tau a fine-tune of sweep.finetune_steps at constant tau
// from a copy of the warm start, evaluated with decoding at the same tau.
// Rows are ordered seed-major, tau-minor.
inline std::vector<SweepRow> sweep_temperature(const RunConfig& cfg, const data::Dataset& ds,
                                               const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  const auto& sw = cfg.sweep;
  std::vector<SweepRow> rows;
  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    save_config(cfg, out_dir / "config.json");
    csv.open(out_dir / "sweep.csv");
    csv << sweep_csv_header() << '\n';
  }
  for (const auto seed : sw.seeds) {
    RunConfig warm_cfg = cfg;
    warm_cfg.seed = seed;
    warm_cfg.train.epochs = sw.warm_epochs;
    warm_cfg.train.max_steps = 0;
    System warm = init_system(warm_cfg, ds.split("train"));
    if (sw.warm_epochs > 0) {
      TrainOptions o;
      o.sample_images = 0;
      warm = train(std::move(warm), warm_cfg, ds, o).system;
    }
    log::info("sweep.warm_start").kv("seed", seed);
    for (const double tau : sw.taus) {
      RunConfig ft = warm_cfg;
      ft.gs = TemperatureSchedule::constant(tau);
      ft.eval.tau = tau;
      System sys = warm.clone();
      if (sw.finetune_steps > 0) {
        ft.train.max_steps = sw.finetune_steps;
        ft.train.epochs = sw.finetune_steps;  // capped by max_steps
        ft.train.warmup_steps = 0;
        TrainOptions o;
        o.sample_images = 0;
        sys = train(std::move(sys), ft, ds, o).system;
      } else {
        sys.config = ft;
      }
      SweepRow row{tau, seed, evaluate(sys, ds, ft.eval)};
      log::info("sweep.row").kv("tau", fmt_num(tau)).kv("seed", seed).kv("attribute_acc", row.report.attributes.joint)
          .kv("bleu1", row.report.bleu1);
      if (csv.is_open()) csv << sweep_csv_row(row) << '\n' << std::flush;
      rows.push_back(std::move(row));
    }
  }
  if (!out_dir.empty()) {
    std::ofstream summary(out_dir / "sweep_summary.csv");
    summary << sweep_summary_csv(rows);
  }
  return rows;
}

}  // namespace photobridge::trainer
