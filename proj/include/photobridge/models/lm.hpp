#pragma once

// Decoder-only text dialogue model: token + position embeddings, pre-norm
// blocks (causal self-attention, cross-attention over image embeddings,
// SiLU feed-forward), final norm and an output head that starts at zero, so an
// untrained model predicts the uniform distribution.

#include <string>
#include <vector>

#include "photobridge/ad/ops.hpp"
#include "photobridge/models/params.hpp"
#include "photobridge/sampling.hpp"
#include "photobridge/vocab.hpp"

namespace photobridge::models {

struct LmConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 128;
  std::size_t n_blocks = 4;
  std::size_t n_heads = 4;
  std::size_t max_len = 256;
  std::size_t ff_mult = 4;

  void validate() const {
    if (vocab_size == 0) throw ConfigError("lm.vocab_size must be > 0");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) throw ConfigError("lm.d_model must be a positive multiple of lm.n_heads");
    if (max_len < 2) throw ConfigError("lm.max_len must be >= 2");
    if (ff_mult == 0) throw ConfigError("lm.ff_mult must be > 0");
  }
};

template <std::floating_point T>
struct LmBlock {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  ad::AttentionWeights<T> self_attn, cross_attn;
  Tensor<T> ff_w1, ff_b1, ff_w2, ff_b2;
};

template <std::floating_point T>
struct LanguageModel {
  using value_type = T;

  LmConfig config;
  Tensor<T> tok_emb, pos_emb;
  std::vector<LmBlock<T>> blocks;
  Tensor<T> lnf_g, lnf_b, head_w, head_b;

  // Zero-valued parameters of the right shapes.
  explicit LanguageModel(const LmConfig& cfg) : config(cfg) {
    cfg.validate();
    const auto d = cfg.d_model, v = cfg.vocab_size, h = cfg.ff_mult * cfg.d_model;
    auto z = [](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
    tok_emb = z({v, d});
    pos_emb = z({cfg.max_len, d});
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      LmBlock<T> k;
      k.ln1_g = z({1, d}), k.ln1_b = z({1, d}), k.ln2_g = z({1, d}), k.ln2_b = z({1, d});
      k.ln3_g = z({1, d}), k.ln3_b = z({1, d});
      k.self_attn = {z({d, d}), z({d, d}), z({d, d}), z({d, d})};
      k.cross_attn = {z({d, d}), z({d, d}), z({d, d}), z({d, d})};
      k.ff_w1 = z({d, h}), k.ff_b1 = z({1, h}), k.ff_w2 = z({h, d}), k.ff_b2 = z({1, d});
      blocks.push_back(std::move(k));
    }
    lnf_g = z({1, d}), lnf_b = z({1, d});
    head_w = z({d, v}), head_b = z({1, v});
  }

  static LanguageModel init(const LmConfig& cfg, Rng& rng) {
    LanguageModel m(cfg);
    const auto d = cfg.d_model, h = cfg.ff_mult * cfg.d_model;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sh = 1.0 / std::sqrt(static_cast<double>(h));
    // Residual branch outputs are scaled down with depth.
    const double so = sd / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.n_blocks, 1)));
    m.tok_emb = normal_init<T>({cfg.vocab_size, d}, rng, 0.5);
    m.pos_emb = normal_init<T>({cfg.max_len, d}, rng, 0.1);
    for (auto& k : m.blocks) {
      k.ln1_g = const_init<T>({1, d}, 1.0), k.ln2_g = const_init<T>({1, d}, 1.0), k.ln3_g = const_init<T>({1, d}, 1.0);
      for (auto* a : {&k.self_attn, &k.cross_attn}) {
        a->wq = normal_init<T>({d, d}, rng, sd);
        a->wk = normal_init<T>({d, d}, rng, sd);
        a->wv = normal_init<T>({d, d}, rng, sd);
        a->wo = normal_init<T>({d, d}, rng, so);
      }
      k.ff_w1 = normal_init<T>({d, h}, rng, sd);
      k.ff_w2 = normal_init<T>({h, d}, rng, sh / std::sqrt(2.0 * static_cast<double>(cfg.n_blocks)));
    }
    m.lnf_g = const_init<T>({1, d}, 1.0);
    return m;
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
    f("lm.tok_emb", s.tok_emb);
    f("lm.pos_emb", s.pos_emb);
    for (std::size_t b = 0; b < s.blocks.size(); ++b) {
      auto& k = s.blocks[b];
      const std::string p = "lm.block" + std::to_string(b) + ".";
      f(p + "ln1.g", k.ln1_g), f(p + "ln1.b", k.ln1_b);
      f(p + "self.wq", k.self_attn.wq), f(p + "self.wk", k.self_attn.wk);
      f(p + "self.wv", k.self_attn.wv), f(p + "self.wo", k.self_attn.wo);
      f(p + "ln2.g", k.ln2_g), f(p + "ln2.b", k.ln2_b);
      f(p + "cross.wq", k.cross_attn.wq), f(p + "cross.wk", k.cross_attn.wk);
      f(p + "cross.wv", k.cross_attn.wv), f(p + "cross.wo", k.cross_attn.wo);
      f(p + "ln3.g", k.ln3_g), f(p + "ln3.b", k.ln3_b);
      f(p + "ff.w1", k.ff_w1), f(p + "ff.b1", k.ff_b1), f(p + "ff.w2", k.ff_w2), f(p + "ff.b2", k.ff_b2);
    }
    f("lm.lnf.g", s.lnf_g), f("lm.lnf.b", s.lnf_b);
    f("lm.head.w", s.head_w), f("lm.head.b", s.head_b);
  }
};

// Image conditioning for one forward pass. `memory` holds the cross-attention
// rows of every context image; `placeholder_embeds` row k is added to the
// input embedding at the k-th IMAGE_PLACEHOLDER position. Either may be
// undefined (no images).
template <std::floating_point T>
struct ImageContext {
  Tensor<T> memory;
  Tensor<T> placeholder_embeds;
};

// Logits, one row per input position.
template <std::floating_point T>
Tensor<T> lm_forward(const LanguageModel<T>& lm, std::span<const int> ids, const ImageContext<T>& images = {}) {
  const auto& cfg = lm.config;
  if (ids.empty()) throw DimensionError("lm_forward: empty input");
  if (ids.size() > cfg.max_len) {
    throw DimensionError("lm_forward: sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                         std::to_string(cfg.max_len));
  }
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  auto x = ad::add(ad::embedding(lm.tok_emb, ids), ad::embedding(lm.pos_emb, std::span<const int>(pos)));

  if (images.placeholder_embeds.defined()) {
    const std::size_t n_img = images.placeholder_embeds.rows();
    std::vector<T> sel(ids.size() * n_img, T{0});
    std::size_t k = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] != special_id(Special::image)) continue;
      if (k < n_img) sel[i * n_img + k] = T{1};
      ++k;
    }
    if (k != n_img) {
      throw DimensionError("lm_forward: " + std::to_string(k) + " image placeholders for " + std::to_string(n_img) +
                           " image embeddings");
    }
    x = ad::add(x, ad::matmul(Tensor<T>::from({ids.size(), n_img}, std::move(sel)), images.placeholder_embeds));
  }

  const bool has_memory = images.memory.defined() && images.memory.rows() > 0;
  for (const auto& b : lm.blocks) {
    x = ad::add(x, ad::causal_self_attention(ad::layer_norm(x, b.ln1_g, b.ln1_b), b.self_attn, cfg.n_heads));
    if (has_memory) {
      x = ad::add(x, ad::cross_attention(ad::layer_norm(x, b.ln2_g, b.ln2_b), images.memory, b.cross_attn, cfg.n_heads));
    }
    auto h = ad::silu(ad::linear(ad::layer_norm(x, b.ln3_g, b.ln3_b), b.ff_w1, b.ff_b1));
    x = ad::add(x, ad::linear(h, b.ff_w2, b.ff_b2));
  }
  return ad::linear(ad::layer_norm(x, lm.lnf_g, lm.lnf_b), lm.head_w, lm.head_b);
}

// Teacher-forced sequence. Row i of the logits predicts targets[i];
// kIgnoreIndex marks rows without loss (context and PAD positions).
struct LmExample {
  std::vector<int> input_ids;
  std::vector<int> targets;
  // Rows whose targets are caption tokens, grouped per [IMG] ... [/IMG] span.
  std::vector<std::vector<std::size_t>> caption_rows;
};

// [BOS] context response[:-1] as input, response as targets. PAD response
// tokens are masked. The context is truncated from the left to fit max_len.
inline LmExample make_lm_example(std::span<const int> context, std::span<const int> response, std::size_t max_len) {
  if (response.empty()) throw DataError("make_lm_example: empty response");
  if (response.size() > max_len) throw DataError("make_lm_example: response longer than max_len");
  const std::size_t room = max_len - response.size();
  const std::size_t keep = std::min(context.size(), room);
  LmExample ex;
  ex.input_ids.push_back(special_id(Special::bos));
  ex.input_ids.insert(ex.input_ids.end(), context.end() - static_cast<std::ptrdiff_t>(keep), context.end());
  ex.targets.assign(ex.input_ids.size() - 1, ad::kIgnoreIndex);
  for (std::size_t i = 0; i < response.size(); ++i) {
    ex.targets.push_back(response[i] == special_id(Special::pad) ? ad::kIgnoreIndex : response[i]);
    if (i + 1 < response.size()) ex.input_ids.push_back(response[i]);
  }
  const std::size_t offset = ex.input_ids.size() - (response.size() - 1) - 1;
  for (const auto& [b, e] : extract_caption_spans(response)) {
    std::vector<std::size_t> rows;
    for (std::size_t i = b; i < e; ++i) rows.push_back(offset + i);
    ex.caption_rows.push_back(std::move(rows));
  }
  return ex;
}

// L^t: mean next-token cross-entropy over non-masked response positions.
template <std::floating_point T>
Tensor<T> lm_loss(const LanguageModel<T>& lm, const LmExample& ex, const ImageContext<T>& images = {}) {
  return ad::cross_entropy(lm_forward(lm, ex.input_ids, images), ex.targets);
}

template <std::floating_point T>
Tensor<T> lm_loss_from_logits(const Tensor<T>& logits, const LmExample& ex) {
  return ad::cross_entropy(logits, ex.targets);
}

// ---------------------------------------------------------------------------
// Response decoding. Greedy outside captions; inside [IMG] ... [/IMG] each
// token is a hard straight-through Gumbel-Softmax sample whose one-hot row is
// kept (with its graph) as R^LLM.

struct DecodeOptions {
  std::size_t max_len = 48;
  double tau = 1.0;
  bool per_position_noise = true;
};

template <std::floating_point T>
struct DecodedCaption {
  std::vector<int> ids;
  std::string text;
  Tensor<T> r_llm;  // ids.size() x |V^LLM|
};

template <std::floating_point T>
struct DecodedResponse {
  std::vector<int> ids;  // emitted tokens, EOS excluded
  std::vector<ResponseElement> elements;
  std::vector<DecodedCaption<T>> captions;
  bool truncated = false;  // max_len hit inside an open caption; that caption is discarded
};

// next_logits(response_prefix) -> 1 x |V| logits for the next token.
template <std::floating_point T, class NextLogits>
DecodedResponse<T> decode_response(NextLogits&& next_logits, const Vocabulary& vocab, const DecodeOptions& opt,
                                   Rng& rng) {
  DecodedResponse<T> out;
  std::vector<int> text_run;
  std::vector<int> cap_ids;
  std::vector<Tensor<T>> cap_rows;
  bool in_caption = false;
  auto flush_text = [&] {
    auto s = vocab.decode(text_run, true);
    if (!s.empty()) out.elements.push_back(ResponseElement::text(std::move(s)));
    text_run.clear();
  };
  while (out.ids.size() < opt.max_len) {
    const auto logits = next_logits(std::span<const int>(out.ids));
    int id;
    if (in_caption) {
      const auto g = sample_gumbel<T>(logits.shape(), rng, opt.per_position_noise);
      const auto r = straight_through_onehot(gumbel_softmax(ad::softmax(logits), g, static_cast<T>(opt.tau)));
      id = ad::argmax_rows(r)[0];
      if (id == vocab.img_close()) {
        in_caption = false;
        DecodedCaption<T> c;
        c.ids = cap_ids;
        c.text = vocab.decode(cap_ids, true);
        if (!c.ids.empty()) {
          c.r_llm = ad::concat_rows(cap_rows);
          if (!c.text.empty()) out.elements.push_back(ResponseElement::caption(c.text));
          out.captions.push_back(std::move(c));
        }
        cap_ids.clear();
        cap_rows.clear();
      } else if (id == vocab.eos()) {
        out.truncated = true;
        break;
      } else {
        cap_ids.push_back(id);
        cap_rows.push_back(r);
      }
    } else {
      id = ad::argmax_rows(logits)[0];
      if (id == vocab.eos()) break;
      if (id == vocab.img_open()) {
        flush_text();
        in_caption = true;
      } else if (id != vocab.img_close()) {
        text_run.push_back(id);
      }
    }
    out.ids.push_back(id);
  }
  if (in_caption) out.truncated = true;
  flush_text();
  return out;
}

// decode_response driven by the language model over a fixed prompt.
template <std::floating_point T>
DecodedResponse<T> generate_response(const LanguageModel<T>& lm, std::span<const int> prompt,
                                     const ImageContext<T>& images, const Vocabulary& vocab, DecodeOptions opt,
                                     Rng& rng) {
  std::vector<int> base{special_id(Special::bos)};
  base.insert(base.end(), prompt.begin(), prompt.end());
  if (base.size() >= lm.config.max_len) {
    throw DimensionError("generate_response: prompt of " + std::to_string(base.size()) + " tokens leaves no room below max_len");
  }
  opt.max_len = std::min(opt.max_len, lm.config.max_len - base.size());
  return decode_response<T>(
      [&](std::span<const int> resp) {
        std::vector<int> ids = base;
        ids.insert(ids.end(), resp.begin(), resp.end());
        const auto logits = lm_forward(lm, ids, images);
        return ad::slice_rows(logits, ids.size() - 1, ids.size());
      },
      vocab, opt, rng);
}

}  // namespace photobridge::models
