#pragma once

// Run configuration: one flat JSON object with dotted keys
// ("train.lr", "gs.tau_end", ...). File values are applied first, then
// key=value overrides. Unknown keys are rejected. The effective config is
// written back out by config_to_json(), and replaying that file reproduces the run.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "photobridge/data.hpp"
#include "photobridge/errors.hpp"
#include "photobridge/models/generator.hpp"
#include "photobridge/models/lm.hpp"
#include "photobridge/sampling.hpp"

namespace photobridge {

using Json = nlohmann::json;

enum class Mode { e2e, pipeline, e2e_minus_perceptron, e2e_minus_generator };

inline constexpr std::array<std::pair<Mode, std::string_view>, 4> kModeNames = {{
    {Mode::e2e, "e2e"},
    {Mode::pipeline, "pipeline"},
    {Mode::e2e_minus_perceptron, "e2e_minus_perceptron"},
    {Mode::e2e_minus_generator, "e2e_minus_generator"},
}};

inline std::string_view mode_name(Mode m) {
  for (const auto& [k, v] : kModeNames)
    if (k == m) return v;
  return "e2e";
}

inline Mode parse_mode(std::string_view s) {
  for (const auto& [k, v] : kModeNames)
    if (v == s) return k;
  throw ConfigError("train.mode: unknown mode '" + std::string(s) +
                    "' (expected e2e, pipeline, e2e_minus_perceptron or e2e_minus_generator)");
}

// Context images reach the LM through the perceptron (otherwise as caption text).
inline bool perceives_images(Mode m) { return m == Mode::e2e || m == Mode::e2e_minus_generator; }
// Output captions reach the generator through the differentiable bridge
// (otherwise as detached argmax text).
inline bool bridges_output(Mode m) { return m == Mode::e2e || m == Mode::e2e_minus_perceptron; }

struct TrainConfig {
  Mode mode = Mode::e2e;
  double alpha = 1.0;
  double lr = 5e-5;
  std::size_t batch_size = 32;
  double weight_decay = 0.01;
  long warmup_steps = -1;  // -1: min(1000, total_steps / 10)
  std::size_t epochs = 5;
  std::size_t max_steps = 0;  // 0: no cap
  std::string caption_source = "sampled";  // "sampled" | "gold"
  bool normalize_rows = false;
  std::size_t noise_samples = 8;  // diffusion draws per image
  double grad_clip = 0.0;         // 0: off

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("train.alpha must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (batch_size == 0) throw ConfigError("train.batch_size must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (warmup_steps < -1) throw ConfigError("train.warmup_steps must be >= 0 or -1 for automatic");
    if (epochs == 0) throw ConfigError("train.epochs must be > 0");
    if (caption_source != "sampled" && caption_source != "gold") {
      throw ConfigError("train.caption_source must be \"sampled\" or \"gold\", got \"" + caption_source + "\"");
    }
    if (noise_samples == 0) throw ConfigError("train.noise_samples must be > 0");
    if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
  }
};

struct EvalConfig {
  std::string split = "dev";
  double tau = 1e-4;
  std::size_t max_len = 48;
  int sample_steps = 64;
  std::uint64_t probe_seed = 1234;
  std::size_t max_dialogues = 0;  // 0: whole split

  void validate() const {
    if (std::find(data::kSplits.begin(), data::kSplits.end(), split) == data::kSplits.end()) {
      throw ConfigError("eval.split: unknown split '" + split + "'");
    }
    if (!(tau > 0.0)) throw ConfigError("eval.tau must be > 0");
    if (max_len == 0) throw ConfigError("eval.max_len must be > 0");
    if (sample_steps < 1) throw ConfigError("eval.sample_steps must be >= 1");
  }
};

struct SweepConfig {
  std::vector<double> taus{1.0, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t warm_epochs = 2;      // shared warm start, trained once per seed
  std::size_t finetune_steps = 50;  // per tau, from the warm start

  void validate() const {
    if (taus.empty()) throw ConfigError("sweep.taus must be non-empty");
    for (double t : taus)
      if (!(t > 0.0)) throw ConfigError("sweep.taus entries must be > 0");
    if (seeds.empty()) throw ConfigError("sweep.seeds must be non-empty");
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string data_path = "data";
  data::CorpusConfig corpus;
  std::size_t llm_vocab_size = 600;
  std::size_t sd_vocab_size = 400;
  models::LmConfig lm;
  models::GenConfig gen;
  TrainConfig train;
  TemperatureSchedule gs;
  bool gs_per_position_noise = true;
  EvalConfig eval;
  SweepConfig sweep;

  void validate() const {
    corpus.validate();
    if (llm_vocab_size < Vocabulary::base_alphabet().size() + kSpecialCount) {
      throw ConfigError("vocab.llm_size must be >= " + std::to_string(Vocabulary::base_alphabet().size() + kSpecialCount));
    }
    if (sd_vocab_size < Vocabulary::base_alphabet().size() + kSpecialCount) {
      throw ConfigError("vocab.sd_size must be >= " + std::to_string(Vocabulary::base_alphabet().size() + kSpecialCount));
    }
    auto lm_check = lm;
    lm_check.vocab_size = llm_vocab_size;
    lm_check.validate();
    auto gen_check = gen;
    gen_check.sd_vocab_size = sd_vocab_size;
    gen_check.validate();
    train.validate();
    gs.validate();
    eval.validate();
    sweep.validate();
  }
};

namespace detail {

struct Field {
  std::string key;
  std::function<Json()> get;
  std::function<void(const Json&)> set;
};

template <class V>
V convert(const Json& j, const std::string& key) {
  try {
    if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<V>) {
      if (!j.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<V>) {
        if (j.is_number_integer() && !j.is_number_unsigned() && j.get<long long>() < 0) throw ConfigError("");
      }
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!j.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!j.is_string()) throw ConfigError("");
    }
    return j.get<V>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': invalid value " + j.dump());
  }
}

template <class V>
Field field(std::string key, V& ref) {
  return {key, [&ref] { return Json(ref); },
          [&ref, key](const Json& j) {
            if constexpr (std::is_same_v<V, std::vector<double>> || std::is_same_v<V, std::vector<std::uint64_t>>) {
              if (!j.is_array()) throw ConfigError("config key '" + key + "': expected an array, got " + j.dump());
              V out;
              for (const auto& e : j) out.push_back(convert<typename V::value_type>(e, key));
              ref = std::move(out);
            } else {
              ref = convert<V>(j, key);
            }
          }};
}

inline std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  f.push_back(field("seed", c.seed));
  f.push_back(field("data.path", c.data_path));
  f.push_back(field("corpus.n_dialogues", c.corpus.n_dialogues));
  f.push_back(field("corpus.photo_rate", c.corpus.photo_rate));
  f.push_back(field("corpus.context_image_rate", c.corpus.context_image_rate));
  f.push_back(field("corpus.template_pool", c.corpus.template_pool));
  f.push_back(field("corpus.train_fraction", c.corpus.train_fraction));
  f.push_back(field("corpus.dev_fraction", c.corpus.dev_fraction));
  f.push_back(field("corpus.test_fraction", c.corpus.test_fraction));
  f.push_back(field("corpus.held_out_fraction", c.corpus.held_out_fraction));
  f.push_back(field("corpus.fixed_layout", c.corpus.fixed_layout));
  f.push_back(field("vocab.llm_size", c.llm_vocab_size));
  f.push_back(field("vocab.sd_size", c.sd_vocab_size));
  f.push_back(field("model.d_model", c.lm.d_model));
  f.push_back(field("model.n_blocks", c.lm.n_blocks));
  f.push_back(field("model.n_heads", c.lm.n_heads));
  f.push_back(field("model.max_len", c.lm.max_len));
  f.push_back(field("model.ff_mult", c.lm.ff_mult));
  f.push_back(field("gen.emb_dim", c.gen.emb_dim));
  f.push_back(field("gen.cond_dim", c.gen.cond_dim));
  f.push_back(field("gen.hidden", c.gen.hidden));
  f.push_back(field("gen.temb_dim", c.gen.temb_dim));
  f.push_back(field("gen.diffusion_steps", c.gen.diffusion_steps));
  f.push_back(field("gen.beta_start", c.gen.beta_start));
  f.push_back(field("gen.beta_end", c.gen.beta_end));
  f.push_back({"train.mode", [&c] { return Json(std::string(mode_name(c.train.mode))); },
               [&c](const Json& j) { c.train.mode = parse_mode(convert<std::string>(j, "train.mode")); }});
  f.push_back(field("train.alpha", c.train.alpha));
  f.push_back(field("train.lr", c.train.lr));
  f.push_back(field("train.batch_size", c.train.batch_size));
  f.push_back(field("train.weight_decay", c.train.weight_decay));
  f.push_back(field("train.warmup_steps", c.train.warmup_steps));
  f.push_back(field("train.epochs", c.train.epochs));
  f.push_back(field("train.max_steps", c.train.max_steps));
  f.push_back(field("train.caption_source", c.train.caption_source));
  f.push_back(field("train.normalize_rows", c.train.normalize_rows));
  f.push_back(field("train.noise_samples", c.train.noise_samples));
  f.push_back(field("train.grad_clip", c.train.grad_clip));
  f.push_back(field("gs.tau_start", c.gs.tau_start));
  f.push_back(field("gs.tau_end", c.gs.tau_end));
  f.push_back(field("gs.anneal_epochs", c.gs.anneal_epochs));
  f.push_back(field("gs.per_position_noise", c.gs_per_position_noise));
  f.push_back(field("eval.split", c.eval.split));
  f.push_back(field("eval.tau", c.eval.tau));
  f.push_back(field("eval.max_len", c.eval.max_len));
  f.push_back(field("eval.sample_steps", c.eval.sample_steps));
  f.push_back(field("eval.probe_seed", c.eval.probe_seed));
  f.push_back(field("eval.max_dialogues", c.eval.max_dialogues));
  f.push_back(field("sweep.taus", c.sweep.taus));
  f.push_back(field("sweep.seeds", c.sweep.seeds));
  f.push_back(field("sweep.warm_epochs", c.sweep.warm_epochs));
  f.push_back(field("sweep.finetune_steps", c.sweep.finetune_steps));
  return f;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  RunConfig c;
  std::vector<std::string> keys;
  for (const auto& f : detail::fields(c)) keys.push_back(f.key);
  return keys;
}

inline void set_key(RunConfig& c, const std::string& key, const Json& value) {
  for (auto& f : detail::fields(c)) {
    if (f.key == key) {
      f.set(value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void apply_json(RunConfig& c, const Json& j, const std::string& origin = "<config>") {
  if (!j.is_object()) throw ConfigError(origin + ": config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    try {
      set_key(c, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ": " + e.what());
    }
  }
}

// "key=value"; the value is parsed as JSON when possible, otherwise taken as a string.
inline void apply_override(RunConfig& c, std::string_view kv) {
  const auto eq = kv.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("override '" + std::string(kv) + "' is not key=value");
  const std::string key(kv.substr(0, eq));
  const std::string raw(kv.substr(eq + 1));
  Json v = Json::parse(raw, nullptr, false);
  if (v.is_discarded()) v = raw;
  set_key(c, key, v);
}

inline Json config_to_json(const RunConfig& c) {
  RunConfig copy = c;
  Json j = Json::object();
  for (const auto& f : detail::fields(copy)) j[f.key] = f.get();
  return j;
}

inline RunConfig config_from_json(const Json& j, const std::string& origin = "<config>") {
  RunConfig c;
  apply_json(c, j, origin);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  Json j;
  try {
    j = Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return config_from_json(j, path.string());
}

inline void save_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << config_to_json(c).dump(2) << '\n';
}

}  // namespace photobridge
