#pragma once

// Synthetic photo-sharing dialogues, their JSONL form, and a PhotoChat adapter.
//
// JSONL schema "photobridge.dialogue/1", one dialogue per line:
//   schema    "photobridge.dialogue/1"
//   id        unique dialogue id
//   split     "train" | "dev" | "test"
//   context   non-empty array of elements
//   response  non-empty array of elements, all from one speaker
// Element:
//   type      "text" | "image"
//   speaker   "A" | "B"
//   text      utterance (text elements)
//   image     image ref relative to the corpus root, "images/{image id}.ppm"
//   caption   non-empty caption (image elements)
// A turn is a maximal run of elements from one speaker; turns alternate
// speakers by construction, and the response is the turn after the context.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "photobridge/errors.hpp"
#include "photobridge/image.hpp"
#include "photobridge/log.hpp"
#include "photobridge/rng.hpp"

namespace photobridge::data {

using Json = nlohmann::json;

inline constexpr std::string_view kSchema = "photobridge.dialogue/1";
inline constexpr std::string_view kDialogueFile = "dialogues.jsonl";
inline constexpr std::array<std::string_view, 3> kSplits = {"train", "dev", "test"};

enum class Speaker { a, b };

inline std::string_view speaker_name(Speaker s) { return s == Speaker::a ? "A" : "B"; }
inline Speaker other(Speaker s) { return s == Speaker::a ? Speaker::b : Speaker::a; }

struct Element {
  enum class Kind { text, image };
  Kind kind = Kind::text;
  Speaker speaker = Speaker::a;
  std::string text;     // utterance, or caption for images
  std::string image;    // image ref, images only

  static Element utterance(Speaker s, std::string t) { return {Kind::text, s, std::move(t), {}}; }
  static Element photo(Speaker s, std::string caption, std::string ref) {
    return {Kind::image, s, std::move(caption), std::move(ref)};
  }
  bool is_image() const { return kind == Kind::image; }
  bool operator==(const Element&) const = default;
};

struct DialogueSample {
  std::string id;
  std::vector<Element> context;
  std::vector<Element> response;
  std::string split = "train";

  Speaker response_speaker() const { return response.front().speaker; }
  // First image in the response, if any.
  const Element* response_image() const {
    for (const auto& e : response)
      if (e.is_image()) return &e;
    return nullptr;
  }
  bool operator==(const DialogueSample&) const = default;
};

struct Dataset {
  std::vector<DialogueSample> dialogues;
  std::map<std::string, ToyImage> images;  // keyed by image ref

  const ToyImage& image(const std::string& ref) const {
    const auto it = images.find(ref);
    if (it == images.end()) throw DataError("dataset: unresolved image '" + ref + "'");
    return it->second;
  }

  // Dialogues of one split; images are shared with the parent.
  Dataset split(std::string_view name) const {
    Dataset out;
    for (const auto& d : dialogues) {
      if (d.split != name) continue;
      out.dialogues.push_back(d);
      for (const auto* side : {&d.context, &d.response})
        for (const auto& e : *side)
          if (e.is_image()) out.images.emplace(e.image, image(e.image));
    }
    return out;
  }

  std::size_t size() const { return dialogues.size(); }
  bool empty() const { return dialogues.empty(); }
  bool operator==(const Dataset&) const = default;
};

// Structural invariants: non-empty sides, captions present, alternating turns,
// single-speaker response, images resolvable.
inline void validate_sample(const DialogueSample& d, const Dataset* images = nullptr) {
  auto fail = [&](const std::string& why) { throw DataError("dialogue '" + d.id + "': " + why); };
  if (d.context.empty()) fail("empty context");
  if (d.response.empty()) fail("empty response");
  for (const auto& e : d.response)
    if (e.speaker != d.response.front().speaker) fail("response mixes speakers");
  if (d.context.back().speaker == d.response.front().speaker) fail("response speaker repeats the last context turn");
  for (const auto* side : {&d.context, &d.response})
    for (const auto& e : *side) {
      if (e.is_image()) {
        if (e.text.empty()) fail("image element without caption");
        if (images) images->image(e.image);
      }
    }
}

// ---------------------------------------------------------------------------
// Procedural corpus.

struct CorpusConfig {
  std::size_t n_dialogues = 2000;
  double photo_rate = 0.8;          // P(response shares a photo)
  double context_image_rate = 0.5;  // P(context contains an earlier shared photo)
  std::size_t template_pool = 12;   // small-talk utterances in use
  double train_fraction = 0.8;
  double dev_fraction = 0.1;
  double test_fraction = 0.1;
  double held_out_fraction = 0.1;  // share of (shape, color) pairs absent from train
  bool fixed_layout = false;       // every image large and centered

  void validate() const;
};

inline constexpr std::array<std::string_view, 12> kSmallTalk = {
    "hi there",        "hello how are you",       "i am good thanks",          "what are you up to",
    "just relaxing",   "i went for a walk today", "that sounds nice",          "i have been painting shapes",
    "do you like art", "yes i love colors",       "me too",                    "what a lovely day"};

inline void CorpusConfig::validate() const {
  auto bad = [](const std::string& key, const std::string& why) { throw ConfigError("corpus." + key + ": " + why); };
  if (n_dialogues < 10) bad("n_dialogues", "must be >= 10");
  for (const auto& [k, v] : {std::pair{"photo_rate", photo_rate}, std::pair{"context_image_rate", context_image_rate},
                             std::pair{"held_out_fraction", held_out_fraction}}) {
    if (!(v >= 0.0 && v <= 1.0)) bad(k, "must be in [0, 1]");
  }
  if (held_out_fraction >= 1.0) bad("held_out_fraction", "must leave at least one pair for train");
  if (template_pool == 0 || template_pool > kSmallTalk.size()) {
    bad("template_pool", "must be in [1, " + std::to_string(kSmallTalk.size()) + "]");
  }
  for (const auto& [k, v] : {std::pair{"train_fraction", train_fraction}, std::pair{"dev_fraction", dev_fraction},
                             std::pair{"test_fraction", test_fraction}}) {
    if (!(v >= 0.0)) bad(k, "must be >= 0");
  }
  if (std::abs(train_fraction + dev_fraction + test_fraction - 1.0) > 1e-9) bad("train_fraction", "split fractions must sum to 1");
}

inline std::string image_ref(std::string_view image_id) { return "images/" + std::string(image_id) + ".ppm"; }

// "{color} {shape}" for fixed layouts, the full caption phrase otherwise.
inline std::string describe(const Attributes& a, bool fixed_layout) {
  if (fixed_layout) return std::string(kColors[a.color]) + " " + std::string(kShapes[a.shape]);
  auto c = caption_for(a);
  return c.substr(2);  // drop the leading "a "
}

namespace detail {

struct Request {
  std::string_view ask;    // {d} is the description
  std::string_view reply;  // text before the photo, or the whole reply
};

inline constexpr std::array<Request, 3> kShareRequests = {{
    {"can you show me a {d}", "sure here it is"},
    {"do you have a photo of a {d}", "yes i do"},
    {"send me a picture of a {d}", "here you go"},
}};

inline constexpr std::array<Request, 2> kTextRequests = {{
    {"what do you think of the {d}", "i think the {d} is lovely"},
    {"do you like the {d}", "yes i like the {d} a lot"},
}};

inline std::string fill(std::string_view tmpl, std::string_view d) {
  std::string s(tmpl);
  const auto p = s.find("{d}");
  if (p != std::string::npos) s.replace(p, 3, d);
  return s;
}

}  // namespace detail

// Pairs index shape * 6 + color; the chosen ones never appear in train.
inline std::vector<int> held_out_pairs(const CorpusConfig& cfg, const Rng& rng) {
  const int n_pairs = static_cast<int>(kShapes.size() * kColors.size());
  std::vector<int> perm(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng r = rng.split("held_out");
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[r.below(i + 1)]);
  const auto k = static_cast<std::size_t>(std::lround(cfg.held_out_fraction * n_pairs));
  std::vector<int> out(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.begin(), out.end());
  return out;
}

inline Attributes draw_attributes(const CorpusConfig& cfg, Rng& rng, const std::vector<int>& allowed_pairs) {
  const int pair = allowed_pairs[rng.below(allowed_pairs.size())];
  Attributes a{pair / static_cast<int>(kColors.size()), pair % static_cast<int>(kColors.size()), 4, 1};
  if (!cfg.fixed_layout) {
    a.position = static_cast<int>(rng.below(kPositions.size()));
    a.size = static_cast<int>(rng.below(kSizes.size()));
  }
  return a;
}

// Deterministic in (cfg, seed). Each dialogue draws from its own derived
// stream, so dialogue i does not depend on how many draws dialogue i-1 made.
inline Dataset gen_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Rng root(seed);
  const std::size_t n = cfg.n_dialogues;

  // Split assignment: exact counts over a seeded permutation of ids.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng sr = root.split("splits");
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[sr.below(i + 1)]);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
  const auto n_dev = std::min(n - n_train, static_cast<std::size_t>(std::llround(cfg.dev_fraction * static_cast<double>(n))));
  std::vector<std::string> split_of(n);
  for (std::size_t r = 0; r < n; ++r) split_of[order[r]] = r < n_train ? "train" : r < n_train + n_dev ? "dev" : "test";

  const auto held = held_out_pairs(cfg, root);
  std::vector<int> all_pairs, train_pairs;
  for (int p = 0; p < static_cast<int>(kShapes.size() * kColors.size()); ++p) {
    all_pairs.push_back(p);
    if (!std::binary_search(held.begin(), held.end(), p)) train_pairs.push_back(p);
  }

  Dataset ds;
  const Rng dialogue_root = root.split("dialogues");
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = dialogue_root.split(static_cast<std::uint64_t>(i));
    DialogueSample d;
    char buf[32];
    std::snprintf(buf, sizeof buf, "d%06zu", i);
    d.id = buf;
    d.split = split_of[i];
    const auto& pairs = d.split == "train" ? train_pairs : all_pairs;
    int n_images = 0;
    auto add_image = [&](std::vector<Element>& side, Speaker s, const Attributes& a) {
      const std::string ref = image_ref(d.id + "-" + std::to_string(n_images++));
      ds.images.emplace(ref, render(a));
      side.push_back(Element::photo(s, caption_for(a), ref));
    };

    // 2..6 turns: small talk, an optional earlier photo, then the request.
    const std::size_t context_turns = 1 + rng.below(5);
    Speaker s = rng.bernoulli(0.5) ? Speaker::a : Speaker::b;
    const std::size_t talk_turns = context_turns - 1;
    const bool context_photo = talk_turns > 0 && rng.bernoulli(cfg.context_image_rate);
    const std::size_t photo_turn = context_photo ? rng.below(talk_turns) : talk_turns;
    for (std::size_t t = 0; t < talk_turns; ++t, s = other(s)) {
      if (t == photo_turn) {
        d.context.push_back(Element::utterance(s, "look at this photo"));
        add_image(d.context, s, draw_attributes(cfg, rng, pairs));
      } else {
        d.context.push_back(Element::utterance(s, std::string(kSmallTalk[rng.below(cfg.template_pool)])));
      }
    }
    const Attributes target = draw_attributes(cfg, rng, pairs);
    const std::string desc = describe(target, cfg.fixed_layout);
    const bool share = rng.bernoulli(cfg.photo_rate);
    const auto& req = share ? detail::kShareRequests[rng.below(detail::kShareRequests.size())]
                            : detail::kTextRequests[rng.below(detail::kTextRequests.size())];
    d.context.push_back(Element::utterance(s, detail::fill(req.ask, desc)));
    s = other(s);
    d.response.push_back(Element::utterance(s, detail::fill(req.reply, desc)));
    if (share) add_image(d.response, s, target);
    ds.dialogues.push_back(std::move(d));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// JSONL serialization.

inline Json element_to_json(const Element& e) {
  Json j;
  j["type"] = e.is_image() ? "image" : "text";
  j["speaker"] = speaker_name(e.speaker);
  if (e.is_image()) {
    j["image"] = e.image;
    j["caption"] = e.text;
  } else {
    j["text"] = e.text;
  }
  return j;
}

inline Json sample_to_json(const DialogueSample& d) {
  Json j;
  j["schema"] = kSchema;
  j["id"] = d.id;
  j["split"] = d.split;
  j["context"] = Json::array();
  j["response"] = Json::array();
  for (const auto& e : d.context) j["context"].push_back(element_to_json(e));
  for (const auto& e : d.response) j["response"].push_back(element_to_json(e));
  return j;
}

namespace detail {

struct LineContext {
  std::string origin;
  std::size_t line;
  [[noreturn]] void fail(const std::string& field, const std::string& why) const {
    throw ParseError(origin + ":" + std::to_string(line) + ": field '" + field + "': " + why);
  }
  const std::string& str(const Json& j, const std::string& key, const std::string& path) const {
    const auto it = j.find(key);
    if (it == j.end()) fail(path + key, "missing");
    if (!it->is_string()) fail(path + key, "must be a string");
    return it->get_ref<const std::string&>();
  }
};

inline Element element_from_json(const Json& j, const LineContext& lc, const std::string& path) {
  if (!j.is_object()) lc.fail(path, "must be an object");
  Element e;
  const auto& type = lc.str(j, "type", path + ".");
  const auto& spk = lc.str(j, "speaker", path + ".");
  if (spk == "A") {
    e.speaker = Speaker::a;
  } else if (spk == "B") {
    e.speaker = Speaker::b;
  } else {
    lc.fail(path + ".speaker", "expected \"A\" or \"B\", got \"" + spk + "\"");
  }
  if (type == "text") {
    e.kind = Element::Kind::text;
    e.text = lc.str(j, "text", path + ".");
  } else if (type == "image") {
    e.kind = Element::Kind::image;
    e.image = lc.str(j, "image", path + ".");
    e.text = lc.str(j, "caption", path + ".");
    if (e.text.empty()) lc.fail(path + ".caption", "empty caption");
  } else {
    lc.fail(path + ".type", "expected \"text\" or \"image\", got \"" + type + "\"");
  }
  return e;
}

}  // namespace detail

inline DialogueSample sample_from_json(const Json& j, const std::string& origin, std::size_t line) {
  const detail::LineContext lc{origin, line};
  if (!j.is_object()) lc.fail("<line>", "must be a JSON object");
  const auto& schema = lc.str(j, "schema", "");
  if (schema != kSchema) lc.fail("schema", "unsupported schema \"" + schema + "\"");
  DialogueSample d;
  d.id = lc.str(j, "id", "");
  d.split = lc.str(j, "split", "");
  if (std::find(kSplits.begin(), kSplits.end(), d.split) == kSplits.end()) lc.fail("split", "unknown split \"" + d.split + "\"");
  for (const auto* key : {"context", "response"}) {
    const auto it = j.find(key);
    if (it == j.end()) lc.fail(key, "missing");
    if (!it->is_array() || it->empty()) lc.fail(key, "must be a non-empty array");
    auto& side = std::string_view(key) == "context" ? d.context : d.response;
    for (std::size_t k = 0; k < it->size(); ++k) {
      side.push_back(detail::element_from_json((*it)[k], lc, std::string(key) + "[" + std::to_string(k) + "]"));
    }
  }
  try {
    validate_sample(d);
  } catch (const DataError& e) {
    lc.fail("<dialogue>", e.what());
  }
  return d;
}

// Writes dir/dialogues.jsonl and dir/images/*.ppm.
inline void save_corpus(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream os(dir / kDialogueFile, std::ios::binary);
  if (!os) throw DataError("cannot write " + (dir / kDialogueFile).string());
  for (const auto& d : ds.dialogues) os << sample_to_json(d).dump() << '\n';
  for (const auto& [ref, img] : ds.images) save_ppm(img, (dir / ref).string());
  if (!os) throw DataError("write failed: " + (dir / kDialogueFile).string());
}

// Reads dir/dialogues.jsonl (or a .jsonl path whose parent holds images/).
inline Dataset load_corpus(const std::filesystem::path& path) {
  const auto file = std::filesystem::is_directory(path) ? path / kDialogueFile : path;
  const auto root = file.parent_path();
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("cannot open " + file.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw ParseError(file.string() + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
    }
    auto d = sample_from_json(j, file.string(), lineno);
    if (const auto [it, fresh] = seen.emplace(d.id, lineno); !fresh) {
      throw ParseError(file.string() + ":" + std::to_string(lineno) + ": field 'id': duplicate of line " +
                       std::to_string(it->second));
    }
    for (const auto* side : {&d.context, &d.response})
      for (const auto& e : *side)
        if (e.is_image() && !ds.images.contains(e.image)) {
          ds.images.emplace(e.image, load_ppm((root / e.image).string()));
        }
    ds.dialogues.push_back(std::move(d));
  }
  if (ds.empty()) log::warn("empty_corpus").kv("path", file.string());
  return ds;
}

// Every line of text a tokenizer should see: utterances, captions, speaker tags.
inline std::vector<std::string> text_lines(const Dataset& ds) {
  std::vector<std::string> out{"a:", "b:"};
  for (const auto& d : ds.dialogues)
    for (const auto* side : {&d.context, &d.response})
      for (const auto& e : *side) out.push_back(e.text);
  return out;
}

inline std::vector<std::string> caption_lines(const Dataset& ds) {
  std::vector<std::string> out;
  for (const auto& d : ds.dialogues)
    for (const auto* side : {&d.context, &d.response})
      for (const auto& e : *side)
        if (e.is_image()) out.push_back(e.text);
  return out;
}

// ---------------------------------------------------------------------------
// PhotoChat-format ingestion.
//
// Accepted input: a JSON array of dialogues (the published layout), or an
// object {"version": 1, "dialogues": [...]}. Each dialogue:
//   photo_id            optional, used for the image ref
//   photo_description   caption of the shared photo
//   dialogue            array of {"message", "share_photo", "user_id"}
// Consecutive messages from one user form a turn. With a shared photo the
// response is the sharing turn and the context is everything before it;
// otherwise the response is the last turn. Pixels are placeholder renders
// keyed by the caption hash.

inline Dataset ingest_photochat_json(const Json& root, const std::string& origin, const std::string& split = "train") {
  auto fail = [&](const std::string& why) { throw IngestionError(origin + ": " + why); };
  const Json* list = &root;
  if (root.is_object()) {
    const auto v = root.find("version");
    if (v == root.end()) fail("missing 'version'");
    if (!(v->is_number_integer() && v->get<int>() == 1)) fail("unknown schema version " + v->dump());
    const auto dl = root.find("dialogues");
    if (dl == root.end() || !dl->is_array()) fail("'dialogues' must be an array");
    list = &*dl;
  } else if (!root.is_array()) {
    fail("expected a JSON array of dialogues");
  }
  Dataset ds;
  for (std::size_t k = 0; k < list->size(); ++k) {
    const auto& dj = (*list)[k];
    const std::string where = "dialogue " + std::to_string(k);
    if (!dj.is_object()) fail(where + ": must be an object");
    const auto turns_it = dj.find("dialogue");
    if (turns_it == dj.end() || !turns_it->is_array()) fail(where + ": missing 'dialogue' array");
    std::string id = "pc" + std::to_string(k);
    if (const auto p = dj.find("photo_id"); p != dj.end()) id = p->is_string() ? p->get<std::string>() : p->dump();

    struct Turn {
      Speaker speaker;
      std::vector<Element> elements;
      bool shares = false;
    };
    std::vector<Turn> turns;
    std::map<std::string, Speaker> users;
    for (std::size_t m = 0; m < turns_it->size(); ++m) {
      const auto& mj = (*turns_it)[m];
      const std::string mwhere = where + " message " + std::to_string(m);
      if (!mj.is_object()) fail(mwhere + ": must be an object");
      const auto uid = mj.find("user_id");
      if (uid == mj.end()) fail(mwhere + ": missing 'user_id'");
      const auto key = uid->dump();
      if (!users.contains(key)) {
        if (users.size() == 2) fail(mwhere + ": more than two speakers");
        users.emplace(key, users.empty() ? Speaker::a : Speaker::b);
      }
      const Speaker spk = users.at(key);
      if (turns.empty() || turns.back().speaker != spk) turns.push_back({spk, {}, false});
      auto& turn = turns.back();
      std::string msg;
      if (const auto it = mj.find("message"); it != mj.end() && it->is_string()) msg = it->get<std::string>();
      if (!msg.empty()) turn.elements.push_back(Element::utterance(spk, msg));
      const auto sp = mj.find("share_photo");
      if (sp != mj.end() && sp->is_boolean() && sp->get<bool>()) {
        const auto desc = dj.find("photo_description");
        if (desc == dj.end() || !desc->is_string() || desc->get<std::string>().empty()) {
          fail(mwhere + ": share_photo turn without 'photo_description'");
        }
        const auto caption = desc->get<std::string>();
        const auto ref = image_ref(id);
        ds.images.emplace(ref, placeholder_render(caption));
        turn.elements.push_back(Element::photo(spk, caption, ref));
        turn.shares = true;
      }
    }
    std::erase_if(turns, [](const Turn& t) { return t.elements.empty(); });
    // Merge again: dropping empty turns can leave equal neighbours.
    std::vector<Turn> merged;
    for (auto& t : turns) {
      if (!merged.empty() && merged.back().speaker == t.speaker) {
        merged.back().elements.insert(merged.back().elements.end(), t.elements.begin(), t.elements.end());
        merged.back().shares = merged.back().shares || t.shares;
      } else {
        merged.push_back(std::move(t));
      }
    }
    std::size_t resp = merged.size();
    for (std::size_t t = 0; t < merged.size(); ++t)
      if (merged[t].shares) {
        resp = t;
        break;
      }
    if (resp == merged.size()) {
      if (merged.size() < 2) fail(where + ": fewer than two turns");
      resp = merged.size() - 1;
    }
    if (resp == 0) fail(where + ": photo shared in the first turn leaves no context");
    DialogueSample d;
    d.id = id;
    d.split = split;
    for (std::size_t t = 0; t < resp; ++t) d.context.insert(d.context.end(), merged[t].elements.begin(), merged[t].elements.end());
    d.response = merged[resp].elements;
    validate_sample(d, &ds);
    ds.dialogues.push_back(std::move(d));
  }
  return ds;
}

inline Dataset ingest_photochat(const std::filesystem::path& path, const std::string& split = "train") {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  Json j;
  try {
    j = Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw ParseError(path.string() + ": invalid JSON: " + e.what());
  }
  return ingest_photochat_json(j, path.string(), split);
}

}  // namespace photobridge::data
