#pragma once

// Byte-pair-encoding vocabularies with word-span tracking.
//
// Text is normalized before tokenization: ASCII lowercase, any character
// outside printable ASCII becomes '?', whitespace runs collapse to a single
// space, leading/trailing whitespace is dropped. Words are whitespace
// separated; the final symbol of every word carries the "</w>" marker, so
// decode can restore spaces exactly. decode(encode(s)) == normalize(s).
//
// Every trained vocabulary contains the full printable-ASCII base alphabet
// (with and without the marker), so any normalized text is encodable.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "photobridge/errors.hpp"

namespace photobridge {

inline constexpr std::string_view kEndOfWord = "</w>";

enum class Special : int { pad = 0, bos = 1, eos = 2, img_open = 3, img_close = 4, image = 5 };
inline constexpr std::array<std::string_view, 6> kSpecialTokens = {"<pad>", "<bos>", "<eos>", "[IMG]", "[/IMG]", "<image>"};
inline constexpr std::size_t kSpecialCount = kSpecialTokens.size();

inline constexpr int special_id(Special s) { return static_cast<int>(s); }

inline bool is_special_string(std::string_view s) {
  return std::find(kSpecialTokens.begin(), kSpecialTokens.end(), s) != kSpecialTokens.end();
}

struct TokenizedText {
  std::vector<int> ids;
  // [begin, end) ranges into ids, one per source word, in order.
  std::vector<std::pair<std::size_t, std::size_t>> word_spans;
};

inline std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (const char raw : text) {
    const auto ch = static_cast<unsigned char>(raw);
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    char c = (ch >= 33 && ch <= 126) ? static_cast<char>(ch) : '?';
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    out.push_back(c);
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view normalized) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < normalized.size()) {
    const std::size_t j = normalized.find(' ', i);
    const std::size_t end = j == std::string_view::npos ? normalized.size() : j;
    if (end > i) words.emplace_back(normalized.substr(i, end - i));
    i = end + 1;
  }
  return words;
}

class Vocabulary {
 public:
  using Merge = std::pair<std::string, std::string>;

  Vocabulary() : Vocabulary(std::vector<std::string>{}, {}) {}

  // Specials occupy ids 0..5; `tokens` follow in the given order. Every merge
  // result must be present in `tokens`.
  Vocabulary(std::vector<std::string> tokens, std::vector<Merge> merges) : merges_(std::move(merges)) {
    for (const auto s : kSpecialTokens) add_token(std::string(s));
    for (auto& t : tokens) add_token(std::move(t));
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [a, b] = merges_[r];
      if (!find(a + b)) throw DataError("vocabulary: merge result '" + a + b + "' is not a token");
      if (is_special_string(a + b)) throw DataError("vocabulary: merge produces special token '" + a + b + "'");
      merge_rank_.emplace(a + '\x1f' + b, static_cast<int>(r));
    }
  }

  // Printable ASCII (33..126), each with and without the end-of-word marker.
  static std::vector<std::string> base_alphabet() {
    std::vector<std::string> out;
    for (int c = 33; c <= 126; ++c) out.emplace_back(1, static_cast<char>(c));
    for (int c = 33; c <= 126; ++c) out.push_back(std::string(1, static_cast<char>(c)) + std::string(kEndOfWord));
    return out;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw RangeError("vocabulary: id " + std::to_string(id) + " out of range [0, " + std::to_string(size()) + ")");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }
  std::optional<int> find(std::string_view tok) const {
    const auto it = index_.find(std::string(tok));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<Merge>& merges() const { return merges_; }

  static bool is_special(int id) { return id >= 0 && static_cast<std::size_t>(id) < kSpecialCount; }
  int pad() const { return special_id(Special::pad); }
  int bos() const { return special_id(Special::bos); }
  int eos() const { return special_id(Special::eos); }
  int img_open() const { return special_id(Special::img_open); }
  int img_close() const { return special_id(Special::img_close); }
  int image_placeholder() const { return special_id(Special::image); }

  std::vector<int> encode_word(std::string_view word) const {
    std::vector<std::string> sym;
    for (std::size_t i = 0; i < word.size(); ++i) {
      std::string s(1, word[i]);
      if (i + 1 == word.size()) s += kEndOfWord;
      sym.push_back(std::move(s));
    }
    while (sym.size() > 1) {
      int best = -1;
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        const auto it = merge_rank_.find(sym[i] + '\x1f' + sym[i + 1]);
        if (it != merge_rank_.end() && (best < 0 || it->second < best)) best = it->second;
      }
      if (best < 0) break;
      const auto& [a, b] = merges_[static_cast<std::size_t>(best)];
      std::vector<std::string> next;
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == a && sym[i + 1] == b) {
          next.push_back(a + b);
          ++i;
        } else {
          next.push_back(sym[i]);
        }
      }
      sym = std::move(next);
    }
    std::vector<int> ids;
    for (const auto& s : sym) {
      const auto id = find(s);
      if (!id) throw RangeError("vocabulary: symbol '" + s + "' of word '" + std::string(word) + "' is not encodable");
      ids.push_back(*id);
    }
    return ids;
  }

  TokenizedText encode(std::string_view text) const {
    TokenizedText out;
    for (const auto& w : split_words(normalize_text(text))) {
      const std::size_t begin = out.ids.size();
      const auto ids = encode_word(w);
      out.ids.insert(out.ids.end(), ids.begin(), ids.end());
      out.word_spans.emplace_back(begin, out.ids.size());
    }
    return out;
  }

  std::vector<int> encode_ids(std::string_view text) const { return encode(text).ids; }

  // Special tokens render as standalone words unless skipped.
  std::string decode(std::span<const int> ids, bool skip_specials = false) const {
    std::string out;
    for (const int id : ids) {
      const std::string& t = token(id);
      if (is_special(id)) {
        if (skip_specials) continue;
        if (!out.empty() && out.back() != ' ') out.push_back(' ');
        out += t;
        out.push_back(' ');
        continue;
      }
      if (t.size() >= kEndOfWord.size() && t.compare(t.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
        out.append(t, 0, t.size() - kEndOfWord.size());
        out.push_back(' ');
      } else {
        out += t;
      }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
  }

  // Plain-text vocabulary file: see save() for the layout.
  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write vocabulary " + path);
    os << to_text();
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "# photobridge vocabulary v1\n[specials]\n";
    for (std::size_t i = 0; i < kSpecialCount; ++i) os << i << '\t' << tokens_[i] << '\n';
    os << "[tokens]\n";
    for (std::size_t i = kSpecialCount; i < tokens_.size(); ++i) os << i << '\t' << tokens_[i] << '\n';
    os << "[merges]\n";
    for (const auto& [a, b] : merges_) os << a << '\t' << b << '\n';
    return os.str();
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open vocabulary " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str(), path);
  }

  static Vocabulary from_text(const std::string& text, const std::string& origin = "<vocab>") {
    std::istringstream is(text);
    std::string line, section;
    std::vector<std::string> tokens;
    std::vector<Merge> merges;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& why) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      if (line.front() == '[' && line.back() == ']' && line.find('\t') == std::string::npos) {
        section = line;
        continue;
      }
      const auto tab = line.find('\t');
      if (tab == std::string::npos) fail("expected a tab-separated pair");
      const std::string left = line.substr(0, tab), right = line.substr(tab + 1);
      if (section == "[specials]") {
        const auto id = std::stoul(left);
        if (id >= kSpecialCount || right != kSpecialTokens[id]) fail("unexpected special token '" + right + "'");
      } else if (section == "[tokens]") {
        if (std::stoul(left) != kSpecialCount + tokens.size()) fail("token ids must be dense and ordered");
        tokens.push_back(right);
      } else if (section == "[merges]") {
        merges.emplace_back(left, right);
      } else {
        fail("line outside a known section");
      }
    }
    return Vocabulary(std::move(tokens), std::move(merges));
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_ && merges_ == o.merges_; }

 private:
  void add_token(std::string t) {
    if (index_.contains(t)) throw DataError("vocabulary: duplicate token '" + t + "'");
    index_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<Merge> merges_;
  std::unordered_map<std::string, int> merge_rank_;
};

// Deterministic BPE training. The most frequent adjacent pair is merged first;
// equal counts resolve to the lexicographically smallest (left, right) pair.
// Results depend only on word counts, so `seed` (kept for interface symmetry
// with the other stochastic builders) and corpus order do not change them.
inline Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t vocab_size, std::uint64_t seed = 0) {
  (void)seed;
  const auto alphabet = Vocabulary::base_alphabet();
  if (vocab_size < alphabet.size() + kSpecialCount) {
    throw ConfigError("train_bpe: vocab_size " + std::to_string(vocab_size) + " is below the base size " +
                      std::to_string(alphabet.size() + kSpecialCount));
  }
  std::map<std::string, std::size_t> word_counts;
  for (const auto& line : corpus) {
    for (auto& w : split_words(normalize_text(line))) ++word_counts[w];
  }
  if (word_counts.empty()) throw DataError("train_bpe: corpus is empty");

  struct Word {
    std::vector<std::string> sym;
    std::size_t count;
  };
  std::vector<Word> words;
  for (const auto& [w, n] : word_counts) {
    Word word{{}, n};
    for (std::size_t i = 0; i < w.size(); ++i) {
      word.sym.push_back(std::string(1, w[i]) + (i + 1 == w.size() ? std::string(kEndOfWord) : ""));
    }
    words.push_back(std::move(word));
  }

  std::vector<std::string> tokens = alphabet;
  std::unordered_map<std::string, bool> known;
  for (const auto& t : tokens) known[t] = true;
  std::vector<Vocabulary::Merge> merges;
  while (tokens.size() + kSpecialCount < vocab_size) {
    std::map<Vocabulary::Merge, std::size_t> pairs;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) pairs[{w.sym[i], w.sym[i + 1]}] += w.count;
    }
    if (pairs.empty()) break;
    // std::map iterates pairs in lexicographic order; strict '>' keeps the smallest on ties.
    // Merges never produce a special token string.
    auto best = pairs.end();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (is_special_string(it->first.first + it->first.second)) continue;
      if (best == pairs.end() || it->second > best->second) best = it;
    }
    if (best == pairs.end()) break;
    const auto [a, b] = best->first;
    const std::string merged = a + b;
    merges.emplace_back(a, b);
    if (!known[merged]) {
      known[merged] = true;
      tokens.push_back(merged);
    }
    for (auto& w : words) {
      std::vector<std::string> next;
      for (std::size_t i = 0; i < w.sym.size(); ++i) {
        if (i + 1 < w.sym.size() && w.sym[i] == a && w.sym[i + 1] == b) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(w.sym[i]);
        }
      }
      w.sym = std::move(next);
    }
  }
  return Vocabulary(std::move(tokens), std::move(merges));
}

// ---------------------------------------------------------------------------
// Response formatting: text inline, captions as [IMG] ... [/IMG], then EOS.

struct ResponseElement {
  enum class Kind { text, caption };
  Kind kind = Kind::text;
  std::string content;

  static ResponseElement text(std::string s) { return {Kind::text, std::move(s)}; }
  static ResponseElement caption(std::string s) { return {Kind::caption, std::move(s)}; }
  bool operator==(const ResponseElement&) const = default;
};

inline std::vector<int> format_response(const Vocabulary& vocab, std::span<const ResponseElement> elements) {
  if (elements.empty()) throw DataError("format_response: no elements");
  std::vector<int> ids;
  for (const auto& e : elements) {
    const auto enc = vocab.encode_ids(e.content);
    if (e.kind == ResponseElement::Kind::caption) {
      if (enc.empty()) throw DataError("format_response: empty image caption");
      ids.push_back(vocab.img_open());
      ids.insert(ids.end(), enc.begin(), enc.end());
      ids.push_back(vocab.img_close());
    } else {
      ids.insert(ids.end(), enc.begin(), enc.end());
    }
  }
  ids.push_back(vocab.eos());
  return ids;
}

// Interior [begin, end) ranges of every [IMG] ... [/IMG] pair.
inline std::vector<std::pair<std::size_t, std::size_t>> extract_caption_spans(std::span<const int> ids) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::optional<std::size_t> open;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == special_id(Special::img_open)) {
      if (open) throw FormatError("nested [IMG] at position " + std::to_string(i));
      open = i;
    } else if (ids[i] == special_id(Special::img_close)) {
      if (!open) throw FormatError("[/IMG] without matching [IMG] at position " + std::to_string(i));
      spans.emplace_back(*open + 1, i);
      open.reset();
    }
  }
  if (open) throw FormatError("unclosed [IMG] at position " + std::to_string(*open));
  return spans;
}

// Inverse of format_response (adjacent text runs come back as one element).
// Stops at the first EOS.
inline std::vector<ResponseElement> parse_response(const Vocabulary& vocab, std::span<const int> ids) {
  std::size_t end = ids.size();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == vocab.eos()) {
      end = i;
      break;
    }
  }
  const auto body = ids.first(end);
  const auto spans = extract_caption_spans(body);
  std::vector<ResponseElement> out;
  std::size_t cursor = 0;
  auto flush_text = [&](std::size_t upto) {
    if (upto > cursor) {
      auto s = vocab.decode(body.subspan(cursor, upto - cursor), true);
      if (!s.empty()) out.push_back(ResponseElement::text(std::move(s)));
    }
  };
  for (const auto& [b, e] : spans) {
    flush_text(b - 1);
    out.push_back(ResponseElement::caption(vocab.decode(body.subspan(b, e - b), true)));
    cursor = e + 1;
  }
  flush_text(body.size());
  return out;
}

}  // namespace photobridge
