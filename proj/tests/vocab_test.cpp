#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "photobridge/rng.hpp"
#include "photobridge/vocab.hpp"

namespace photobridge {
namespace {

const std::size_t kBase = Vocabulary::base_alphabet().size() + kSpecialCount;

std::vector<std::string> dialogue_lines() {
  return {"hello there how are you doing today",
          "i went to the park and saw a red square",
          "can you share a photo of your trip",
          "sure here is the picture from the beach",
          "that looks lovely what a nice day",
          "we had a great time with the dogs there"};
}

std::vector<std::string> caption_lines() {
  return {"a small red square in the top left", "a large blue circle in the center",
          "a small green triangle in the bottom right", "a large yellow cross in the middle left",
          "a small purple circle in the top middle", "a large orange square in the bottom middle"};
}

TEST(Vocab, BaseAlphabetHasPrintableAsciiWithAndWithoutMarker) {
  EXPECT_EQ(Vocabulary::base_alphabet().size(), 188u);
  EXPECT_EQ(kBase, 194u);
}

TEST(Vocab, NormalizationLowercasesAndCollapsesWhitespace) {
  EXPECT_EQ(normalize_text("  A  Red\tSquare \n"), "a red square");
  EXPECT_EQ(normalize_text(""), "");
  EXPECT_EQ(split_words("a red square").size(), 3u);
}

TEST(Vocab, SingleMergeOnAaab) {
  const std::vector<std::string> corpus{"aaab"};
  const auto v = train_bpe(corpus, kBase + 1, 0);
  ASSERT_EQ(v.merges().size(), 1u);
  EXPECT_EQ(v.merges()[0], (Vocabulary::Merge{"a", "a"}));
  EXPECT_TRUE(v.find("aa").has_value());
  EXPECT_EQ(v.size(), kBase + 1);
}

TEST(Vocab, MergeListsArePrefixConsistent) {
  const auto corpus = dialogue_lines();
  const auto small = train_bpe(corpus, kBase + 20, 0);
  const auto large = train_bpe(corpus, kBase + 60, 0);
  ASSERT_LE(small.merges().size(), large.merges().size());
  EXPECT_TRUE(std::equal(small.merges().begin(), small.merges().end(), large.merges().begin()));
}

TEST(Vocab, SeedAndOrderDoNotChangeMerges) {
  auto corpus = dialogue_lines();
  const auto a = train_bpe(corpus, kBase + 50, 1);
  Rng rng(5);
  for (std::size_t i = corpus.size(); i > 1; --i) std::swap(corpus[i - 1], corpus[rng.below(i)]);
  const auto b = train_bpe(corpus, kBase + 50, 99);
  EXPECT_EQ(a, b);
}

TEST(Vocab, TrainBpeErrors) {
  const std::vector<std::string> empty;
  EXPECT_THROW(train_bpe(empty, kBase + 5), DataError);
  const std::vector<std::string> blank{"   ", ""};
  EXPECT_THROW(train_bpe(blank, kBase + 5), DataError);
  const std::vector<std::string> corpus{"abc"};
  EXPECT_THROW(train_bpe(corpus, kBase - 1), ConfigError);
}

TEST(Vocab, MergesNeverProduceSpecials) {
  const std::vector<std::string> corpus(20, "<pad>x <eos>y [img]z");
  const auto v = train_bpe(corpus, kBase + 40);
  for (const auto& [a, b] : v.merges()) EXPECT_FALSE(is_special_string(a + b)) << a + b;
}

TEST(Vocab, RoundTripAndWordSpans) {
  const auto v = train_bpe(dialogue_lines(), kBase + 40);
  const auto enc = v.encode("a red square");
  EXPECT_EQ(v.decode(enc.ids), "a red square");
  ASSERT_EQ(enc.word_spans.size(), 3u);
  std::size_t cursor = 0;
  for (const auto& [b, e] : enc.word_spans) {
    EXPECT_EQ(b, cursor);
    EXPECT_LT(b, e);
    cursor = e;
  }
  EXPECT_EQ(cursor, enc.ids.size());
}

TEST(Vocab, RoundTripOverCorpusUpToNormalization) {
  const auto v = train_bpe(dialogue_lines(), kBase + 80);
  auto lines = dialogue_lines();
  lines.push_back("  Mixed CASE   with\ttabs!! and punctuation, ok?");
  lines.push_back("unseen wordz qqq 12345 ~`{}");
  for (const auto& s : lines) EXPECT_EQ(v.decode(v.encode_ids(s)), normalize_text(s)) << s;
}

TEST(Vocab, DecodeUnknownIdIsRangeError) {
  const auto v = train_bpe(dialogue_lines(), kBase + 10);
  const std::vector<int> bad{static_cast<int>(v.size())};
  EXPECT_THROW(v.decode(bad), RangeError);
  const std::vector<int> neg{-1};
  EXPECT_THROW(v.decode(neg), RangeError);
}

TEST(Vocab, TwoVocabulariesDisagreeButOverlap) {
  const auto v_llm = train_bpe(dialogue_lines(), kBase + 120);
  const auto v_sd = train_bpe(caption_lines(), kBase + 90);
  const std::string s = "a small red square in the top left";
  EXPECT_NE(v_llm.encode_ids(s), v_sd.encode_ids(s));

  const std::set<std::string> a(v_llm.tokens().begin(), v_llm.tokens().end());
  const std::set<std::string> b(v_sd.tokens().begin(), v_sd.tokens().end());
  std::size_t shared = 0, only_a = 0, only_b = 0;
  for (const auto& t : a) (b.contains(t) ? shared : only_a) += 1;
  for (const auto& t : b) only_b += a.contains(t) ? 0 : 1;
  EXPECT_GT(shared, 0u);
  EXPECT_GT(only_a, 0u);
  EXPECT_GT(only_b, 0u);
}

TEST(Vocab, SpecialIdsAreFixed) {
  const auto v = train_bpe(caption_lines(), kBase + 5);
  EXPECT_EQ(v.token(v.pad()), "<pad>");
  EXPECT_EQ(v.token(v.bos()), "<bos>");
  EXPECT_EQ(v.token(v.eos()), "<eos>");
  EXPECT_EQ(v.token(v.img_open()), "[IMG]");
  EXPECT_EQ(v.token(v.img_close()), "[/IMG]");
  EXPECT_EQ(v.token(v.image_placeholder()), "<image>");
}

TEST(Vocab, FileRoundTrip) {
  const auto v = train_bpe(dialogue_lines(), kBase + 30);
  const auto path = std::filesystem::temp_directory_path() / "photobridge_vocab_test.txt";
  v.save(path.string());
  EXPECT_EQ(Vocabulary::load(path.string()), v);
  std::filesystem::remove(path);
  EXPECT_EQ(Vocabulary::from_text(v.to_text()), v);
}

TEST(Vocab, MalformedFileNamesLine) {
  const std::string text = "[specials]\n0\t<pad>\n[tokens]\nno-tab-here\n";
  try {
    Vocabulary::from_text(text, "v.txt");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("v.txt:4"), std::string::npos) << e.what();
  }
}

TEST(Vocab, FormatTextOnly) {
  const auto v = train_bpe(dialogue_lines(), kBase + 40);
  const std::vector<ResponseElement> els{ResponseElement::text("sure!")};
  auto expect = v.encode_ids("sure!");
  expect.push_back(v.eos());
  EXPECT_EQ(format_response(v, els), expect);
}

TEST(Vocab, FormatWrapsCaptions) {
  const auto v = train_bpe(dialogue_lines(), kBase + 40);
  const std::vector<ResponseElement> els{ResponseElement::text("here"), ResponseElement::caption("a red square")};
  std::vector<int> expect = v.encode_ids("here");
  expect.push_back(v.img_open());
  const auto cap = v.encode_ids("a red square");
  expect.insert(expect.end(), cap.begin(), cap.end());
  expect.push_back(v.img_close());
  expect.push_back(v.eos());
  EXPECT_EQ(format_response(v, els), expect);
}

TEST(Vocab, FormatErrors) {
  const auto v = train_bpe(dialogue_lines(), kBase + 10);
  const std::vector<ResponseElement> none;
  EXPECT_THROW(format_response(v, none), DataError);
  const std::vector<ResponseElement> empty_cap{ResponseElement::caption("  ")};
  EXPECT_THROW(format_response(v, empty_cap), DataError);
}

TEST(Vocab, ParseInvertsFormatOnRandomElementLists) {
  const auto v = train_bpe(dialogue_lines(), kBase + 60);
  const std::vector<std::string> words{"here", "is", "a", "red", "square", "photo", "look", "nice", "beach"};
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ResponseElement> els;
    const auto n = 1 + rng.below(4);
    bool last_text = false;
    for (std::uint64_t k = 0; k < n; ++k) {
      // Adjacent text elements are indistinguishable after formatting.
      const bool caption = last_text || rng.bernoulli(0.5);
      std::string s;
      const auto len = 1 + rng.below(5);
      for (std::uint64_t w = 0; w < len; ++w) s += (w ? " " : "") + words[rng.below(words.size())];
      els.push_back(caption ? ResponseElement::caption(s) : ResponseElement::text(s));
      last_text = !caption;
    }
    const auto ids = format_response(v, els);
    EXPECT_EQ(parse_response(v, ids), els) << "trial " << trial;
  }
}

TEST(Vocab, CaptionSpans) {
  const int o = special_id(Special::img_open), c = special_id(Special::img_close);
  const std::vector<int> plain{10, 11, 12};
  EXPECT_TRUE(extract_caption_spans(plain).empty());
  const std::vector<int> one{10, o, 20, 21, 22, 23, 24, c, 2};
  const auto spans = extract_caption_spans(one);
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_EQ(spans[0].second - spans[0].first, 5u);
  EXPECT_EQ(spans[0].first, 2u);
}

TEST(Vocab, CaptionSpanErrorsNamePosition) {
  const int o = special_id(Special::img_open), c = special_id(Special::img_close);
  const std::vector<int> close_first{10, c, o, 11, c};
  try {
    extract_caption_spans(close_first);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("position 1"), std::string::npos) << e.what();
  }
  const std::vector<int> unclosed{o, 10};
  EXPECT_THROW(extract_caption_spans(unclosed), FormatError);
  const std::vector<int> nested{o, o, c, c};
  EXPECT_THROW(extract_caption_spans(nested), FormatError);
}

}  // namespace
}  // namespace photobridge
