#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "photobridge/data.hpp"

namespace photobridge::data {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("photobridge_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

CorpusConfig small(std::size_t n = 200) {
  CorpusConfig c;
  c.n_dialogues = n;
  return c;
}

std::size_t count_turns(const DialogueSample& d) {
  std::size_t turns = 0;
  std::optional<Speaker> prev;
  for (const auto* side : {&d.context, &d.response})
    for (const auto& e : *side) {
      if (!prev || *prev != e.speaker) ++turns;
      prev = e.speaker;
    }
  return turns;
}

TEST(Corpus, SameSeedGivesIdenticalFiles) {
  const auto a = temp_dir("det_a"), b = temp_dir("det_b");
  save_corpus(gen_corpus(small(), 7), a);
  save_corpus(gen_corpus(small(), 7), b);
  EXPECT_EQ(slurp(a / kDialogueFile), slurp(b / kDialogueFile));
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(a / "images")) {
    EXPECT_EQ(slurp(e.path()), slurp(b / "images" / e.path().filename()));
    ++n;
  }
  EXPECT_GT(n, 0u);
  EXPECT_NE(slurp(a / kDialogueFile), [&] {
    const auto c = temp_dir("det_c");
    save_corpus(gen_corpus(small(), 8), c);
    return slurp(c / kDialogueFile);
  }());
}

TEST(Corpus, PhotoRateOneSharesExactlyOneImage) {
  auto cfg = small();
  cfg.photo_rate = 1.0;
  for (const auto& d : gen_corpus(cfg, 1).dialogues) {
    EXPECT_EQ(std::count_if(d.response.begin(), d.response.end(), [](const Element& e) { return e.is_image(); }), 1);
  }
  cfg.photo_rate = 0.0;
  for (const auto& d : gen_corpus(cfg, 1).dialogues) EXPECT_EQ(d.response_image(), nullptr);
}

TEST(Corpus, StructureInvariants) {
  const auto ds = gen_corpus(small(500), 3);
  ASSERT_EQ(ds.size(), 500u);
  for (const auto& d : ds.dialogues) {
    EXPECT_NO_THROW(validate_sample(d, &ds));
    const auto t = count_turns(d);
    EXPECT_GE(t, 2u);
    EXPECT_LE(t, 6u);
  }
}

TEST(Corpus, CaptionsMatchRenderedImages) {
  const auto ds = gen_corpus(small(300), 4);
  for (const auto& d : ds.dialogues)
    for (const auto* side : {&d.context, &d.response})
      for (const auto& e : *side) {
        if (!e.is_image()) continue;
        const auto a = parse_caption(e.text);
        ASSERT_TRUE(a) << e.text;
        EXPECT_EQ(decode_attributes(ds.image(e.image)), *a);
      }
}

TEST(Corpus, AttributeMarginalsAreUniform) {
  auto cfg = small(10000);
  cfg.held_out_fraction = 0.0;
  const auto ds = gen_corpus(cfg, 5);
  std::array<std::vector<double>, 4> counts{std::vector<double>(4), std::vector<double>(6), std::vector<double>(9),
                                            std::vector<double>(2)};
  double n = 0;
  for (const auto& d : ds.dialogues)
    for (const auto* side : {&d.context, &d.response})
      for (const auto& e : *side) {
        if (!e.is_image()) continue;
        const auto a = *parse_caption(e.text);
        counts[0][a.shape] += 1, counts[1][a.color] += 1, counts[2][a.position] += 1, counts[3][a.size] += 1;
        n += 1;
      }
  ASSERT_GT(n, 5000);
  for (const auto& c : counts)
    for (double k : c) EXPECT_NEAR(k / n, 1.0 / c.size(), 0.02);
}

TEST(Corpus, FixedLayoutImagesAreLargeAndCentered) {
  auto cfg = small();
  cfg.fixed_layout = true;
  for (const auto& d : gen_corpus(cfg, 6).dialogues)
    for (const auto* side : {&d.context, &d.response})
      for (const auto& e : *side)
        if (e.is_image()) {
          const auto a = *parse_caption(e.text);
          EXPECT_EQ(a.position, 4);
          EXPECT_EQ(a.size, 1);
        }
}

TEST(Corpus, SplitsAreDisjointAndHoldOutPairs) {
  const auto cfg = small(2000);
  const auto ds = gen_corpus(cfg, 9);
  std::map<std::string, std::size_t> sizes;
  std::set<std::string> ids;
  for (const auto& d : ds.dialogues) {
    EXPECT_TRUE(ids.insert(d.id).second);
    ++sizes[d.split];
  }
  EXPECT_EQ(sizes["train"], 1600u);
  EXPECT_EQ(sizes["dev"], 200u);
  EXPECT_EQ(sizes["test"], 200u);
  EXPECT_EQ(ds.split("dev").size(), 200u);

  const auto held = held_out_pairs(cfg, Rng(9));
  ASSERT_EQ(held.size(), 2u);
  auto pair_of = [](const Element& e) {
    const auto a = *parse_caption(e.text);
    return a.shape * 6 + a.color;
  };
  std::size_t held_in_eval = 0;
  for (const auto& d : ds.dialogues)
    for (const auto* side : {&d.context, &d.response})
      for (const auto& e : *side) {
        if (!e.is_image()) continue;
        const bool is_held = std::binary_search(held.begin(), held.end(), pair_of(e));
        if (d.split == "train") {
          EXPECT_FALSE(is_held) << d.id;
        }
        held_in_eval += is_held;
      }
  EXPECT_GT(held_in_eval, 0u);
}

TEST(Corpus, ConfigValidation) {
  auto c = small();
  c.n_dialogues = 9;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small();
  c.dev_fraction = 0.3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small();
  c.photo_rate = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small();
  c.template_pool = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Jsonl, RoundTrip) {
  const auto dir = temp_dir("roundtrip");
  const auto ds = gen_corpus(small(), 11);
  save_corpus(ds, dir);
  EXPECT_EQ(load_corpus(dir), ds);
  EXPECT_EQ(load_corpus(dir / kDialogueFile), ds);
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream os(p);
  for (const auto& l : lines) os << l << '\n';
}

std::string good_line(const std::string& id = "x1") {
  return R"({"schema":"photobridge.dialogue/1","id":")" + id +
         R"(","split":"train","context":[{"type":"text","speaker":"A","text":"hi"}],"response":[{"type":"text","speaker":"B","text":"hello"}]})";
}

template <class F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

TEST(Jsonl, MissingCaptionNamesFieldAndLine) {
  const auto dir = temp_dir("missing_caption");
  write_lines(dir / kDialogueFile,
              {good_line("x1"),
               R"({"schema":"photobridge.dialogue/1","id":"x2","split":"train","context":[{"type":"text","speaker":"A","text":"hi"}],"response":[{"type":"image","speaker":"B","image":"images/a.ppm"}]})"});
  const auto msg = error_of([&] { load_corpus(dir); });
  EXPECT_NE(msg.find(":2:"), std::string::npos) << msg;
  EXPECT_NE(msg.find("response[0].caption"), std::string::npos) << msg;
  EXPECT_THROW(load_corpus(dir), ParseError);
}

TEST(Jsonl, MalformedLines) {
  const auto dir = temp_dir("malformed");
  write_lines(dir / kDialogueFile, {good_line(), "{not json"});
  EXPECT_NE(error_of([&] { load_corpus(dir); }).find(":2:"), std::string::npos);
  write_lines(dir / kDialogueFile, {R"({"schema":"other/9","id":"x","split":"train","context":[],"response":[]})"});
  EXPECT_NE(error_of([&] { load_corpus(dir); }).find("schema"), std::string::npos);
  write_lines(dir / kDialogueFile, {good_line("dup"), good_line("dup")});
  EXPECT_NE(error_of([&] { load_corpus(dir); }).find("duplicate"), std::string::npos);
  write_lines(dir / kDialogueFile,
              {R"({"schema":"photobridge.dialogue/1","id":"x","split":"train","context":[{"type":"text","speaker":"A","text":"hi"}],"response":[{"type":"text","speaker":"A","text":"again"}]})"});
  EXPECT_THROW(load_corpus(dir), ParseError);
  write_lines(dir / kDialogueFile,
              {R"({"schema":"photobridge.dialogue/1","id":"x","split":"train","context":[{"type":"text","speaker":"A","text":"hi"}],"response":[{"type":"image","speaker":"B","image":"images/none.ppm","caption":"c"}]})"});
  EXPECT_THROW(load_corpus(dir), DataError);
}

TEST(Jsonl, EmptyFileGivesEmptyDataset) {
  const auto dir = temp_dir("empty");
  write_lines(dir / kDialogueFile, {});
  EXPECT_TRUE(load_corpus(dir).empty());
}

TEST(PhotoChat, SharedPhotoBecomesImageElement) {
  const auto j = Json::parse(R"([{
    "photo_id": "p42", "photo_description": "a red square",
    "dialogue": [
      {"message": "do you have pets", "share_photo": false, "user_id": 0},
      {"message": "", "share_photo": true, "user_id": 1}
    ]}])");
  const auto ds = ingest_photochat_json(j, "fixture");
  ASSERT_EQ(ds.size(), 1u);
  const auto& d = ds.dialogues[0];
  ASSERT_EQ(d.context.size(), 1u);
  EXPECT_EQ(d.context[0], Element::utterance(Speaker::a, "do you have pets"));
  ASSERT_EQ(d.response.size(), 1u);
  EXPECT_TRUE(d.response[0].is_image());
  EXPECT_EQ(d.response[0].text, "a red square");
  EXPECT_EQ(d.response[0].speaker, Speaker::b);
  EXPECT_EQ(ds.image(d.response[0].image), placeholder_render("a red square"));
}

TEST(PhotoChat, TextOnlyDialogueIsKept) {
  const auto j = Json::parse(R"({"version": 1, "dialogues": [{
    "photo_description": "unused",
    "dialogue": [
      {"message": "hi", "share_photo": false, "user_id": 3},
      {"message": "how are you", "share_photo": false, "user_id": 3},
      {"message": "fine", "share_photo": false, "user_id": 8}
    ]}]})");
  const auto ds = ingest_photochat_json(j, "fixture");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.dialogues[0].context.size(), 2u);
  EXPECT_EQ(ds.dialogues[0].response, std::vector<Element>{Element::utterance(Speaker::b, "fine")});
  EXPECT_TRUE(ds.images.empty());
}

TEST(PhotoChat, Errors) {
  const auto missing = Json::parse(R"([{"dialogue": [
      {"message": "hi", "share_photo": false, "user_id": 0},
      {"message": "look", "share_photo": true, "user_id": 1}]}])");
  EXPECT_THROW(ingest_photochat_json(missing, "fixture"), IngestionError);
  EXPECT_THROW(ingest_photochat_json(Json::parse(R"({"version": 2, "dialogues": []})"), "fixture"), IngestionError);
  EXPECT_THROW(ingest_photochat_json(Json::parse(R"({"dialogues": []})"), "fixture"), IngestionError);
  EXPECT_THROW(ingest_photochat_json(Json::parse(R"("text")"), "fixture"), IngestionError);
  const auto one_turn = Json::parse(R"([{"dialogue": [{"message": "hi", "share_photo": false, "user_id": 0}]}])");
  EXPECT_THROW(ingest_photochat_json(one_turn, "fixture"), IngestionError);
}

TEST(PhotoChat, FileIngestion) {
  const auto dir = temp_dir("photochat");
  {
    std::ofstream os(dir / "pc.json");
    os << R"([{"photo_id": 7, "photo_description": "a dog", "dialogue": [
      {"message": "hey", "share_photo": false, "user_id": 0},
      {"message": "here", "share_photo": true, "user_id": 1}]}])";
  }
  const auto ds = ingest_photochat(dir / "pc.json", "test");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.dialogues[0].split, "test");
  EXPECT_EQ(ds.dialogues[0].response.size(), 2u);
  save_corpus(ds, dir / "out");
  EXPECT_EQ(load_corpus(dir / "out"), ds);
}

}  // namespace
}  // namespace photobridge::data
