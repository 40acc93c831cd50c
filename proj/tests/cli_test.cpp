#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "photobridge/photobridge.hpp"

namespace fs = std::filesystem;

namespace photobridge {
namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("photobridge_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Runs the CLI in `dir`, optionally inside a fresh network namespace.
// The namespace remaps uids, so the binary runs from a copy inside `dir` that stays reachable.
Result run(const fs::path& dir, const std::string& args, bool no_network = false) {
  std::string exe = PHOTOBRIDGE_CLI;
  if (no_network) {
    fs::copy_file(exe, dir / "photobridge", fs::copy_options::skip_existing);
    exe = (dir / "photobridge").string();
  }
  const std::string prefix = no_network ? "unshare -rn " : "";
  const std::string cmd = "cd '" + dir.string() + "' && " + prefix + "'" + exe + "' " + args +
                          " > stdout.txt 2> stderr.txt";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(dir / "stdout.txt");
  r.err = slurp(dir / "stderr.txt");
  return r;
}

bool network_sandbox_available() { return std::system("unshare -rn true > /dev/null 2>&1") == 0; }

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

// Small enough for a few seconds per training run.
void write_tiny_config(const fs::path& p) {
  std::ofstream(p) << R"({
  "seed": 3, "data.path": "corpus",
  "corpus.n_dialogues": 60, "corpus.fixed_layout": true, "corpus.held_out_fraction": 0.0,
  "vocab.llm_size": 260, "vocab.sd_size": 220,
  "model.d_model": 16, "model.n_blocks": 1, "model.n_heads": 2, "model.max_len": 64, "model.ff_mult": 2,
  "gen.emb_dim": 8, "gen.cond_dim": 8, "gen.hidden": 32, "gen.temb_dim": 8, "gen.diffusion_steps": 16,
  "train.batch_size": 4, "train.lr": 0.001, "train.epochs": 1, "train.noise_samples": 2,
  "eval.sample_steps": 8, "eval.max_len": 24
})";
}

TEST(Cli, GenDataIsDeterministic) {
  const auto d = scratch("gen");
  write_tiny_config(d / "c.json");
  ASSERT_EQ(run(d, "gen-data --config c.json --seed 7 --out a").code, 0);
  ASSERT_EQ(run(d, "gen-data --config c.json --seed 7 --out b").code, 0);
  ASSERT_EQ(run(d, "gen-data --config c.json --seed 8 --out c").code, 0);
  const auto a = tree(d / "a"), b = tree(d / "b"), c = tree(d / "c");
  EXPECT_GT(a.size(), 2u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.at("dialogues.jsonl"), c.at("dialogues.jsonl"));
  EXPECT_TRUE(a.contains("config.json"));
}

TEST(Cli, ExitCodesNameTheProblem) {
  const auto d = scratch("codes");
  auto r = run(d, "gen-data --set corpus.bogus=1 --out x");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("corpus.bogus"), std::string::npos) << r.err;

  r = run(d, "train --set train.lr=-1 --out run");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("train.lr"), std::string::npos) << r.err;

  r = run(d, "train --mode sideways --out run");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("sideways"), std::string::npos) << r.err;

  r = run(d, "train --set data.path=missing_dir --out run");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing_dir"), std::string::npos) << r.err;

  std::ofstream(d / "bad.json") << "{\"seed\": 1,\n  \"corpus.n_dialogues\": }";
  r = run(d, "gen-data --config bad.json --out x");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bad.json"), std::string::npos) << r.err;

  EXPECT_EQ(run(d, "no-such-subcommand").code, 1);
  EXPECT_EQ(run(d, "--help").code, 0);
}

TEST(Cli, LogsAreKeyValueLines) {
  const auto d = scratch("logs");
  write_tiny_config(d / "c.json");
  const auto r = run(d, "gen-data --config c.json --out corpus");
  ASSERT_EQ(r.code, 0);
  std::istringstream is(r.err);
  std::size_t n = 0;
  for (std::string line; std::getline(is, line); ++n) EXPECT_TRUE(line.starts_with("level=")) << line;
  EXPECT_GT(n, 0u);
}

TEST(Cli, TrainBothModesThenEvalGivesComparableRows) {
  const auto d = scratch("train");
  write_tiny_config(d / "c.json");
  ASSERT_EQ(run(d, "gen-data --config c.json").code, 0);
  for (const std::string mode : {"pipeline", "e2e"}) {
    const auto t = run(d, "train --config c.json --mode " + mode + " --out run_" + mode);
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_TRUE(fs::exists(d / ("run_" + mode) / "config.json"));
    EXPECT_TRUE(fs::exists(d / ("run_" + mode) / "checkpoints" / "best.ckpt"));
    const auto e = run(d, "eval --run run_" + mode);
    ASSERT_EQ(e.code, 0) << e.err;
  }
  const auto a = slurp(d / "run_e2e" / "eval-dev.csv"), b = slurp(d / "run_pipeline" / "eval-dev.csv");
  const auto header = [](const std::string& s) { return s.substr(0, s.find('\n')); };
  EXPECT_EQ(header(a), header(b));
  EXPECT_TRUE(a.find("\ne2e,") != std::string::npos);
  EXPECT_TRUE(b.find("\npipeline,") != std::string::npos);
  EXPECT_EQ(load_config(d / "run_e2e" / "config.json").train.mode, Mode::e2e);
}

// The echoed config alone reproduces the run.
TEST(Cli, EchoedConfigReplaysRunExactly) {
  const auto d = scratch("replay");
  write_tiny_config(d / "c.json");
  ASSERT_EQ(run(d, "gen-data --config c.json").code, 0);
  ASSERT_EQ(run(d, "train --config c.json --set train.lr=0.002 --seed 5 --out first").code, 0);
  ASSERT_EQ(run(d, "train --config first/config.json --out second").code, 0);
  EXPECT_EQ(slurp(d / "first" / "metrics.csv"), slurp(d / "second" / "metrics.csv"));
  EXPECT_EQ(slurp(d / "first" / "config.json"), slurp(d / "second" / "config.json"));
  EXPECT_EQ(slurp(d / "first" / "checkpoints" / "best.ckpt"), slurp(d / "second" / "checkpoints" / "best.ckpt"));
}

TEST(Cli, GradcheckAndBenchReport) {
  const auto d = scratch("audit");
  auto r = run(d, "gradcheck --instances 1 --out g");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* g : {"gumbel_softmax", "transform", "pool_straight_through", "lm_loss", "diffusion_loss"})
    EXPECT_NE(r.out.find(std::string(g) + ",1,"), std::string::npos) << g;
  EXPECT_TRUE(fs::exists(d / "g" / "gradcheck.json"));

  r = run(d, "bench-dvtm --captions 10 --out b");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("worst_case_24,24,24,576,4624,3200000000,"), std::string::npos) << r.out;
  EXPECT_NE(r.err.find("pass=1"), std::string::npos) << r.err;
}

TEST(Cli, SweepWritesCsvAndSummary) {
  const auto d = scratch("sweep");
  write_tiny_config(d / "c.json");
  ASSERT_EQ(run(d, "gen-data --config c.json").code, 0);
  const auto r = run(d,
                     "sweep-tau --config c.json --set 'sweep.taus=[1,0.001]' --set 'sweep.seeds=[1,2]' "
                     "--set sweep.warm_epochs=1 --set sweep.finetune_steps=2 --out sw");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(d / "sw" / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_TRUE(fs::exists(d / "sw" / "sweep_summary.csv"));
  EXPECT_TRUE(fs::exists(d / "sw" / "config.json"));
}

// Shipped configs parse, and default.json is the full key set at built-in values.
TEST(Cli, ShippedConfigsLoad) {
  const fs::path dir = PHOTOBRIDGE_CONFIG_DIR;
  EXPECT_EQ(config_to_json(load_config(dir / "default.json")), config_to_json(RunConfig{}));
  EXPECT_NO_THROW(load_config(dir / "smoke.json").validate());
}

TEST(Cli, IngestPhotoChat) {
  const auto d = scratch("ingest");
  std::ofstream(d / "pc.json") << R"([{"photo_id": 7, "photo_description": "a dog", "dialogue": [
      {"message": "hey", "share_photo": false, "user_id": 0},
      {"message": "here", "share_photo": true, "user_id": 1}]}])";
  auto r = run(d, "ingest-photochat --input pc.json --split test --out corpus");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(d / "corpus" / "dialogues.jsonl").find("\"split\":\"test\""), std::string::npos);

  std::ofstream(d / "broken.json") << R"([{"dialogue": [{"message": "hi", "share_photo": false, "user_id": 0}]}])";
  r = run(d, "ingest-photochat --input broken.json --out corpus2");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("broken.json"), std::string::npos) << r.err;
}

TEST(Cli, RunsWithoutNetwork) {
  if (!network_sandbox_available()) GTEST_SKIP() << "unshare -rn not permitted here";
  const auto d = scratch("offline");
  write_tiny_config(d / "c.json");
  ASSERT_EQ(run(d, "gen-data --config c.json", true).code, 0);
  const auto t = run(d, "train --config c.json --out run", true);
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(run(d, "eval --run run", true).code, 0);
  EXPECT_EQ(run(d, "bench-dvtm --captions 5", true).code, 0);
}

}  // namespace
}  // namespace photobridge
