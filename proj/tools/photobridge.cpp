// photobridge: data generation, training, evaluation, gradient audits, DVTM
// benchmarks and temperature sweeps behind one entrypoint.
//
// Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric failure,
// 4 internal error. Logs go to stderr as key=value lines; artifacts go to the
// output directory.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "photobridge/audit.hpp"
#include "photobridge/config.hpp"
#include "photobridge/data.hpp"
#include "photobridge/log.hpp"
#include "photobridge/trainer.hpp"

namespace fs = std::filesystem;
using namespace photobridge;

namespace {

enum Exit : int { kOk = 0, kConfig = 1, kData = 2, kNumeric = 3, kInternal = 4 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool with_mode) {
  app->add_option("--config", c.config_path, "JSON config file with flat dotted keys")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "Override a config key: key=value (value parsed as JSON, else string)")
      ->take_all();
  app->add_option("--seed", c.seed, "Root seed (same as --set seed=N)");
  if (with_mode) app->add_option("--mode", c.mode, "e2e | pipeline | e2e_minus_perceptron | e2e_minus_generator");
}

// File values, then --set overrides in order, then --seed / --mode.
RunConfig effective_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  for (const auto& kv : c.overrides) apply_override(cfg, kv);
  if (c.seed) cfg.seed = *c.seed;
  if (c.mode) cfg.train.mode = parse_mode(*c.mode);
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
  if (!os) throw DataError("cannot write " + p.string());
}

int cmd_gen_data(const Common& c) {
  const auto cfg = effective_config(c);
  const fs::path out = c.out.empty() ? fs::path(cfg.data_path) : fs::path(c.out);
  const auto ds = data::gen_corpus(cfg.corpus, cfg.seed);
  data::save_corpus(ds, out);
  save_config(cfg, out / "config.json");
  log::info("gen_data.done").kv("out", out.string()).kv("dialogues", ds.dialogues.size()).kv("images", ds.images.size());
  return kOk;
}

int cmd_ingest(const Common& c, const std::string& input, const std::string& split) {
  if (c.out.empty()) throw ConfigError("ingest-photochat: --out is required");
  const auto ds = data::ingest_photochat(input, split);
  data::save_corpus(ds, c.out);
  log::info("ingest.done").kv("input", input).kv("out", c.out).kv("dialogues", ds.dialogues.size());
  return kOk;
}

int cmd_train(const Common& c) {
  const auto cfg = effective_config(c);
  if (c.out.empty()) throw ConfigError("train: --out (run directory) is required");
  const auto ds = data::load_corpus(cfg.data_path);
  trainer::TrainOptions opt;
  opt.run_dir = c.out;
  const auto res = trainer::train(cfg, ds, opt);
  log::info("train.done").kv("run_dir", c.out).kv("steps", res.steps).kv("best_epoch", res.best_epoch)
      .kv("caption_fallbacks", res.fallbacks);
  return kOk;
}

int cmd_eval(const Common& c, const std::string& run_dir, const std::string& checkpoint) {
  if (run_dir.empty() && checkpoint.empty()) throw ConfigError("eval: --run or --checkpoint is required");
  const fs::path ck = checkpoint.empty() ? fs::path(run_dir) / "checkpoints" / "best.ckpt" : fs::path(checkpoint);
  auto sys = trainer::load_system(ck);
  // Eval keys and data.path come from --config / --set; everything else from the checkpoint.
  RunConfig cfg = sys.config;
  if (!c.config_path.empty()) {
    const auto file = load_config(c.config_path);
    cfg.eval = file.eval;
    cfg.data_path = file.data_path;
  }
  for (const auto& kv : c.overrides) apply_override(cfg, kv);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  sys.config = cfg;
  const auto ds = data::load_corpus(cfg.data_path);
  std::vector<trainer::Prediction> preds;
  const auto rep = trainer::evaluate(sys, ds, cfg.eval, &preds);

  const fs::path out = !c.out.empty() ? fs::path(c.out) : !run_dir.empty() ? fs::path(run_dir) : ck.parent_path();
  fs::create_directories(out);
  const std::string label = std::string(mode_name(cfg.train.mode));
  Json j = metrics::to_json(rep);
  j["mode"] = label;
  j["checkpoint"] = ck.string();
  j["split"] = cfg.eval.split;
  write_text(out / ("eval-" + cfg.eval.split + ".json"), j.dump(2) + "\n");
  write_text(out / ("eval-" + cfg.eval.split + ".csv"),
             "mode," + metrics::csv_header() + "\n" + label + "," + metrics::csv_row(rep) + "\n");
  std::ofstream pj(out / ("predictions-" + cfg.eval.split + ".jsonl"));
  const auto samples = trainer::eval_samples(ds, cfg.eval);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    Json p;
    p["id"] = samples[i].id;
    p["response"] = trainer::join_elements(preds[i].elements);
    p["reference"] = trainer::join_elements(samples[i].response);
    if (preds[i].caption) p["caption"] = *preds[i].caption;
    pj << p.dump() << '\n';
  }
  save_config(cfg, out / "eval_config.json");
  std::cout << "mode," << metrics::csv_header() << '\n' << label << ',' << metrics::csv_row(rep) << '\n';
  log::info("eval.done").kv("mode", label).kv("split", cfg.eval.split).kv("n", rep.n_samples)
      .kv("attribute_acc", rep.attributes.joint).kv("bleu1", rep.bleu1);
  return kOk;
}

int cmd_gradcheck(const Common& c, std::size_t instances) {
  const auto cfg = effective_config(c);
  const auto groups = audit::gradcheck_suite(cfg.seed, instances);
  bool ok = true;
  Json j = Json::array();
  std::cout << "group,instances,max_rel_error,seconds,status\n";
  for (const auto& g : groups) {
    ok = ok && g.ok();
    std::cout << g.name << ',' << g.instances << ',' << trainer::fmt_num(g.max_rel_error) << ','
              << trainer::fmt_num(g.seconds) << ',' << (g.ok() ? "pass" : "fail") << '\n';
    j.push_back({{"group", g.name}, {"instances", g.instances}, {"max_rel_error", g.max_rel_error},
                 {"seconds", g.seconds}, {"pass", g.ok()}});
  }
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_text(fs::path(c.out) / "gradcheck.json", j.dump(2) + "\n");
    save_config(cfg, fs::path(c.out) / "config.json");
  }
  if (!ok) log::error("gradcheck.failed").kv("tolerance", audit::kGradTolerance);
  return ok ? kOk : kNumeric;
}

int cmd_bench(const Common& c, std::size_t captions) {
  const auto cfg = effective_config(c);
  const auto b = audit::bench_dvtm(cfg.seed, captions);
  std::string csv = audit::bench_csv_header() + "\n";
  for (const auto& r : b.rows) csv += audit::bench_csv_row(r) + "\n";
  std::cout << csv;
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_text(fs::path(c.out) / "bench_dvtm.csv", csv);
    save_config(cfg, fs::path(c.out) / "config.json");
  }
  std::size_t worst = 0;
  for (const auto& r : b.rows)
    if (r.llm_tokens <= audit::kBenchMaxTokens && r.sd_tokens <= audit::kBenchMaxTokens)
      worst = std::max<std::size_t>(worst, r.at_bench_vocab.sparse_bytes);
  log::info("bench_dvtm.summary").kv("vocab", audit::kBenchVocab)
      .kv("dense_fp16_bytes", b.empty_at_bench_vocab.dense_bytes_fp16).kv("max_sparse_bytes", worst)
      .kv("budget_bytes", audit::kSparseBudgetBytes).kv("pass", b.ok());
  return b.ok() ? kOk : kNumeric;
}

int cmd_sweep(const Common& c, bool parallel) {
  const auto cfg = effective_config(c);
  if (c.out.empty()) throw ConfigError("sweep-tau: --out is required");
  if (parallel) log::warn("sweep.parallel_ignored").kv("reason", "runs are sequential in this build");
  const auto ds = data::load_corpus(cfg.data_path);
  const auto rows = trainer::sweep_temperature(cfg, ds, c.out);
  log::info("sweep.done").kv("rows", rows.size()).kv("out", c.out);
  return kOk;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    log::error("config_error").kv("message", e.what());
    return kConfig;
  } catch (const DimensionError& e) {
    log::error("config_error").kv("message", e.what());
    return kConfig;
  } catch (const DataError& e) {
    log::error("data_error").kv("message", e.what());
    return kData;
  } catch (const StatisticsError& e) {
    log::error("data_error").kv("message", e.what());
    return kData;
  } catch (const NumericError& e) {
    log::error("numeric_error").kv("message", e.what());
    return kNumeric;
  } catch (const Json::exception& e) {
    log::error("config_error").kv("message", e.what());
    return kConfig;
  } catch (const fs::filesystem_error& e) {
    log::error("data_error").kv("message", e.what());
    return kData;
  } catch (const std::exception& e) {
    log::error("internal_error").kv("message", e.what());
    return kInternal;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"photobridge: end-to-end photo-sharing dialogue toolkit"};
  app.require_subcommand(1);
  std::string level = "info";
  app.add_option("--log-level", level, "debug | info | warn | error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

  Common gen, train, eval, grad, bench, sweep, ingest;

  auto* g = app.add_subcommand("gen-data", "Generate the procedural dialogue corpus");
  add_common(g, gen, false);
  g->add_option("--out", gen.out, "Corpus directory (default: data.path)");

  auto* t = app.add_subcommand("train", "Train one mode; writes a run directory");
  add_common(t, train, true);
  t->add_option("--out", train.out, "Run directory")->required();

  std::string run_dir, checkpoint;
  auto* e = app.add_subcommand("eval", "Evaluate a trained run on a split");
  add_common(e, eval, false);
  e->add_option("--run", run_dir, "Run directory (uses checkpoints/best.ckpt)");
  e->add_option("--checkpoint", checkpoint, "Explicit checkpoint file");
  e->add_option("--out", eval.out, "Output directory (default: the run directory)");

  std::size_t instances = 20;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference audit of the differentiable bridge and losses");
  add_common(gc, grad, false);
  gc->add_option("--instances", instances, "Random instances per group")->check(CLI::PositiveNumber);
  gc->add_option("--out", grad.out, "Optional output directory for gradcheck.json");

  std::size_t captions = 200;
  auto* b = app.add_subcommand("bench-dvtm", "Sparse vs dense transformation-matrix footprint");
  add_common(b, bench, false);
  b->add_option("--captions", captions, "Random captions to measure");
  b->add_option("--out", bench.out, "Optional output directory for bench_dvtm.csv");

  bool parallel = false;
  auto* s = app.add_subcommand("sweep-tau", "Temperature sweep over sweep.taus x sweep.seeds");
  add_common(s, sweep, false);
  s->add_option("--out", sweep.out, "Sweep output directory")->required();
  s->add_flag("--parallel", parallel, "Run independent trainings concurrently (accepted, runs sequentially)");

  std::string input, split = "train";
  auto* ing = app.add_subcommand("ingest-photochat", "Convert PhotoChat-style JSON to the dialogue JSONL schema");
  ing->add_option("--input", input, "PhotoChat JSON file")->required()->check(CLI::ExistingFile);
  ing->add_option("--split", split, "Split label for ingested dialogues");
  ing->add_option("--out", ingest.out, "Output corpus directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kConfig;
  }
  log::threshold() = level == "debug" ? log::Level::debug
                     : level == "warn" ? log::Level::warn
                     : level == "error" ? log::Level::error
                                        : log::Level::info;

  if (g->parsed()) return guarded([&] { return cmd_gen_data(gen); });
  if (t->parsed()) return guarded([&] { return cmd_train(train); });
  if (e->parsed()) return guarded([&] { return cmd_eval(eval, run_dir, checkpoint); });
  if (gc->parsed()) return guarded([&] { return cmd_gradcheck(grad, instances); });
  if (b->parsed()) return guarded([&] { return cmd_bench(bench, captions); });
  if (s->parsed()) return guarded([&] { return cmd_sweep(sweep, parallel); });
  if (ing->parsed()) return guarded([&] { return cmd_ingest(ingest, input, split); });
  return kConfig;
}
