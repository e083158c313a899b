// mpvcrop: data generation, training, evaluation, ablation, correlation study
// and self-verification from one config-driven entry point.

#include "mpvcrop/mpvcrop.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace mpvcrop;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kUsage = 2, kBadConfig = 3, kMissingCheckpoint = 4 };

class missing_checkpoint : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

struct Context {
  std::string command;
  json resolved;
  RunConfig rc;
  fs::path out;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  json artifacts = json::array();

  fs::path artifact(const std::string& rel) {
    artifacts.push_back(rel);
    return out / rel;
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config file (overlaid on the defaults)");
  sub->add_option("--out", c.out, "output directory (default: config out_dir, or $MPVCROP_OUT)");
  sub->add_option("--seed", c.seed, "master seed");
  sub->add_option("--set", c.overrides, "override a config value, e.g. --set train.epochs=20 (repeatable)");
}

Context make_context(const std::string& command, const Common& c) {
  json base = default_config_json();
  // The environment only replaces the built-in default; the file and --set still win.
  if (const char* env = std::getenv("MPVCROP_OUT"); env && *env) base["out_dir"] = env;
  std::vector<std::string> overrides = c.overrides;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  json resolved = resolve_config_json(c.config ? std::optional<fs::path>(*c.config) : std::nullopt, overrides, base);
  if (c.out) resolved["out_dir"] = *c.out;

  Context ctx;
  ctx.command = command;
  ctx.rc = config_from_json(resolved);
  ctx.resolved = std::move(resolved);
  ctx.out = ctx.rc.out_dir;
  fs::create_directories(ctx.out);
  // The resolved config goes to disk before any work starts.
  write_json_file(ctx.out / "config.json", ctx.resolved, 2);
  ctx.artifacts.push_back("config.json");
  return ctx;
}

void write_manifest(Context& ctx, const json& results) {
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  json m{{"tool", "mpvcrop"},
         {"version", MPVCROP_VERSION},
         {"command", ctx.command},
         {"seed", ctx.rc.seed},
         {"data_seed", ctx.resolved.at("data_seed")},
         {"precision", ctx.resolved.at("precision")},
         {"config", ctx.resolved},
         {"model", model_config_json(ctx.rc.model)},
         {"duration_seconds", secs},
         {"compiler", __VERSION__},
         {"artifacts", ctx.artifacts},
         {"results", results}};
  write_json_file(ctx.out / "manifest.json", m, 2);
}

std::uint64_t data_seed(const Context& ctx) {
  const auto s = ctx.resolved.at("data_seed").get<std::int64_t>();
  return s < 0 ? ctx.rc.seed : static_cast<std::uint64_t>(s);
}

Dataset load_or_make_dataset(const Context& ctx, const std::optional<std::string>& data_dir) {
  if (data_dir) {
    if (!fs::exists(fs::path(*data_dir) / "index.json")) throw usage_error("no dataset index in " + *data_dir);
    return read_dataset(*data_dir);
  }
  return make_dataset(ctx.rc.data, data_seed(ctx));
}

json report_json(const MetricsReport& r) {
  return {{"mode", r.mode}, {"split", r.split}, {"multi_annotation", r.multi_annotation},
          {"mean_iou", r.mean_iou}, {"mean_bde", r.mean_bde}, {"samples", r.samples.size()}};
}

template <class T>
ModelPair<T> load_checkpoint(const std::string& path, const ModelConfig& fallback) {
  if (!fs::exists(path)) throw missing_checkpoint("checkpoint not found: " + path);
  json j;
  try {
    j = read_json_file(path);
  } catch (const std::exception& e) {
    throw missing_checkpoint("cannot read checkpoint " + path + ": " + e.what());
  }
  ModelConfig mc = fallback;
  if (j.contains("meta") && j["meta"].contains("model")) mc = model_config_from_json(j["meta"]["model"]);
  auto model = init_models<T>(0, mc);
  load_teacher_from_checkpoint(j, model);
  return model;
}

template <class F>
auto with_precision(const Context& ctx, F&& f) {
  const auto p = ctx.resolved.at("precision").get<std::string>();
  if (p == "double") return f.template operator()<double>();
  if (p == "float") return f.template operator()<float>();
  throw usage_error("precision must be 'double' or 'float'");
}

// --------------------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  auto ctx = make_context("gen-data", c);
  const auto d = make_dataset(ctx.rc.data, data_seed(ctx));
  write_dataset(ctx.out / "dataset", d);
  ctx.artifacts.push_back("dataset/");
  json res{{"labeled", d.labeled.size()}, {"unlabeled", d.unlabeled.size()}, {"val", d.val.size()}, {"test", d.test.size()}};
  write_manifest(ctx, res);
  std::printf("gen-data: %zu labeled, %zu unlabeled, %zu val, %zu test -> %s\n", d.labeled.size(), d.unlabeled.size(),
              d.val.size(), d.test.size(), (ctx.out / "dataset").string().c_str());
  return kOk;
}

int cmd_train(const Common& c, const std::optional<std::string>& data_dir, bool quiet) {
  auto ctx = make_context("train", c);
  const auto data = load_or_make_dataset(ctx, data_dir);
  return with_precision(ctx, [&]<class T>() {
    RunOptions ro;
    ro.out_dir = ctx.out;
    if (!quiet)
      ro.on_epoch = [](const EpochRecord& r) {
        std::fprintf(stderr, "epoch %3d %-6s val_iou %.4f loss %.4f%s\n", r.epoch, r.semi ? "semi" : "warmup", r.val_iou,
                     r.loss.total, r.semi ? (" pl_iou " + std::to_string(r.pseudo_label_iou)).c_str() : "");
      };
    const auto res = run_training<T>(ctx.rc.train, ctx.rc.model, data, ro);
    for (const char* a : {"metrics.csv", "checkpoints/final.json"}) ctx.artifacts.push_back(a);
    if (ctx.rc.train.warmup_epochs > 0) ctx.artifacts.push_back("checkpoints/warmup.json");
    if (ctx.rc.train.semi_epochs() > 0) ctx.artifacts.push_back("pseudo_labels/");
    const auto& last = res.history.back();
    json r{{"epochs", ctx.rc.train.epochs}, {"final_val_iou", last.val_iou}, {"final_val_bde", last.val_bde}};
    if (last.semi) r["final_pseudo_label_iou"] = last.pseudo_label_iou;
    write_manifest(ctx, r);
    std::printf("train: %d epochs, val IoU %.4f, BDE %.4f -> %s\n", ctx.rc.train.epochs, last.val_iou, last.val_bde,
                ctx.out.string().c_str());
    return kOk;
  });
}

int cmd_eval(const Common& c, const std::optional<std::string>& data_dir, const std::string& checkpoint,
             const std::string& mode_s, const std::string& split_s, bool multi) {
  auto ctx = make_context("eval", c);
  const auto mode = parse_mode(mode_s);
  const auto split = parse_split(split_s);
  if (multi && split != Split::test) throw usage_error("--multi applies to the test split only");
  return with_precision(ctx, [&]<class T>() {
    const auto model = load_checkpoint<T>(checkpoint, ctx.rc.model);
    const auto data = load_or_make_dataset(ctx, data_dir);
    const auto r = evaluate_split(model, data, split, mode, ctx.rc.train.policy, ctx.rc.seed, multi);
    const std::string stem = std::string("eval_") + split_name(split) + (multi ? "_multi" : "");
    write_samples_csv(ctx.artifact(stem + ".csv"), r);
    write_json_file(ctx.artifact(stem + ".json"), report_json(r), 2);
    write_manifest(ctx, report_json(r));
    std::printf("eval: %s on %s%s: IoU %.4f, BDE %.4f (%zu images)\n", r.mode.c_str(), r.split.c_str(),
                multi ? " (multi-annotation)" : "", r.mean_iou, r.mean_bde, r.samples.size());
    return kOk;
  });
}

int cmd_ablate(const Common& c, const std::optional<std::string>& data_dir, bool quiet) {
  auto ctx = make_context("ablate", c);
  const auto data = load_or_make_dataset(ctx, data_dir);
  return with_precision(ctx, [&]<class T>() {
    AblationOptions ao;
    ao.out_dir = ctx.out;
    if (!quiet) ao.log = [](const std::string& m) { std::fprintf(stderr, "ablate: %s\n", m.c_str()); };
    const auto res = run_ablation<T>(ctx.rc.train, ctx.rc.model, data, ao);
    write_ablation_csv(ctx.artifact("ablation.csv"), res);
    json summary{{"rows", json::array()}};
    for (const auto& row : res.rows)
      summary["rows"].push_back({{"row", row.id}, {"val", report_json(row.val)}, {"test", report_json(row.test)},
                                 {"test_multi", report_json(row.test_multi)}});
    if (!res.trajectories.empty()) {
      write_trajectories_csv(ctx.artifact("trajectories.csv"), res.trajectories);
      write_correlation_csv(ctx.artifact("correlation.csv"), res.correlation);
      summary["full_composer_test"] = report_json(res.full_composer_test);
      summary["correlation"] = correlation_summary_json(res.correlation.summary);
      json finals;
      for (const auto& [id, t] : res.trajectories) finals[id] = t.back().diagnostic_iou;
      summary["final_pseudo_label_iou"] = finals;
    }
    write_json_file(ctx.artifact("summary.json"), summary, 2);
    ctx.artifacts.push_back("runs/");
    write_manifest(ctx, summary);
    const auto& r1 = res.row("i");
    const auto& last = res.rows.back();
    std::printf("ablate: test IoU row i %.4f, row %s %.4f (%.0f s) -> %s\n", r1.test.mean_iou, last.id.c_str(),
                last.test.mean_iou, res.seconds, ctx.out.string().c_str());
    return kOk;
  });
}

int cmd_correlate(const Common& c, const std::optional<std::string>& data_dir, const std::string& checkpoint,
                  const std::string& split_s) {
  auto ctx = make_context("correlate", c);
  const auto split = parse_split(split_s);
  return with_precision(ctx, [&]<class T>() {
    const auto model = load_checkpoint<T>(checkpoint, ctx.rc.model);
    const auto data = load_or_make_dataset(ctx, data_dir);
    const auto study = correlation_study(model, data.split(split), ctx.rc.train.policy, ctx.rc.seed);
    write_correlation_csv(ctx.artifact("correlation.csv"), study);
    const auto sj = correlation_summary_json(study.summary);
    write_json_file(ctx.artifact("correlation_summary.json"), sj, 2);
    write_manifest(ctx, sj);
    std::printf("correlate: %zu records on %s, spearman(var,IoU) %.4f, spearman(var,BDE) %.4f\n", study.records.size(),
                split_name(split), study.summary.spearman_iou, study.summary.spearman_bde);
    return kOk;
  });
}

int cmd_verify(const Common& c) {
  auto ctx = make_context("verify", c);
  VerifyOptions vo;
  vo.seed = ctx.rc.seed;
  const auto rep = run_verify(vo);
  const auto j = verify_report_json(rep);
  write_json_file(ctx.artifact("verify.json"), j, 2);
  write_manifest(ctx, {{"pass", rep.all_pass()}, {"failures", rep.failures()}});
  for (const auto& ch : rep.checks)
    if (!ch.pass)
      std::fprintf(stderr, "FAIL %s: %.3e vs %.1e %s\n", ch.name.c_str(), ch.value, ch.threshold, ch.detail.c_str());
  std::printf("verify: %zu/%zu checks passed\n", rep.checks.size() - rep.failures(), rep.checks.size());
  return rep.all_pass() ? kOk : kFailure;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"mpvcrop: semi-supervised crop-box regression with multi-policy rectification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", MPVCROP_VERSION);

  Common common;
  std::optional<std::string> data_dir;
  std::string checkpoint, mode = "composer+mpv+ps", split = "test";
  bool multi = false, quiet = false;

  auto* gen = app.add_subcommand("gen-data", "generate and write a synthetic dataset");
  auto* train = app.add_subcommand("train", "run warm-up and semi-supervised training");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the six ablation rows");
  auto* corr = app.add_subcommand("correlate", "head variance vs accuracy on a split");
  auto* ver = app.add_subcommand("verify", "run the self-check suite");
  for (auto* s : {gen, train, eval, ablate, corr, ver}) add_common(s, common);
  for (auto* s : {train, eval, ablate, corr}) s->add_option("--data", data_dir, "dataset directory written by gen-data");
  for (auto* s : {train, ablate}) s->add_flag("--quiet", quiet, "no per-epoch progress on stderr");
  for (auto* s : {eval, corr}) s->add_option("--checkpoint", checkpoint, "checkpoint JSON")->required();
  eval->add_option("--mode", mode, "composer | composer+mpv-avg | composer+mpv+ps");
  eval->add_option("--split", split, "labeled | unlabeled | val | test");
  eval->add_flag("--multi", multi, "score against all test annotations (max IoU / min BDE)");
  std::string corr_split = "val";
  corr->add_option("--split", corr_split, "split to study");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*train) return cmd_train(common, data_dir, quiet);
    if (*eval) return cmd_eval(common, data_dir, checkpoint, mode, split, multi);
    if (*ablate) return cmd_ablate(common, data_dir, quiet);
    if (*corr) return cmd_correlate(common, data_dir, checkpoint, corr_split);
    if (*ver) return cmd_verify(common);
  } catch (const config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kBadConfig;
  } catch (const missing_checkpoint& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kMissingCheckpoint;
  } catch (const usage_error& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kUsage;
}
