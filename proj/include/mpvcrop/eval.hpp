#pragma once

// Ablation sweep, head-stability correlation study and pseudo-label
// trajectories, all driven by the trainer and scored on the synthetic splits.

#include "mpvcrop/metrics.hpp"
#include "mpvcrop/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace mpvcrop {

// ---------------------------------------------------------------------------
// Rank statistics

/// Ranks starting at 1; tied values share the average of their ranks.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw usage_error("pearson: need two equally sized samples of length >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

// ---------------------------------------------------------------------------
// Correlation between head stability and accuracy

struct CorrelationRecord {
  std::size_t image_id = 0;
  std::size_t head = 0;
  double variance = 0.0;
  double iou = 0.0;
  double bde = 0.0;
};

struct CorrelationSummary {
  std::size_t images = 0;
  std::size_t heads = 0;
  double spearman_iou = 0.0;
  double spearman_bde = 0.0;
  /// Fraction of images whose argmin-variance head is within `tolerance` IoU of the best head.
  double argmin_near_best = 0.0;
  double tolerance = 0.01;
};

struct CorrelationStudy {
  std::vector<CorrelationRecord> records;
  CorrelationSummary summary;
};

template <class T>
CorrelationStudy correlation_study(const ModelPair<T>& model, const std::vector<Scene>& scenes, const PolicyConfig& policy,
                                   std::uint64_t seed, std::size_t chunk = 64) {
  CorrelationStudy out;
  out.summary.images = scenes.size();
  out.summary.heads = model.mpv.num_heads();
  std::size_t near_best = 0;
  for (std::size_t begin = 0; begin < scenes.size(); begin += chunk) {
    const std::size_t end = std::min(scenes.size(), begin + chunk);
    std::vector<const Image*> ptrs;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = begin; i < end; ++i) {
      ptrs.push_back(&scenes[i].image);
      seeds.push_back(derive_seed(seed, Stream::eval_policy, {0xC0, i}));
    }
    const auto images = image_batch<T>(ptrs);
    const auto proposals = composer_forward(model.composer, images);
    const auto stats = select_policy_batch(model.mpv, images, proposals, policy, seeds);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& st = stats[i - begin];
      const Box& gt = scenes[i].gt_crop;
      double best = 0.0;
      for (std::size_t j = 0; j < st.variance.size(); ++j) {
        const Box& r0 = st.rectified[j][0];
        CorrelationRecord rec{i, j, st.variance[j], iou(r0, gt), bde(r0, gt)};
        best = std::max(best, rec.iou);
        out.records.push_back(rec);
      }
      if (iou(st.rectified[st.selected][0], gt) >= best - out.summary.tolerance) ++near_best;
    }
  }
  if (out.records.size() >= 2) {
    std::vector<double> v, a, b;
    for (const auto& r : out.records) {
      v.push_back(r.variance);
      a.push_back(r.iou);
      b.push_back(r.bde);
    }
    out.summary.spearman_iou = spearman(v, a);
    out.summary.spearman_bde = spearman(v, b);
  }
  if (!scenes.empty()) out.summary.argmin_near_best = static_cast<double>(near_best) / static_cast<double>(scenes.size());
  return out;
}

/// CSV: image_id,head,variance,iou,bde
inline void write_correlation_csv(const std::filesystem::path& path, const CorrelationStudy& s) {
  std::ofstream os(path);
  if (!os) throw checkpoint_error("cannot write " + path.string());
  os << "image_id,head,variance,iou,bde\n";
  char buf[128];
  for (const auto& r : s.records) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f,%.6f,%.6f\n", r.image_id, r.head, r.variance, r.iou, r.bde);
    os << buf;
  }
}

inline nlohmann::json correlation_summary_json(const CorrelationSummary& s) {
  return {{"images", s.images},           {"heads", s.heads},
          {"spearman_variance_iou", s.spearman_iou}, {"spearman_variance_bde", s.spearman_bde},
          {"argmin_near_best_fraction", s.argmin_near_best}, {"tolerance", s.tolerance}};
}

// ---------------------------------------------------------------------------
// Pseudo-label trajectories

struct TrajectoryPoint {
  int epoch = 0;
  double diagnostic_iou = 0.0;
};

/// Per-epoch mean diagnostic pseudo-label IoU of the semi-supervised epochs.
/// `history` must cover every semi-supervised epoch of `cfg` exactly once.
inline std::vector<TrajectoryPoint> trajectory_from_history(const std::vector<EpochRecord>& history, const TrainConfig& cfg) {
  std::map<int, double> by_epoch;
  for (const auto& r : history)
    if (r.semi) by_epoch[r.epoch] = r.pseudo_label_iou;
  std::vector<TrajectoryPoint> out;
  for (int e = cfg.warmup_epochs; e < cfg.epochs; ++e) {
    auto it = by_epoch.find(e);
    if (it == by_epoch.end()) throw usage_error("trajectory: epoch " + std::to_string(e) + " missing from history");
    out.push_back({e, it->second});
  }
  return out;
}

/// Reads pseudo_labels/epoch_XXX.csv files written by a training run and
/// averages their diag_iou column, for epochs [first, last].
inline std::vector<TrajectoryPoint> trajectory_from_run_dir(const std::filesystem::path& run_dir, int first, int last) {
  if (first > last) throw usage_error("trajectory: empty epoch range");
  std::vector<TrajectoryPoint> out;
  for (int e = first; e <= last; ++e) {
    char name[64];
    std::snprintf(name, sizeof name, "epoch_%03d.csv", e);
    const auto path = run_dir / "pseudo_labels" / name;
    std::ifstream is(path);
    if (!is) throw usage_error("trajectory: missing pseudo-label file " + path.string());
    std::string line;
    std::getline(is, line);
    // diag_iou is the 8th column.
    double sum = 0.0;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::size_t pos = 0;
      for (int c = 0; c < 7; ++c) {
        pos = line.find(',', pos);
        if (pos == std::string::npos) throw checkpoint_error("malformed pseudo-label row in " + path.string());
        ++pos;
      }
      sum += std::stod(line.substr(pos));
      ++n;
    }
    if (n == 0) throw checkpoint_error("empty pseudo-label file " + path.string());
    out.push_back({e, sum / static_cast<double>(n)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string id;       ///< "i" .. "vi"
  std::string setting;  ///< "supervised" or "omni"
  bool mean_teacher = false;
  bool mpv = false;
  bool policy_selecting = false;
  InferenceMode mode = InferenceMode::composer_only;
  MetricsReport val;
  MetricsReport test;
  MetricsReport test_multi;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  /// Semi-supervised pseudo-label trajectories for rows iv, v and vi.
  std::map<std::string, std::vector<TrajectoryPoint>> trajectories;
  /// Composer-only inference of the full-method teacher (self-distillation check).
  MetricsReport full_composer_test;
  CorrelationStudy correlation; ///< full-method teacher on the validation split
  double seconds = 0.0;

  const AblationRow& row(const std::string& id) const {
    for (const auto& r : rows)
      if (r.id == id) return r;
    throw usage_error("ablation: no row " + id);
  }
};

struct AblationOptions {
  std::optional<std::filesystem::path> out_dir{}; ///< per-run artifacts under <out>/runs/<row>
  std::function<void(const std::string&)> log{};
};

/// Trains the supervised baseline and three omni-supervised variants sharing
/// one warm-up, then evaluates the six table rows. `base` describes the full
/// method; its source/use_mpv fields are overridden per row.
template <class T>
AblationResult run_ablation(const TrainConfig& base, const ModelConfig& mcfg, const Dataset& data, const AblationOptions& opts = {}) {
  base.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto log = [&](const std::string& m) {
    if (opts.log) opts.log(m);
  };
  auto run_dir = [&](const std::string& id) -> std::optional<std::filesystem::path> {
    if (!opts.out_dir) return std::nullopt;
    return *opts.out_dir / "runs" / id;
  };

  TrainConfig full = base;
  full.use_mpv = true;
  full.source = PseudoLabelSource::select;

  // The warm-up is identical for every row, so it is trained once.
  RunOptions warm_opts;
  warm_opts.stop_epoch = full.warmup_epochs;
  warm_opts.evaluate_each_epoch = false;
  log("warm-up");
  auto warm = run_training<T>(full, mcfg, data, warm_opts);

  auto continue_from_warmup = [&](const TrainConfig& cfg, const std::string& id) {
    RunOptions ro;
    ro.out_dir = run_dir(id);
    ro.start_epoch = full.warmup_epochs;
    ro.evaluate_each_epoch = false;
    log("training " + id);
    return run_training<T>(cfg, mcfg, data, ro, warm.state.deep_copy());
  };

  AblationResult out;
  auto add_row = [&](const ModelPair<T>& model, AblationRow row) {
    row.val = evaluate_split(model, data, Split::val, row.mode, base.policy, base.seed);
    row.test = evaluate_split(model, data, Split::test, row.mode, base.policy, base.seed);
    row.test_multi = evaluate_split(model, data, Split::test, row.mode, base.policy, base.seed, true);
    out.rows.push_back(std::move(row));
  };

  TrainConfig sup = full;
  sup.warmup_epochs = sup.epochs;
  auto sup_run = continue_from_warmup(sup, "supervised");
  const auto& sm = sup_run.state.inference_model();
  add_row(sm, {"i", "supervised", false, false, false, InferenceMode::composer_only, {}, {}, {}});
  add_row(sm, {"ii", "supervised", false, true, false, InferenceMode::mpv_average, {}, {}, {}});
  add_row(sm, {"iii", "supervised", false, true, true, InferenceMode::mpv_select, {}, {}, {}});

  if (full.semi_epochs() > 0) {
    TrainConfig mt = full;
    mt.use_mpv = false;
    mt.source = PseudoLabelSource::composer;
    auto mt_run = continue_from_warmup(mt, "mean_teacher");
    add_row(mt_run.state.inference_model(), {"iv", "omni", true, false, false, InferenceMode::composer_only, {}, {}, {}});
    out.trajectories["iv"] = trajectory_from_history(mt_run.history, mt);

    TrainConfig avg = full;
    avg.source = PseudoLabelSource::average;
    auto avg_run = continue_from_warmup(avg, "mean_teacher_mpv_avg");
    add_row(avg_run.state.inference_model(), {"v", "omni", true, true, false, InferenceMode::mpv_average, {}, {}, {}});
    out.trajectories["v"] = trajectory_from_history(avg_run.history, avg);

    auto full_run = continue_from_warmup(full, "full");
    const auto& fm = full_run.state.inference_model();
    add_row(fm, {"vi", "omni", true, true, true, InferenceMode::mpv_select, {}, {}, {}});
    out.trajectories["vi"] = trajectory_from_history(full_run.history, full);
    out.full_composer_test = evaluate_split(fm, data, Split::test, InferenceMode::composer_only, base.policy, base.seed);
    out.correlation = correlation_study(fm, data.val, base.policy, base.seed);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Relative change of `x` against `ref`, in percent.
inline double relative_delta(double x, double ref) { return ref == 0.0 ? 0.0 : 100.0 * (x - ref) / ref; }

inline constexpr const char* kAblationHeader =
    "row,setting,mean_teacher,mpv,policy_selecting,inference,val_iou,val_bde,test_iou,test_bde,test_multi_iou,"
    "test_multi_bde,test_iou_delta_pct,test_bde_delta_pct";

inline void write_ablation_csv(const std::filesystem::path& path, const AblationResult& r) {
  std::ofstream os(path);
  if (!os) throw checkpoint_error("cannot write " + path.string());
  os << kAblationHeader << '\n';
  const auto& ref = r.row("i");
  char buf[512];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%d,%d,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", row.id.c_str(),
                  row.setting.c_str(), row.mean_teacher, row.mpv, row.policy_selecting, mode_name(row.mode),
                  row.val.mean_iou, row.val.mean_bde, row.test.mean_iou, row.test.mean_bde, row.test_multi.mean_iou,
                  row.test_multi.mean_bde, relative_delta(row.test.mean_iou, ref.test.mean_iou),
                  relative_delta(row.test.mean_bde, ref.test.mean_bde));
    os << buf;
  }
}

/// CSV: epoch,<row>... with one column per trajectory.
inline void write_trajectories_csv(const std::filesystem::path& path, const std::map<std::string, std::vector<TrajectoryPoint>>& t) {
  std::ofstream os(path);
  if (!os) throw checkpoint_error("cannot write " + path.string());
  os << "epoch";
  for (const auto& [id, _] : t) os << ",row_" << id;
  os << '\n';
  if (t.empty()) return;
  const std::size_t n = t.begin()->second.size();
  for (const auto& [id, s] : t)
    if (s.size() != n) throw usage_error("trajectories of unequal length");
  char buf[32];
  for (std::size_t k = 0; k < n; ++k) {
    os << t.begin()->second[k].epoch;
    for (const auto& [id, s] : t) {
      std::snprintf(buf, sizeof buf, ",%.6f", s[k].diagnostic_iou);
      os << buf;
    }
    os << '\n';
  }
}

} // namespace mpvcrop
