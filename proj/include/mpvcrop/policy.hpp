#pragma once

// Pseudo-label generation. The teacher composer proposes a box p; every MPV
// head rectifies p and m jittered copies of it; the head whose rectifications
// scatter least (relative to the size of its rectification of p) is trusted,
// and its rectification of the unjittered p becomes the pseudo label.

#include "mpvcrop/data.hpp"
#include "mpvcrop/geometry.hpp"
#include "mpvcrop/models.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace mpvcrop {

template <class T>
struct ModelPair {
  ComposerParams<T> composer;
  MpvParams<T> mpv;
};

/// Box regression variance of a rectified set R (R[0] is the rectification of
/// the unjittered reference): mean over the four coordinates of the population
/// standard deviation, divided by the mean side of R[0].
inline double head_variance(std::span<const Box> rectified) {
  if (rectified.size() < 2) throw usage_error("head_variance: need at least two boxes (r0 and one jittered result)");
  const double n = static_cast<double>(rectified.size());
  const auto c0 = rectified.front().coords();
  double total = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    // Deviations are taken relative to r0, so an identical set gives exactly 0.
    double mean = 0.0;
    for (const auto& b : rectified) mean += b.coords()[k] - c0[k];
    mean /= n;
    double var = 0.0;
    for (const auto& b : rectified) {
      const double d = (b.coords()[k] - c0[k]) - mean;
      var += d * d;
    }
    total += std::sqrt(var / n);
  }
  const Box& r0 = rectified.front();
  return 0.25 * total / (0.5 * (r0.height() + r0.width()));
}

/// Index of the smallest value; ties resolve to the lowest index.
inline std::size_t argmin_index(std::span<const double> values) {
  if (values.empty()) throw usage_error("argmin_index: empty input");
  std::size_t best = 0;
  for (std::size_t j = 1; j < values.size(); ++j)
    if (values[j] < values[best]) best = j;
  return best;
}

struct PolicyStats {
  std::vector<std::vector<Box>> rectified; ///< [head][z], z = 0 is the unjittered reference
  std::vector<double> variance;            ///< per head
  std::size_t selected = 0;
  Box trusted;
};

struct PolicyConfig {
  std::size_t jitters = 8;  ///< m
  double rho_eval = 0.05;   ///< jitter magnitude when scoring heads
};

/// Rectifications of refs[n] by `head`, one per image, repaired.
template <class T>
std::vector<Box> rectify_all(const MpvParams<T>& mpv, const Tensor<T>& features, std::span<const Box> refs, std::size_t head) {
  auto off = mpv_head_offsets(mpv, features, refs, head);
  std::vector<Box> out;
  out.reserve(refs.size());
  auto v = off.value();
  for (std::size_t n = 0; n < refs.size(); ++n)
    out.push_back(apply_offsets(refs[n], {static_cast<double>(v[4 * n]), static_cast<double>(v[4 * n + 1]),
                                          static_cast<double>(v[4 * n + 2]), static_cast<double>(v[4 * n + 3])}));
  return out;
}

/// Policy selection for a batch of images sharing one encoder pass.
/// seeds[n] drives the m jitters of image n; the same jittered references are
/// fed to every head.
template <class T>
std::vector<PolicyStats> select_policy_batch(const MpvParams<T>& mpv, const Tensor<T>& images, std::span<const Box> proposals,
                                             const PolicyConfig& cfg, std::span<const std::uint64_t> seeds) {
  if (cfg.jitters < 1) throw usage_error("select_policy: m must be at least 1");
  const std::size_t N = proposals.size();
  if (images.dim(0) != N || seeds.size() != N) throw usage_error("select_policy: batch size mismatch");
  const std::size_t Z = cfg.jitters + 1;
  std::vector<std::vector<Box>> refs(Z, std::vector<Box>(N));
  for (std::size_t n = 0; n < N; ++n) {
    Rng rng(seeds[n]);
    refs[0][n] = proposals[n];
    for (std::size_t z = 1; z < Z; ++z) refs[z][n] = jitter(proposals[n], {cfg.rho_eval}, rng);
  }
  const auto features = mpv_encode(mpv, images);
  const std::size_t H = mpv.num_heads();
  std::vector<PolicyStats> stats(N);
  for (auto& s : stats) s.rectified.assign(H, std::vector<Box>(Z));
  for (std::size_t j = 0; j < H; ++j)
    for (std::size_t z = 0; z < Z; ++z) {
      auto r = rectify_all(mpv, features, refs[z], j);
      for (std::size_t n = 0; n < N; ++n) stats[n].rectified[j][z] = r[n];
    }
  for (auto& s : stats) {
    for (std::size_t j = 0; j < H; ++j) s.variance.push_back(head_variance(s.rectified[j]));
    s.selected = argmin_index(s.variance);
    s.trusted = s.rectified[s.selected][0];
  }
  return stats;
}

template <class T>
PolicyStats select_policy(const MpvParams<T>& mpv, const Image& image, const Box& proposal, const PolicyConfig& cfg,
                          std::uint64_t seed) {
  return select_policy_batch(mpv, image_batch<T>(image), std::span<const Box>(&proposal, 1), cfg,
                             std::span<const std::uint64_t>(&seed, 1))
      .front();
}

/// Coordinate-wise mean over heads of each head's rectification of p, repaired.
template <class T>
std::vector<Box> fuse_average_batch(const MpvParams<T>& mpv, const Tensor<T>& images, std::span<const Box> proposals) {
  const auto features = mpv_encode(mpv, images);
  const std::size_t N = proposals.size();
  std::vector<std::array<double, 4>> acc(N, {0, 0, 0, 0});
  for (std::size_t j = 0; j < mpv.num_heads(); ++j) {
    auto r = rectify_all(mpv, features, proposals, j);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < 4; ++k) acc[n][k] += r[n].coords()[k];
  }
  std::vector<Box> out;
  const double inv = 1.0 / static_cast<double>(mpv.num_heads());
  for (auto& a : acc) out.push_back(repair(Box{a[0] * inv, a[1] * inv, a[2] * inv, a[3] * inv}));
  return out;
}

template <class T>
Box fuse_average(const MpvParams<T>& mpv, const Image& image, const Box& proposal) {
  return fuse_average_batch(mpv, image_batch<T>(image), std::span<const Box>(&proposal, 1)).front();
}

enum class InferenceMode { composer_only, mpv_select, mpv_average };

inline const char* mode_name(InferenceMode m) {
  switch (m) {
    case InferenceMode::composer_only: return "composer";
    case InferenceMode::mpv_select: return "composer+mpv+ps";
    case InferenceMode::mpv_average: return "composer+mpv-avg";
  }
  return "?";
}

inline InferenceMode parse_mode(const std::string& s) {
  if (s == "composer" || s == "composer-only") return InferenceMode::composer_only;
  if (s == "composer+mpv+ps" || s == "select") return InferenceMode::mpv_select;
  if (s == "composer+mpv-avg" || s == "average") return InferenceMode::mpv_average;
  throw usage_error("unknown inference mode '" + s + "' (expected composer|composer+mpv+ps|composer+mpv-avg)");
}

/// Boxes for a batch of images under the given inference mode.
template <class T>
std::vector<Box> infer_batch(const ModelPair<T>& model, const Tensor<T>& images, InferenceMode mode, const PolicyConfig& cfg,
                             std::span<const std::uint64_t> seeds) {
  auto proposals = composer_forward(model.composer, images);
  switch (mode) {
    case InferenceMode::composer_only: return proposals;
    case InferenceMode::mpv_average: return fuse_average_batch(model.mpv, images, proposals);
    case InferenceMode::mpv_select: {
      std::vector<Box> out;
      for (const auto& s : select_policy_batch(model.mpv, images, proposals, cfg, seeds)) out.push_back(s.trusted);
      return out;
    }
  }
  throw usage_error("infer: unknown mode");
}

template <class T>
Box infer(const ModelPair<T>& model, const Image& image, InferenceMode mode, const PolicyConfig& cfg, std::uint64_t seed) {
  return infer_batch(model, image_batch<T>(image), mode, cfg, std::span<const std::uint64_t>(&seed, 1)).front();
}

// ---------------------------------------------------------------------------
// pseudo-label cache

/// How pseudo labels are derived from the teacher.
enum class PseudoLabelSource {
  composer, ///< vanilla mean teacher: the composer box as is
  average,  ///< mean of all heads' rectifications
  select,   ///< policy selection
};

inline const char* source_name(PseudoLabelSource s) {
  switch (s) {
    case PseudoLabelSource::composer: return "composer";
    case PseudoLabelSource::average: return "average";
    case PseudoLabelSource::select: return "select";
  }
  return "?";
}

inline PseudoLabelSource parse_source(const std::string& s) {
  if (s == "composer") return PseudoLabelSource::composer;
  if (s == "average") return PseudoLabelSource::average;
  if (s == "select") return PseudoLabelSource::select;
  throw usage_error("unknown pseudo-label source '" + s + "' (expected composer|average|select)");
}

inline constexpr std::size_t kNoHead = std::numeric_limits<std::size_t>::max();

struct PseudoLabel {
  Box trusted;                ///< in the teacher's weak-view frame
  bool weak_flipped = false;  ///< whether that weak view was mirrored
  Box proposal;               ///< teacher composer box, same frame
  std::size_t head = kNoHead;
  double variance = 0.0;
  double diagnostic_iou = 0.0; ///< against the withheld ground truth

  /// The pseudo label in the original (unflipped) image frame.
  Box in_original_frame() const { return flip_if(trusted, weak_flipped); }
};

struct PseudoLabelCache {
  int epoch = -1;
  std::vector<PseudoLabel> entries;

  bool empty() const { return entries.empty(); }
  double mean_diagnostic_iou() const {
    double s = 0;
    for (const auto& e : entries) s += e.diagnostic_iou;
    return entries.empty() ? 0.0 : s / static_cast<double>(entries.size());
  }
};

/// Refreshes every pseudo label with a frozen teacher. The cache is built in
/// full and returned; callers swap it in atomically.
template <class T>
PseudoLabelCache generate_pseudo_labels(const ModelPair<T>& teacher, const std::vector<Scene>& pool, PseudoLabelSource source,
                                        const PolicyConfig& cfg, int epoch, std::uint64_t master_seed,
                                        std::size_t chunk = 64) {
  if (pool.empty()) throw usage_error("generate_pseudo_labels: unlabeled pool is empty");
  PseudoLabelCache cache;
  cache.epoch = epoch;
  cache.entries.resize(pool.size());
  const auto e = static_cast<std::uint64_t>(epoch);
  for (std::size_t begin = 0; begin < pool.size(); begin += chunk) {
    const std::size_t end = std::min(pool.size(), begin + chunk);
    std::vector<Augmented> views;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = begin; i < end; ++i) {
      views.push_back(weak_augment(pool[i].image, pool[i].gt_crop, derive_seed(master_seed, Stream::policy, {e, i, 0})));
      seeds.push_back(derive_seed(master_seed, Stream::policy, {e, i, 1}));
    }
    std::vector<const Image*> ptrs;
    for (const auto& v : views) ptrs.push_back(&v.image);
    const auto images = image_batch<T>(ptrs);
    const auto proposals = composer_forward(teacher.composer, images);
    std::vector<Box> labels;
    std::vector<std::size_t> heads(proposals.size(), kNoHead);
    std::vector<double> variances(proposals.size(), 0.0);
    switch (source) {
      case PseudoLabelSource::composer: labels = proposals; break;
      case PseudoLabelSource::average: labels = fuse_average_batch(teacher.mpv, images, proposals); break;
      case PseudoLabelSource::select: {
        auto stats = select_policy_batch(teacher.mpv, images, proposals, cfg, seeds);
        for (std::size_t n = 0; n < stats.size(); ++n) {
          labels.push_back(stats[n].trusted);
          heads[n] = stats[n].selected;
          variances[n] = stats[n].variance[stats[n].selected];
        }
        break;
      }
    }
    for (std::size_t n = 0; n < labels.size(); ++n) {
      auto& entry = cache.entries[begin + n];
      entry.trusted = labels[n];
      entry.weak_flipped = views[n].flipped;
      entry.proposal = proposals[n];
      entry.head = heads[n];
      entry.variance = variances[n];
      // views[n].box is the withheld ground truth mapped into the weak frame
      entry.diagnostic_iou = iou(labels[n], views[n].box);
    }
  }
  return cache;
}

/// CSV: image_id,x1,y1,x2,y2,head,variance,diag_iou,weak_flipped
/// Box coordinates are in the original image frame. head is -1 when no head
/// was selected.
inline void write_cache_csv(const std::filesystem::path& path, const PseudoLabelCache& cache) {
  std::ofstream os(path);
  if (!os) throw checkpoint_error("cannot write " + path.string());
  os << "image_id,x1,y1,x2,y2,head,variance,diag_iou,weak_flipped\n";
  char buf[160];
  for (std::size_t i = 0; i < cache.entries.size(); ++i) {
    const auto& e = cache.entries[i];
    std::snprintf(buf, sizeof buf, ",%lld,%.6f,%.6f,%d\n", e.head == kNoHead ? -1LL : static_cast<long long>(e.head),
                  e.variance, e.diagnostic_iou, e.weak_flipped ? 1 : 0);
    os << i << ',' << to_csv_fields(e.in_original_frame()) << buf;
  }
}

} // namespace mpvcrop
