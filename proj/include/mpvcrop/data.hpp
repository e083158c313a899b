#pragma once

// Synthetic reframing scenes with exact ground truth: a bright soft-edged
// rectangle (the subject) on a smooth noisy background, sometimes with a
// dimmer blob as a distractor. The target crop is the subject box grown by a
// margin factor about its center and pushed back inside the frame.

#include "mpvcrop/autodiff.hpp"
#include "mpvcrop/checkpoint.hpp"
#include "mpvcrop/error.hpp"
#include "mpvcrop/geometry.hpp"
#include "mpvcrop/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace mpvcrop {

/// Square single-channel image, row-major, values in [0, 1].
struct Image {
  std::size_t side = 0;
  std::vector<double> pixels;

  double at(std::size_t row, std::size_t col) const { return pixels[row * side + col]; }
  double& at(std::size_t row, std::size_t col) { return pixels[row * side + col]; }
  bool operator==(const Image&) const = default;
};

struct DataConfig {
  std::size_t image_size = 32;
  double subject_min = 0.12; ///< subject side range, fraction of the frame per axis
  double subject_max = 0.30;
  double margin = 2.0;       ///< gt crop = subject scaled by this factor about its center
  double distractor_prob = 0.5;
  double noise = 0.05;       ///< uniform noise amplitude
  std::size_t n_labeled = 200;
  std::size_t n_unlabeled = 2000;
  std::size_t n_val = 200;
  std::size_t n_test = 400;
  std::size_t test_annotations = 3; ///< jittered ground truths per test image
  double annotation_rho = 0.05;

  void validate() const {
    auto fail = [](const std::string& m) { throw usage_error("data config: " + m); };
    if (image_size < 8) fail("image_size must be at least 8");
    if (!(subject_min > 0.0 && subject_min <= subject_max && subject_max <= 1.0))
      fail("subject size range must satisfy 0 < min <= max <= 1");
    if (!(margin >= 1.0)) fail("margin must be >= 1");
    if (!(distractor_prob >= 0.0 && distractor_prob <= 1.0)) fail("distractor_prob must lie in [0,1]");
    if (!(noise >= 0.0 && noise <= 1.0)) fail("noise must lie in [0,1]");
    if (annotation_rho < 0.0) fail("annotation_rho must be non-negative");
  }
};

struct SceneMeta {
  std::uint64_t seed = 0;
  double subject_cx = 0, subject_cy = 0, subject_w = 0, subject_h = 0, intensity = 0;
  double background = 0, gradient_x = 0, gradient_y = 0;
  bool has_distractor = false;
  double distractor_cx = 0, distractor_cy = 0, distractor_sigma = 0, distractor_amplitude = 0;
};

struct Scene {
  Image image;
  Box subject_box;
  Box gt_crop;
  SceneMeta meta;
};

/// Subject box scaled by `margin` about its center, shifted inside the frame,
/// clamped per axis if it cannot fit.
inline Box crop_for_subject(const Box& subject, double margin) {
  const double cx = 0.5 * (subject.x1 + subject.x2), cy = 0.5 * (subject.y1 + subject.y2);
  auto [x1, x2] = detail::fit_axis(cx, margin * subject.width());
  auto [y1, y2] = detail::fit_axis(cy, margin * subject.height());
  return {x1, y1, x2, y2};
}

inline Scene generate_scene(std::uint64_t seed, const DataConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  Scene s;
  SceneMeta& m = s.meta;
  m.seed = seed;
  m.subject_w = rng.uniform(cfg.subject_min, cfg.subject_max);
  m.subject_h = rng.uniform(cfg.subject_min, cfg.subject_max);
  m.subject_cx = rng.uniform(0.5 * m.subject_w, 1.0 - 0.5 * m.subject_w);
  m.subject_cy = rng.uniform(0.5 * m.subject_h, 1.0 - 0.5 * m.subject_h);
  m.intensity = rng.uniform(0.45, 0.7);
  m.background = rng.uniform(0.1, 0.3);
  m.gradient_x = rng.uniform(-0.15, 0.15);
  m.gradient_y = rng.uniform(-0.15, 0.15);
  m.has_distractor = rng.bernoulli(cfg.distractor_prob);
  if (m.has_distractor) {
    m.distractor_cx = rng.uniform(0.0, 1.0);
    m.distractor_cy = rng.uniform(0.0, 1.0);
    m.distractor_sigma = rng.uniform(1.0, 2.5);
    m.distractor_amplitude = rng.uniform(0.3, 0.6) * m.intensity;
  }
  s.subject_box = {m.subject_cx - 0.5 * m.subject_w, m.subject_cy - 0.5 * m.subject_h,
                   m.subject_cx + 0.5 * m.subject_w, m.subject_cy + 0.5 * m.subject_h};
  s.gt_crop = crop_for_subject(s.subject_box, cfg.margin);

  const std::size_t S = cfg.image_size;
  const double Sd = static_cast<double>(S);
  s.image.side = S;
  s.image.pixels.resize(S * S);
  constexpr double edge_sigma = 0.7; // pixels
  const double k = 1.0 / (edge_sigma * std::numbers::sqrt2);
  auto soft_interval = [&](double p, double lo, double hi) { return 0.5 * (std::erf((p - lo) * k) - std::erf((p - hi) * k)); };
  const Box& sb = s.subject_box;
  for (std::size_t r = 0; r < S; ++r) {
    const double py = static_cast<double>(r) + 0.5; // pixel units
    const double ny = py / Sd;
    const double wy = soft_interval(py, sb.y1 * Sd, sb.y2 * Sd);
    for (std::size_t c = 0; c < S; ++c) {
      const double px = static_cast<double>(c) + 0.5;
      const double nx = px / Sd;
      double v = m.background + m.gradient_x * (nx - 0.5) + m.gradient_y * (ny - 0.5);
      v += m.intensity * wy * soft_interval(px, sb.x1 * Sd, sb.x2 * Sd);
      if (m.has_distractor) {
        const double dx = px - m.distractor_cx * Sd, dy = py - m.distractor_cy * Sd;
        v += m.distractor_amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * m.distractor_sigma * m.distractor_sigma));
      }
      v += rng.uniform(-cfg.noise, cfg.noise);
      s.image.at(r, c) = std::clamp(v, 0.0, 1.0);
    }
  }
  return s;
}

enum class Split { labeled, unlabeled, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::labeled: return "labeled";
    case Split::unlabeled: return "unlabeled";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "labeled") return Split::labeled;
  if (s == "unlabeled") return Split::unlabeled;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw usage_error("unknown split '" + s + "' (expected labeled|unlabeled|val|test)");
}

inline Stream split_stream(Split s) {
  switch (s) {
    case Split::labeled: return Stream::data_labeled;
    case Split::unlabeled: return Stream::data_unlabeled;
    case Split::val: return Stream::data_val;
    case Split::test: return Stream::data_test;
  }
  return Stream::data_labeled;
}

/// Labeled, unlabeled, validation and test scenes. Unlabeled scenes keep
/// their ground truth only for pseudo-label diagnostics; training never reads it.
struct Dataset {
  DataConfig config;
  std::uint64_t seed = 0;
  std::vector<Scene> labeled, unlabeled, val, test;
  std::vector<std::vector<Box>> test_annotations; ///< per test image, jittered ground truths

  const std::vector<Scene>& split(Split s) const {
    switch (s) {
      case Split::labeled: return labeled;
      case Split::unlabeled: return unlabeled;
      case Split::val: return val;
      case Split::test: return test;
    }
    return labeled;
  }
  std::vector<Scene>& split(Split s) { return const_cast<std::vector<Scene>&>(std::as_const(*this).split(s)); }
};

inline std::uint64_t scene_seed(std::uint64_t master, Split s, std::size_t index) {
  return derive_seed(master, split_stream(s), {index});
}

inline std::vector<Box> make_annotations(const Box& gt, std::uint64_t master, std::size_t index, const DataConfig& cfg) {
  Rng rng(derive_seed(master, Stream::annotation, {index}));
  std::vector<Box> out;
  for (std::size_t a = 0; a < cfg.test_annotations; ++a) out.push_back(jitter(gt, {cfg.annotation_rho}, rng));
  return out;
}

inline Dataset make_dataset(const DataConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  d.seed = seed;
  auto fill = [&](Split s, std::size_t n) {
    auto& v = d.split(s);
    v.reserve(n);
    for (std::size_t i = 0; i < n; ++i) v.push_back(generate_scene(scene_seed(seed, s, i), cfg));
  };
  fill(Split::labeled, cfg.n_labeled);
  fill(Split::unlabeled, cfg.n_unlabeled);
  fill(Split::val, cfg.n_val);
  fill(Split::test, cfg.n_test);
  for (std::size_t i = 0; i < d.test.size(); ++i) d.test_annotations.push_back(make_annotations(d.test[i].gt_crop, seed, i, cfg));
  return d;
}

// ---------------------------------------------------------------------------
// augmentation

inline Image flip_image(const Image& img) {
  Image out = img;
  for (std::size_t r = 0; r < img.side; ++r)
    std::reverse(out.pixels.begin() + static_cast<std::ptrdiff_t>(r * img.side),
                 out.pixels.begin() + static_cast<std::ptrdiff_t>((r + 1) * img.side));
  return out;
}

struct Augmented {
  Image image;
  Box box;
  bool flipped = false;
};

/// Horizontal flip with probability `flip_prob`, nothing else.
inline Augmented weak_augment(const Image& img, const Box& box, std::uint64_t seed, double flip_prob = 0.5) {
  Rng rng(seed);
  Augmented a{img, box, rng.bernoulli(flip_prob)};
  if (a.flipped) {
    a.image = flip_image(img);
    a.box = flip_box(box);
  }
  return a;
}

struct StrongAugmentConfig {
  double flip = 0.5;
  double invert = 0.3;
  double blur = 0.3;
  double noise = 0.5;
  double noise_max = 0.1;
  double cutout = 0.5;
  double cutout_max_frac = 0.25;

  static StrongAugmentConfig none() { return {0, 0, 0, 0, 0.1, 0, 0.25}; }
};

inline Image box_blur3(const Image& img) {
  const std::size_t S = img.side;
  Image out = img;
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t c = 0; c < S; ++c) {
      double s = 0;
      int n = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const auto rr = static_cast<std::ptrdiff_t>(r) + dr, cc = static_cast<std::ptrdiff_t>(c) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(S) || cc >= static_cast<std::ptrdiff_t>(S)) continue;
          s += img.pixels[static_cast<std::size_t>(rr) * S + static_cast<std::size_t>(cc)];
          ++n;
        }
      out.at(r, c) = s / n;
    }
  return out;
}

/// Flip (remaps the box), then photometric ops that never touch the box:
/// inversion, 3x3 blur, additive noise, cutout filled with the image mean.
inline Augmented strong_augment(const Image& img, const Box& box, std::uint64_t seed,
                                const StrongAugmentConfig& cfg = {}) {
  Rng rng(seed);
  Augmented a{img, box, rng.bernoulli(cfg.flip)};
  if (a.flipped) {
    a.image = flip_image(img);
    a.box = flip_box(box);
  }
  auto& px = a.image.pixels;
  if (rng.bernoulli(cfg.invert))
    for (auto& v : px) v = 1.0 - v;
  if (rng.bernoulli(cfg.blur)) a.image = box_blur3(a.image);
  if (rng.bernoulli(cfg.noise)) {
    const double amp = rng.uniform(0.0, cfg.noise_max);
    for (auto& v : px) v = std::clamp(v + rng.uniform(-amp, amp), 0.0, 1.0);
  }
  if (rng.bernoulli(cfg.cutout)) {
    const std::size_t S = a.image.side;
    const auto max_side = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.cutout_max_frac * static_cast<double>(S)));
    const std::size_t ch = 1 + rng.index(max_side), cw = 1 + rng.index(max_side);
    const std::size_t r0 = rng.index(S - ch + 1), c0 = rng.index(S - cw + 1);
    double mean = 0;
    for (double v : px) mean += v;
    mean /= static_cast<double>(px.size());
    for (std::size_t r = r0; r < r0 + ch; ++r)
      for (std::size_t c = c0; c < c0 + cw; ++c) a.image.at(r, c) = mean;
  }
  return a;
}

// ---------------------------------------------------------------------------
// batching

struct BatchIndices {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
};

/// Uniform with-replacement draws: round(fraction * batch) labeled, the rest unlabeled.
inline BatchIndices sample_batch(std::size_t n_labeled, std::size_t n_unlabeled, std::size_t batch_size,
                                 double labeled_fraction, std::uint64_t seed) {
  if (batch_size < 2) throw usage_error("sample_batch: batch_size must be at least 2");
  if (!(labeled_fraction >= 0.0 && labeled_fraction <= 1.0))
    throw usage_error("sample_batch: labeled_fraction must lie in [0,1]");
  const auto nl = static_cast<std::size_t>(std::llround(labeled_fraction * static_cast<double>(batch_size)));
  const std::size_t nu = batch_size - nl;
  if (nl > 0 && n_labeled == 0) throw usage_error("sample_batch: labeled pool is empty");
  if (nu > 0 && n_unlabeled == 0) throw usage_error("sample_batch: unlabeled pool is empty");
  Rng rng(seed);
  BatchIndices b;
  for (std::size_t i = 0; i < nl; ++i) b.labeled.push_back(rng.index(n_labeled));
  for (std::size_t i = 0; i < nu; ++i) b.unlabeled.push_back(rng.index(n_unlabeled));
  return b;
}

inline BatchIndices sample_batch(const Dataset& d, std::size_t batch_size, double labeled_fraction, std::uint64_t seed) {
  return sample_batch(d.labeled.size(), d.unlabeled.size(), batch_size, labeled_fraction, seed);
}

/// Stacks images into a [N, 1, S, S] tensor.
template <class T>
Tensor<T> image_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw usage_error("image_batch: no images");
  const std::size_t S = images.front()->side;
  auto t = Tensor<T>::zeros({images.size(), 1, S, S});
  auto v = t.value();
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n]->side != S) throw usage_error("image_batch: mixed image sizes");
    std::copy(images[n]->pixels.begin(), images[n]->pixels.end(), v.begin() + static_cast<std::ptrdiff_t>(n * S * S));
  }
  return t;
}

template <class T>
Tensor<T> image_batch(const Image& img) {
  return image_batch<T>(std::vector<const Image*>{&img});
}

// ---------------------------------------------------------------------------
// on-disk format: <dir>/index.json plus one raw float64 little-endian file per
// split holding count * S * S pixels in scene order.

inline constexpr const char* kDatasetFormat = "mpvcrop-dataset";
inline constexpr int kDatasetFormatVersion = 1;

inline nlohmann::json box_json(const Box& b) { return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }
inline Box box_from_json(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

inline nlohmann::json data_config_json(const DataConfig& c) {
  return {{"image_size", c.image_size},         {"subject_min", c.subject_min},
          {"subject_max", c.subject_max},       {"margin", c.margin},
          {"distractor_prob", c.distractor_prob}, {"noise", c.noise},
          {"n_labeled", c.n_labeled},           {"n_unlabeled", c.n_unlabeled},
          {"n_val", c.n_val},                   {"n_test", c.n_test},
          {"test_annotations", c.test_annotations}, {"annotation_rho", c.annotation_rho}};
}

inline DataConfig data_config_from_json(const nlohmann::json& j) {
  DataConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.subject_min = j.value("subject_min", c.subject_min);
  c.subject_max = j.value("subject_max", c.subject_max);
  c.margin = j.value("margin", c.margin);
  c.distractor_prob = j.value("distractor_prob", c.distractor_prob);
  c.noise = j.value("noise", c.noise);
  c.n_labeled = j.value("n_labeled", c.n_labeled);
  c.n_unlabeled = j.value("n_unlabeled", c.n_unlabeled);
  c.n_val = j.value("n_val", c.n_val);
  c.n_test = j.value("n_test", c.n_test);
  c.test_annotations = j.value("test_annotations", c.test_annotations);
  c.annotation_rho = j.value("annotation_rho", c.annotation_rho);
  return c;
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  static_assert(std::endian::native == std::endian::little, "dataset files are little-endian");
  std::filesystem::create_directories(dir);
  nlohmann::json idx;
  idx["format"] = kDatasetFormat;
  idx["version"] = kDatasetFormatVersion;
  idx["seed"] = d.seed;
  idx["config"] = data_config_json(d.config);
  for (Split s : {Split::labeled, Split::unlabeled, Split::val, Split::test}) {
    const auto& scenes = d.split(s);
    const std::string file = std::string(split_name(s)) + ".bin";
    std::ofstream os(dir / file, std::ios::binary);
    if (!os) throw checkpoint_error("cannot write " + (dir / file).string());
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const auto& sc = scenes[i];
      os.write(reinterpret_cast<const char*>(sc.image.pixels.data()),
               static_cast<std::streamsize>(sc.image.pixels.size() * sizeof(double)));
      nlohmann::json it{{"id", i}, {"seed", sc.meta.seed}, {"gt_crop", box_json(sc.gt_crop)},
                        {"subject_box", box_json(sc.subject_box)}, {"has_distractor", sc.meta.has_distractor}};
      if (s == Split::test) {
        nlohmann::json ann = nlohmann::json::array();
        for (const auto& b : d.test_annotations[i]) ann.push_back(box_json(b));
        it["annotations"] = std::move(ann);
      }
      items.push_back(std::move(it));
    }
    idx["splits"][split_name(s)] = {{"file", file},
                                    {"count", scenes.size()},
                                    {"shape", {scenes.size(), 1, d.config.image_size, d.config.image_size}},
                                    {"dtype", "float64-le"},
                                    {"items", std::move(items)}};
  }
  write_json_file(dir / "index.json", idx, 1);
}

/// Reloads a dataset written by write_dataset. Images and boxes come back
/// bit-exact; scene metadata is regenerated from each scene's seed.
inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto idx = read_json_file(dir / "index.json");
  if (idx.value("format", "") != kDatasetFormat) throw checkpoint_error("not a dataset index: " + (dir / "index.json").string());
  if (idx.value("version", 0) != kDatasetFormatVersion) throw checkpoint_error("unsupported dataset version");
  Dataset d;
  d.seed = idx.at("seed").get<std::uint64_t>();
  d.config = data_config_from_json(idx.at("config"));
  const std::size_t S = d.config.image_size;
  for (Split s : {Split::labeled, Split::unlabeled, Split::val, Split::test}) {
    const auto& sj = idx.at("splits").at(split_name(s));
    std::ifstream is(dir / sj.at("file").get<std::string>(), std::ios::binary);
    if (!is) throw checkpoint_error("missing split file for " + std::string(split_name(s)));
    auto& scenes = d.split(s);
    for (const auto& it : sj.at("items")) {
      Scene sc;
      const auto seed = it.at("seed").get<std::uint64_t>();
      sc.meta = generate_scene(seed, d.config).meta;
      sc.image.side = S;
      sc.image.pixels.resize(S * S);
      is.read(reinterpret_cast<char*>(sc.image.pixels.data()), static_cast<std::streamsize>(S * S * sizeof(double)));
      if (!is) throw checkpoint_error("truncated split file for " + std::string(split_name(s)));
      sc.gt_crop = box_from_json(it.at("gt_crop"));
      sc.subject_box = box_from_json(it.at("subject_box"));
      if (s == Split::test) {
        std::vector<Box> ann;
        for (const auto& b : it.at("annotations")) ann.push_back(box_from_json(b));
        d.test_annotations.push_back(std::move(ann));
      }
      scenes.push_back(std::move(sc));
    }
  }
  return d;
}

} // namespace mpvcrop
