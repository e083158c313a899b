#pragma once

#include "mpvcrop/error.hpp"
#include "mpvcrop/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <utility>

namespace mpvcrop {

/// Smallest admissible box width/height in normalized units.
inline constexpr double kMinBoxSide = 1e-3;

/// Axis-aligned reframing box in normalized image coordinates.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 1.0, y2 = 1.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  std::array<double, 4> coords() const { return {x1, y1, x2, y2}; }
  static Box from_coords(std::span<const double, 4> c) { return {c[0], c[1], c[2], c[3]}; }

  bool operator==(const Box&) const = default;
};

inline bool is_valid(const Box& b) {
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  return in01(b.x1) && in01(b.y1) && in01(b.x2) && in01(b.y2) && b.x1 < b.x2 && b.y1 < b.y2 &&
         b.width() >= kMinBoxSide * (1.0 - 1e-9) && b.height() >= kMinBoxSide * (1.0 - 1e-9);
}

namespace detail {

// Repairs one axis given two unordered edges.
inline std::pair<double, double> repair_axis(double a, double b) {
  double lo = std::clamp(std::min(a, b), 0.0, 1.0);
  double hi = std::clamp(std::max(a, b), 0.0, 1.0);
  if (hi - lo < kMinBoxSide) {
    const double c = std::clamp(0.5 * (lo + hi), 0.5 * kMinBoxSide, 1.0 - 0.5 * kMinBoxSide);
    lo = c - 0.5 * kMinBoxSide;
    hi = c + 0.5 * kMinBoxSide;
  }
  return {lo, hi};
}

// Places an interval of the given center and size inside [0,1], shifting
// inward first and clamping only if it cannot fit.
inline std::pair<double, double> fit_axis(double center, double size) {
  size = std::max(size, kMinBoxSide);
  if (size >= 1.0) return {0.0, 1.0};
  double lo = center - 0.5 * size;
  double hi = center + 0.5 * size;
  if (lo < 0.0) {
    hi -= lo;
    lo = 0.0;
  }
  if (hi > 1.0) {
    lo -= hi - 1.0;
    hi = 1.0;
  }
  return {std::max(lo, 0.0), hi};
}

} // namespace detail

/// Orders edges, enforces the minimum side and clamps to the unit square.
inline Box repair(const Box& b) {
  auto [x1, x2] = detail::repair_axis(b.x1, b.x2);
  auto [y1, y2] = detail::repair_axis(b.y1, b.y2);
  return {x1, y1, x2, y2};
}

inline Box intersection(const Box& a, const Box& b) {
  return {std::max(a.x1, b.x1), std::max(a.y1, b.y1), std::min(a.x2, b.x2), std::min(a.y2, b.y2)};
}

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Boundary displacement error: mean absolute displacement of the four edges.
inline double bde(const Box& pred, const Box& gt) {
  return (std::abs(pred.x1 - gt.x1) + std::abs(pred.y1 - gt.y1) + std::abs(pred.x2 - gt.x2) +
          std::abs(pred.y2 - gt.y2)) /
         4.0;
}

struct BestMatch {
  double iou;
  double bde;
};

/// Max IoU and min BDE over several annotations, taken independently.
inline BestMatch best_over_annotations(const Box& pred, std::span<const Box> gts) {
  if (gts.empty()) throw usage_error("best_over_annotations: no annotations given");
  BestMatch best{0.0, std::numeric_limits<double>::infinity()};
  for (const auto& g : gts) {
    best.iou = std::max(best.iou, iou(pred, g));
    best.bde = std::min(best.bde, bde(pred, g));
  }
  return best;
}

struct JitterSpec {
  double rho = 0.0; ///< max edge displacement as a fraction of the box side
};

/// Displaces every edge by u * rho * side, u ~ U(-1, 1) per edge, then repairs.
inline Box jitter(const Box& box, const JitterSpec& spec, Rng& rng) {
  if (spec.rho < 0.0) throw usage_error("jitter: rho must be non-negative");
  if (spec.rho == 0.0) return box;
  const double w = box.width(), h = box.height();
  Box out{box.x1 + rng.uniform(-1.0, 1.0) * spec.rho * w, box.y1 + rng.uniform(-1.0, 1.0) * spec.rho * h,
          box.x2 + rng.uniform(-1.0, 1.0) * spec.rho * w, box.y2 + rng.uniform(-1.0, 1.0) * spec.rho * h};
  return repair(out);
}

inline Box flip_box(const Box& b) { return {1.0 - b.x2, b.y1, 1.0 - b.x1, b.y2}; }

inline Box flip_if(const Box& b, bool flip) { return flip ? flip_box(b) : b; }

/// Maps a (cx, cy, w, h) model output to a valid box: floor the size,
/// convert to corners, shift inward, clamp axes larger than the frame.
inline Box decode_and_repair(std::span<const double, 4> raw) {
  auto [x1, x2] = detail::fit_axis(raw[0], raw[2]);
  auto [y1, y2] = detail::fit_axis(raw[1], raw[3]);
  return {x1, y1, x2, y2};
}

inline Box decode_and_repair(double cx, double cy, double w, double h) {
  const std::array<double, 4> raw{cx, cy, w, h};
  return decode_and_repair(std::span<const double, 4>(raw));
}

/// "x1,y1,x2,y2" with six decimals, the serialized form used in CSV records.
inline std::string to_csv_fields(const Box& b) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f", b.x1, b.y1, b.x2, b.y2);
  return buf;
}

} // namespace mpvcrop
