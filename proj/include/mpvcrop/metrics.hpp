#pragma once

#include "mpvcrop/checkpoint.hpp"
#include "mpvcrop/data.hpp"
#include "mpvcrop/policy.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace mpvcrop {

struct SampleRecord {
  std::size_t image_id = 0;
  Box pred;
  double iou = 0.0;
  double bde = 0.0;
};

struct MetricsReport {
  std::string mode;
  std::string split;
  bool multi_annotation = false;
  double mean_iou = 0.0;
  double mean_bde = 0.0;
  std::vector<SampleRecord> samples;

  void recompute_means() {
    mean_iou = mean_bde = 0.0;
    for (const auto& s : samples) {
      mean_iou += s.iou;
      mean_bde += s.bde;
    }
    if (!samples.empty()) {
      mean_iou /= static_cast<double>(samples.size());
      mean_bde /= static_cast<double>(samples.size());
    }
  }
};

/// Scores any box predictor against a list of scenes. When `annotations` is
/// given (one list per scene), max IoU / min BDE over the list are used.
template <class Predict>
MetricsReport score_predictions(const std::vector<Scene>& scenes, Predict&& predict_chunk,
                                const std::vector<std::vector<Box>>* annotations = nullptr, std::size_t chunk = 64) {
  MetricsReport r;
  r.multi_annotation = annotations != nullptr;
  for (std::size_t begin = 0; begin < scenes.size(); begin += chunk) {
    const std::size_t end = std::min(scenes.size(), begin + chunk);
    const std::vector<Box> preds = predict_chunk(begin, end);
    for (std::size_t i = begin; i < end; ++i) {
      SampleRecord s{i, preds[i - begin], 0.0, 0.0};
      if (annotations) {
        const auto best = best_over_annotations(s.pred, (*annotations)[i]);
        s.iou = best.iou;
        s.bde = best.bde;
      } else {
        s.iou = iou(s.pred, scenes[i].gt_crop);
        s.bde = bde(s.pred, scenes[i].gt_crop);
      }
      r.samples.push_back(s);
    }
  }
  r.recompute_means();
  return r;
}

/// Runs inference in `mode` over the scenes and aggregates IoU / BDE.
/// `stream_tag` separates the jitter streams of different splits.
template <class T>
MetricsReport evaluate(const ModelPair<T>& model, const std::vector<Scene>& scenes, InferenceMode mode, const PolicyConfig& policy,
                       std::uint64_t master_seed, std::uint64_t stream_tag,
                       const std::vector<std::vector<Box>>* annotations = nullptr) {
  auto predict = [&](std::size_t begin, std::size_t end) {
    std::vector<const Image*> ptrs;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = begin; i < end; ++i) {
      ptrs.push_back(&scenes[i].image);
      seeds.push_back(derive_seed(master_seed, Stream::eval_policy, {stream_tag, i}));
    }
    return infer_batch(model, image_batch<T>(ptrs), mode, policy, seeds);
  };
  auto r = score_predictions(scenes, predict, annotations);
  r.mode = mode_name(mode);
  return r;
}

template <class T>
MetricsReport evaluate_split(const ModelPair<T>& model, const Dataset& d, Split split, InferenceMode mode,
                             const PolicyConfig& policy, std::uint64_t master_seed, bool multi_annotation = false) {
  const auto* ann = (multi_annotation && split == Split::test) ? &d.test_annotations : nullptr;
  auto r = evaluate(model, d.split(split), mode, policy, master_seed, static_cast<std::uint64_t>(split), ann);
  r.split = split_name(split);
  return r;
}

/// CSV: image_id,x1,y1,x2,y2,iou,bde
inline void write_samples_csv(const std::filesystem::path& path, const MetricsReport& r) {
  std::ofstream os(path);
  if (!os) throw checkpoint_error("cannot write " + path.string());
  os << "image_id,x1,y1,x2,y2,iou,bde\n";
  char buf[64];
  for (const auto& s : r.samples) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f\n", s.iou, s.bde);
    os << s.image_id << ',' << to_csv_fields(s.pred) << buf;
  }
}

} // namespace mpvcrop
