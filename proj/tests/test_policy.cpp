#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

using namespace mpvcrop;

namespace {

void zero_heads(MpvParams<double>& mpv) {
  for (auto& h : mpv.heads)
    for (auto t : h.tensors()) std::fill(t.value().begin(), t.value().end(), 0.0);
}

/// Head whose output is the constant offset `off` on every coordinate.
void constant_head(MpvHead<double>& h, double off, double scale) {
  for (auto t : h.tensors()) std::fill(t.value().begin(), t.value().end(), 0.0);
  std::fill(h.fc2_b.value().begin(), h.fc2_b.value().end(), std::atanh(off / scale));
}

ModelPair<double> fresh_model(std::uint64_t seed, std::size_t heads = 5) {
  ModelConfig cfg;
  cfg.heads = heads;
  return init_models<double>(seed, cfg);
}

} // namespace

TEST(HeadVariance, WorkedExample) {
  const std::vector<Box> r{{0, 0, 0.5, 0.5}, {0, 0, 0.5, 0.6}};
  EXPECT_NEAR(head_variance(r), 0.025, 1e-12);
}

TEST(HeadVariance, IdenticalSetIsZero) {
  const std::vector<Box> r(9, Box{0.13, 0.21, 0.77, 0.58});
  EXPECT_EQ(head_variance(r), 0.0);
}

TEST(HeadVariance, SingletonIsUsageError) {
  const std::vector<Box> r{{0, 0, 0.5, 0.5}};
  EXPECT_THROW(head_variance(r), usage_error);
}

TEST(HeadVarianceProperty, JointScalingLeavesValueUnchanged) {
  std::mt19937_64 g(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Box> r, scaled;
    for (int z = 0; z < 9; ++z) r.push_back(oracle::random_box(g, 0.05));
    const double s = 0.1 + 3.0 * std::uniform_real_distribution<double>(0, 1)(g);
    for (const auto& b : r) scaled.push_back({s * b.x1, s * b.y1, s * b.x2, s * b.y2});
    EXPECT_NEAR(head_variance(scaled), head_variance(r), 1e-12 * std::max(1.0, head_variance(r)));
  }
}

TEST(HeadVarianceProperty, ZeroExactlyWhenAllBoxesEqual) {
  std::mt19937_64 g(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Box b = oracle::random_box(g, 0.05);
    std::vector<Box> r(5, b);
    EXPECT_EQ(head_variance(r), 0.0);
    r[1 + trial % 4].x2 = std::nextafter(b.x2, 2.0);
    EXPECT_GT(head_variance(r), 0.0);
  }
}

TEST(Argmin, PicksSmallestWithLowestIndexOnTies) {
  EXPECT_EQ(argmin_index(std::vector<double>{0.3, 0.1, 0.2}), 1u);
  EXPECT_EQ(argmin_index(std::vector<double>{0.2, 0.1, 0.1}), 1u);
  EXPECT_EQ(argmin_index(std::vector<double>{0.0, 0.0, 0.0}), 0u);
  EXPECT_THROW(argmin_index(std::vector<double>{}), usage_error);
}

TEST(ArgminProperty, InvariantUnderPositiveScaling) {
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> v(5);
    for (auto& x : v) x = u(g);
    const double c = std::exp(10 * (u(g) - 0.5));
    std::vector<double> w;
    for (double x : v) w.push_back(c * x);
    EXPECT_EQ(argmin_index(v), argmin_index(w));
  }
}

TEST(SelectPolicy, ZeroHeadsTieAtIndexZero) {
  auto m = fresh_model(4);
  zero_heads(m.mpv);
  const auto s = generate_scene(1, DataConfig{});
  const Box p{0.2, 0.3, 0.7, 0.8};
  const auto st = select_policy(m.mpv, s.image, p, PolicyConfig{}, 5);
  ASSERT_EQ(st.variance.size(), 5u);
  for (std::size_t j = 1; j < 5; ++j) EXPECT_EQ(st.variance[j], st.variance[0]);
  EXPECT_EQ(st.selected, 0u);
  EXPECT_EQ(st.trusted, repair(p));
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(st.rectified[j], st.rectified[0]);
}

TEST(SelectPolicy, ZeroJitterGivesZeroVarianceEverywhere) {
  auto m = fresh_model(5);
  const auto s = generate_scene(2, DataConfig{});
  const auto st = select_policy(m.mpv, s.image, Box{0.1, 0.1, 0.6, 0.5}, PolicyConfig{8, 0.0}, 6);
  for (double v : st.variance) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(st.selected, 0u);
}

TEST(SelectPolicy, StructureAndDeterminism) {
  auto m = fresh_model(6);
  const auto s = generate_scene(3, DataConfig{});
  const Box p{0.2, 0.15, 0.65, 0.7};
  const PolicyConfig cfg{8, 0.05};
  const auto a = select_policy(m.mpv, s.image, p, cfg, 7);
  const auto b = select_policy(m.mpv, s.image, p, cfg, 7);
  EXPECT_EQ(a.variance, b.variance);
  EXPECT_EQ(a.selected, b.selected);
  EXPECT_EQ(a.trusted, b.trusted);
  ASSERT_EQ(a.rectified.size(), 5u);
  for (std::size_t j = 0; j < 5; ++j) {
    ASSERT_EQ(a.rectified[j].size(), 9u);
    EXPECT_GE(a.variance[j], 0.0);
    EXPECT_EQ(a.variance[j], head_variance(a.rectified[j]));
    // r0 is the rectification of the unjittered proposal
    EXPECT_EQ(a.rectified[j][0], rectified_box(m.mpv, image_batch<double>(s.image), p, j));
  }
  EXPECT_EQ(a.selected, argmin_index(a.variance));
  EXPECT_EQ(a.trusted, a.rectified[a.selected][0]);
}

TEST(SelectPolicy, BatchMatchesSingleImageCalls) {
  auto m = fresh_model(7);
  const auto d = make_dataset(oracle::tiny_data(), 8);
  std::vector<const Image*> ptrs;
  std::vector<Box> props;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < 4; ++i) {
    ptrs.push_back(&d.val[i].image);
    props.push_back(d.val[i].gt_crop);
    seeds.push_back(100 + i);
  }
  const auto batch = select_policy_batch(m.mpv, image_batch<double>(ptrs), props, PolicyConfig{}, seeds);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto one = select_policy(m.mpv, d.val[i].image, props[i], PolicyConfig{}, seeds[i]);
    EXPECT_EQ(batch[i].selected, one.selected);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(batch[i].variance[j], one.variance[j], 1e-12);
  }
}

TEST(SelectPolicy, ZeroJittersIsUsageError) {
  auto m = fresh_model(8);
  const auto s = generate_scene(4, DataConfig{});
  EXPECT_THROW(select_policy(m.mpv, s.image, Box{0.1, 0.1, 0.5, 0.5}, PolicyConfig{0, 0.05}, 0), usage_error);
}

TEST(FuseAverage, SingleHeadEqualsThatHead) {
  auto m = fresh_model(9, 1);
  const auto s = generate_scene(5, DataConfig{});
  const Box p{0.2, 0.2, 0.6, 0.7};
  EXPECT_EQ(fuse_average(m.mpv, s.image, p), repair(rectified_box(m.mpv, image_batch<double>(s.image), p, 0)));
}

TEST(FuseAverage, ZeroHeadsReturnRepairedProposal) {
  auto m = fresh_model(10);
  zero_heads(m.mpv);
  const auto s = generate_scene(6, DataConfig{});
  const Box p{0.25, 0.1, 0.75, 0.45};
  EXPECT_EQ(fuse_average(m.mpv, s.image, p), repair(p));
}

TEST(FuseAverage, CoordinateMeanOfHeads) {
  auto m = fresh_model(11, 2);
  const double s = m.mpv.config.offset_scale;
  constant_head(m.mpv.heads[0], -0.1, s); // (0.2,0.2,0.6,0.6)
  constant_head(m.mpv.heads[1], 0.1, s);  // (0.4,0.4,0.8,0.8)
  const auto sc = generate_scene(7, DataConfig{});
  const Box p{0.3, 0.3, 0.7, 0.7};
  const auto img = image_batch<double>(sc.image);
  const Box r0 = rectified_box(m.mpv, img, p, 0), r1 = rectified_box(m.mpv, img, p, 1);
  EXPECT_NEAR(r0.x1, 0.2, 1e-12);
  EXPECT_NEAR(r1.y2, 0.8, 1e-12);
  const Box f = fuse_average(m.mpv, sc.image, p);
  EXPECT_NEAR(f.x1, 0.3, 1e-12);
  EXPECT_NEAR(f.y1, 0.3, 1e-12);
  EXPECT_NEAR(f.x2, 0.7, 1e-12);
  EXPECT_NEAR(f.y2, 0.7, 1e-12);
}

TEST(Infer, ComposerOnlyIsTheComposerBox) {
  auto m = fresh_model(12);
  const auto s = generate_scene(8, DataConfig{});
  EXPECT_EQ(infer(m, s.image, InferenceMode::composer_only, PolicyConfig{}, 0),
            composer_forward(m.composer, image_batch<double>(s.image)).front());
}

TEST(Infer, ModesAgreeWithZeroRectifier) {
  auto m = fresh_model(13);
  zero_heads(m.mpv);
  const auto s = generate_scene(9, DataConfig{});
  const Box a = infer(m, s.image, InferenceMode::composer_only, PolicyConfig{}, 1);
  // averaging identical head outputs may round in the last place
  const auto avg = infer(m, s.image, InferenceMode::mpv_average, PolicyConfig{}, 1).coords();
  const auto ref = repair(a).coords();
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(avg[k], ref[k], 1e-15);
  EXPECT_EQ(infer(m, s.image, InferenceMode::mpv_select, PolicyConfig{}, 1), repair(a));
}

TEST(Infer, SelectionDeterministicGivenSeed) {
  auto m = fresh_model(14);
  const auto s = generate_scene(10, DataConfig{});
  EXPECT_EQ(infer(m, s.image, InferenceMode::mpv_select, PolicyConfig{}, 2),
            infer(m, s.image, InferenceMode::mpv_select, PolicyConfig{}, 2));
}

TEST(Infer, ModeNames) {
  for (auto mode : {InferenceMode::composer_only, InferenceMode::mpv_select, InferenceMode::mpv_average})
    EXPECT_EQ(parse_mode(mode_name(mode)), mode);
  EXPECT_THROW(parse_mode("oracle"), usage_error);
  EXPECT_THROW(parse_source("teacher"), usage_error);
}

TEST(PseudoLabels, CacheCoversPoolAndIsStamped) {
  auto m = fresh_model(15);
  const auto d = make_dataset(oracle::tiny_data(), 11);
  for (auto source : {PseudoLabelSource::composer, PseudoLabelSource::average, PseudoLabelSource::select}) {
    const auto cache = generate_pseudo_labels(m, d.unlabeled, source, PolicyConfig{}, 4, 12, 5);
    EXPECT_EQ(cache.entries.size(), d.unlabeled.size());
    EXPECT_EQ(cache.epoch, 4);
    double sum = 0;
    for (std::size_t i = 0; i < cache.entries.size(); ++i) {
      const auto& e = cache.entries[i];
      EXPECT_TRUE(is_valid(e.trusted));
      EXPECT_GE(e.diagnostic_iou, 0.0);
      EXPECT_LE(e.diagnostic_iou, 1.0);
      // the diagnostic is frame independent
      EXPECT_NEAR(e.diagnostic_iou, iou(e.in_original_frame(), d.unlabeled[i].gt_crop), 1e-12);
      if (source == PseudoLabelSource::composer) {
        EXPECT_EQ(e.trusted, e.proposal);
      }
      if (source == PseudoLabelSource::select) {
        EXPECT_LT(e.head, 5u);
      } else {
        EXPECT_EQ(e.head, kNoHead);
      }
      sum += e.diagnostic_iou;
    }
    EXPECT_NEAR(cache.mean_diagnostic_iou(), sum / static_cast<double>(d.unlabeled.size()), 1e-12);
  }
}

TEST(PseudoLabels, ChunkingDoesNotChangeLabels) {
  auto m = fresh_model(16);
  const auto d = make_dataset(oracle::tiny_data(), 13);
  const auto a = generate_pseudo_labels(m, d.unlabeled, PseudoLabelSource::select, PolicyConfig{}, 2, 14, 7);
  const auto b = generate_pseudo_labels(m, d.unlabeled, PseudoLabelSource::select, PolicyConfig{}, 2, 14, 64);
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    EXPECT_EQ(a.entries[i].head, b.entries[i].head);
    EXPECT_NEAR(a.entries[i].trusted.x1, b.entries[i].trusted.x1, 1e-12);
  }
}

TEST(PseudoLabels, EmptyPoolIsUsageError) {
  auto m = fresh_model(17);
  EXPECT_THROW(generate_pseudo_labels(m, {}, PseudoLabelSource::select, PolicyConfig{}, 0, 0), usage_error);
}

TEST(PseudoLabels, CsvExport) {
  auto m = fresh_model(18);
  const auto d = make_dataset(oracle::tiny_data(), 15);
  const auto cache = generate_pseudo_labels(m, d.unlabeled, PseudoLabelSource::select, PolicyConfig{}, 1, 16);
  const auto dir = oracle::scratch_dir("cache_csv");
  write_cache_csv(dir / "c.csv", cache);
  std::ifstream is(dir / "c.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "image_id,x1,y1,x2,y2,head,variance,diag_iou,weak_flipped");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 8);
    ++rows;
  }
  EXPECT_EQ(rows, d.unlabeled.size());
  std::filesystem::remove_all(dir);
}
