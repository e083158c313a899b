#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace mpvcrop;
using T = Tensor<double>;

namespace {

std::vector<double> flat_values(const ModelPair<double>& m) {
  std::vector<double> out;
  for (const auto& t : TeacherStudentState<double>::all_parameters(m)) out.insert(out.end(), t.value().begin(), t.value().end());
  return out;
}

std::vector<NamedTensor<double>> toy(std::vector<double> v) {
  const std::size_t n = v.size();
  return {{"w", T::from({n}, std::move(v))}};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

} // namespace

TEST(Ema, SingleUpdateArithmetic) {
  auto t = toy({1.0});
  ema_update(t, toy({0.0}), 0.995);
  EXPECT_DOUBLE_EQ(t[0].tensor.value()[0], 0.995);
}

TEST(Ema, StudentEqualToTeacherIsFixedPoint) {
  auto t = toy({0.3, -2.0, 7.5});
  ema_update(t, toy({0.3, -2.0, 7.5}), 0.995);
  EXPECT_EQ(t[0].tensor.value()[0], 0.3);
  EXPECT_EQ(t[0].tensor.value()[1], -2.0);
  EXPECT_EQ(t[0].tensor.value()[2], 7.5);
}

TEST(Ema, GeometricRecursion) {
  auto t = toy({1.0, -0.5, 2.0});
  const auto s = toy({0.25, 0.25, 0.25});
  const std::vector<double> t0{1.0, -0.5, 2.0};
  for (int n = 1; n <= 1000; ++n) {
    ema_update(t, s, 0.995);
    for (std::size_t k = 0; k < 3; ++k)
      ASSERT_NEAR(t[0].tensor.value()[k] - 0.25, std::pow(0.995, n) * (t0[k] - 0.25), 1e-12) << n;
  }
}

TEST(Ema, ExtremeRates) {
  auto t = toy({1.0, 2.0});
  ema_update(t, toy({5.0, 6.0}), 1.0);
  EXPECT_EQ(t[0].tensor.value()[0], 1.0);
  ema_update(t, toy({5.0, 6.0}), 0.0);
  EXPECT_EQ(t[0].tensor.value()[1], 6.0);
}

TEST(Ema, MismatchIsContractError) {
  auto t = toy({1.0, 2.0});
  EXPECT_THROW(ema_update(t, toy({1.0}), 0.9), contract_error);
  EXPECT_THROW(ema_update(t, {}, 0.9), contract_error);
}

TEST(Ema, UpdatesComposerAndRectifier) {
  TeacherStudentState<double> st(init_models<double>(1, oracle::tiny_model()), 0.5, AdamConfig{});
  st.copy_student_to_teacher();
  for (auto& t : TeacherStudentState<double>::all_parameters(st.student))
    for (auto& v : t.value()) v += 1.0;
  const auto before = flat_values(st.teacher);
  ema_update(st, 0.5);
  const auto after = flat_values(st.teacher);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after[i], before[i] + 0.5, 1e-12);
}

TEST(TotalLoss, Recombination) {
  EXPECT_DOUBLE_EQ(total_loss({1.0, 0.5, 2.0, 0.5, 0.0}, 4.0), 7.0);
  EXPECT_DOUBLE_EQ(total_loss({1.0, 0.5, 2.0, 0.5, 0.0}, 0.0), 3.0);
  EXPECT_DOUBLE_EQ(total_loss({1.0, 0.0, 2.0, 0.0, 0.0}, 4.0), 3.0);
}

TEST(Anneal, LinearScheduleOverSemiSupervisedEpochs) {
  const TrainConfig cfg; // 60 epochs, 9 warm-up
  EXPECT_DOUBLE_EQ(anneal_rho(0, cfg), 0.2);
  EXPECT_DOUBLE_EQ(anneal_rho(8, cfg), 0.2);
  EXPECT_DOUBLE_EQ(anneal_rho(9, cfg), 0.2);
  EXPECT_NEAR(anneal_rho(59, cfg), 0.05, 1e-15);
  EXPECT_NEAR(anneal_rho(34, cfg), 0.125, 1e-15);
  for (int e = 10; e < 60; ++e) EXPECT_LT(anneal_rho(e, cfg), anneal_rho(e - 1, cfg));
}

TEST(Anneal, LearningRateHalvesAtDecayEpoch) {
  const TrainConfig cfg;
  EXPECT_DOUBLE_EQ(learning_rate(29, cfg), 3e-4);
  EXPECT_DOUBLE_EQ(learning_rate(30, cfg), 1.5e-4);
}

TEST(Losses, ComposerL1Example) {
  const auto pred = ad::center_to_corners(T::from({1, 4}, std::vector<double>{0.5, 0.5, 1.0, 1.0}));
  const auto gt = boxes_tensor<double>(std::vector<Box>{{0.1, 0.1, 0.9, 0.9}});
  EXPECT_NEAR(ad::l1_loss(pred, gt).item(), 0.1, 1e-15);
}

TEST(Losses, PerfectTargetsWithZeroRectifierGiveZero) {
  auto m = init_models<double>(2, oracle::tiny_model());
  for (auto& h : m.mpv.heads)
    for (auto t : h.tensors()) std::fill(t.value().begin(), t.value().end(), 0.0);
  const auto d = make_dataset(oracle::tiny_data(), 3);
  std::vector<Augmented> views;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto box = composer_forward(m.composer, image_batch<double>(d.labeled[i].image)).front();
    views.push_back({d.labeled[i].image, box, false});
  }
  const auto l = detail::subset_losses(m, views, true, 0.0, 4);
  ASSERT_TRUE(l.composer && l.mpv);
  EXPECT_NEAR(l.composer->item(), 0.0, 1e-15);
  EXPECT_NEAR(l.mpv->item(), 0.0, 1e-15);
  const auto none = detail::subset_losses(m, {}, true, 0.2, 4);
  EXPECT_FALSE(none.composer.has_value());
  EXPECT_FALSE(none.mpv.has_value());
}

TEST(Losses, SingleHeadAverageIsThatHead) {
  auto m = init_models<double>(5, oracle::tiny_model());
  m.mpv.heads.resize(1);
  const auto d = make_dataset(oracle::tiny_data(), 6);
  std::vector<Augmented> views{{d.labeled[0].image, d.labeled[0].gt_crop, false}};
  const auto l = detail::subset_losses(m, views, true, 0.0, 7);
  const auto x = image_batch<double>(d.labeled[0].image);
  const auto ref = composer_forward(m.composer, x);
  const auto direct = ad::l1_loss(rectified_raw(m.mpv, mpv_encode(m.mpv, x), ref, 0),
                                  boxes_tensor<double>(std::vector<Box>{d.labeled[0].gt_crop}));
  EXPECT_DOUBLE_EQ(l.mpv->item(), direct.item());
}

class TrainStepTest : public ::testing::Test {
protected:
  Dataset data = make_dataset(oracle::tiny_data(), 8);
  TrainConfig cfg = oracle::tiny_train(9);
  ModelConfig mcfg = oracle::tiny_model();
};

TEST_F(TrainStepTest, ReportedTotalIsTheRecombination) {
  TeacherStudentState<double> st(init_models<double>(cfg.seed, mcfg), cfg.alpha, AdamConfig{cfg.lr});
  for (std::size_t s = 0; s < 3; ++s) {
    const auto r = train_step(st, data, cfg, nullptr, 0, s);
    EXPECT_EQ(r.composer_unsup, 0.0);
    EXPECT_EQ(r.mpv_unsup, 0.0);
    EXPECT_NEAR(r.total, total_loss(r, cfg.lambda), 1e-15 * std::max(1.0, r.total));
  }
  st.copy_student_to_teacher();
  const auto cache = generate_pseudo_labels(st.teacher, data.unlabeled, cfg.source, cfg.policy, 1, cfg.seed);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto r = train_step(st, data, cfg, &cache, 1, s);
    EXPECT_GT(r.composer_unsup, 0.0);
    EXPECT_GT(r.mpv_unsup, 0.0);
    EXPECT_NEAR(r.total, total_loss(r, cfg.lambda), 4 * std::numeric_limits<double>::epsilon() * r.total);
  }
}

TEST_F(TrainStepTest, MissingPseudoLabelsIsContractError) {
  TeacherStudentState<double> st(init_models<double>(cfg.seed, mcfg), cfg.alpha, AdamConfig{cfg.lr});
  st.copy_student_to_teacher();
  EXPECT_THROW(train_step(st, data, cfg, nullptr, 1, 0), contract_error);
  PseudoLabelCache partial;
  partial.entries.resize(3);
  EXPECT_THROW(train_step(st, data, cfg, &partial, 1, 0), contract_error);
}

TEST_F(TrainStepTest, TeacherOnTheTapeIsDetected) {
  TeacherStudentState<double> st(init_models<double>(cfg.seed, mcfg), cfg.alpha, AdamConfig{cfg.lr});
  st.copy_student_to_teacher();
  const auto cache = generate_pseudo_labels(st.teacher, data.unlabeled, cfg.source, cfg.policy, 1, cfg.seed);
  EXPECT_NO_THROW(train_step(st, data, cfg, &cache, 1, 0));
  for (const auto& t : TeacherStudentState<double>::all_parameters(st.teacher)) EXPECT_FALSE(t.has_grad());
  st.teacher = st.student; // aliasing: teacher tensors are now student tensors
  EXPECT_THROW(train_step(st, data, cfg, &cache, 1, 1), contract_error);
}

TEST_F(TrainStepTest, EmaOnlyInSemiSupervisedStage) {
  TeacherStudentState<double> st(init_models<double>(cfg.seed, mcfg), cfg.alpha, AdamConfig{cfg.lr});
  st.copy_student_to_teacher();
  const auto frozen = flat_values(st.teacher);
  train_step(st, data, cfg, nullptr, 0, 0);
  EXPECT_EQ(flat_values(st.teacher), frozen);
  const auto cache = generate_pseudo_labels(st.teacher, data.unlabeled, cfg.source, cfg.policy, 1, cfg.seed);
  train_step(st, data, cfg, &cache, 1, 0);
  EXPECT_NE(flat_values(st.teacher), frozen);
}

TEST_F(TrainStepTest, HeadGradientsAreIsolated) {
  // One head's loss term must leave every other head's gradient at exactly zero.
  auto m = init_models<double>(cfg.seed, mcfg);
  const auto x = image_batch<double>(std::vector<const Image*>{&data.labeled[0].image, &data.labeled[1].image});
  const auto refs = composer_forward(m.composer, x);
  const auto target = boxes_tensor<double>(std::vector<Box>{data.labeled[0].gt_crop, data.labeled[1].gt_crop});
  for (std::size_t j = 0; j < m.mpv.num_heads(); ++j) {
    auto params = parameters(m.mpv);
    zero_grads(params);
    backward(ad::l1_loss(rectified_raw(m.mpv, mpv_encode(m.mpv, x), refs, j), target));
    for (std::size_t k = 0; k < m.mpv.num_heads(); ++k) {
      if (k == j) continue;
      for (const auto& t : m.mpv.heads[k].tensors())
        for (double gv : t.grad()) EXPECT_EQ(gv, 0.0);
    }
  }
}

// An independently written supervised loop: same batches, same augmentation
// draws, same jitters, same optimizer; only the library's run_training is
// bypassed.
TEST_F(TrainStepTest, WarmupMatchesPlainSupervisedLoop) {
  TrainConfig warm = cfg;
  warm.epochs = 2;
  warm.warmup_epochs = 2;
  const auto lib = run_training<double>(warm, mcfg, data, RunOptions{.evaluate_each_epoch = false});

  auto model = init_models<double>(warm.seed, mcfg);
  auto params = TeacherStudentState<double>::all_parameters(model);
  Adam<double> opt(params, AdamConfig{warm.lr});
  const std::size_t H = model.mpv.num_heads();
  for (int epoch = 0; epoch < warm.epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    opt.set_lr(epoch >= warm.lr_decay_epoch ? warm.lr * warm.lr_decay_factor : warm.lr);
    for (std::size_t step = 0; step < warm.steps_per_epoch; ++step) {
      const auto idx = sample_batch(data, warm.batch_size, 1.0, derive_seed(warm.seed, Stream::batch, {e, step}));
      std::vector<Image> imgs;
      std::vector<Box> gts;
      for (std::size_t k = 0; k < idx.labeled.size(); ++k) {
        const auto& sc = data.labeled[idx.labeled[k]];
        const auto a = weak_augment(sc.image, sc.gt_crop, derive_seed(warm.seed, Stream::augment, {e, step, 0, k}));
        imgs.push_back(a.image);
        gts.push_back(a.box);
      }
      std::vector<const Image*> ptrs;
      for (const auto& im : imgs) ptrs.push_back(&im);
      const auto x = image_batch<double>(ptrs);
      const auto y = boxes_tensor<double>(gts);
      const auto cs = composer_center_size(model.composer, x);
      auto loss = ad::l1_loss(ad::center_to_corners(cs), y);

      const auto boxes = decode_boxes(cs);
      const auto jseed = derive_seed(derive_seed(warm.seed, Stream::mpv_jitter, {e, step}), Stream::mpv_jitter, {0});
      std::vector<std::vector<Box>> refs(H, std::vector<Box>(boxes.size()));
      for (std::size_t n = 0; n < boxes.size(); ++n) {
        Rng rng(derive_seed(jseed, Stream::mpv_jitter, {n}));
        for (std::size_t j = 0; j < H; ++j) refs[j][n] = jitter(boxes[n], {warm.rho_start}, rng);
      }
      const auto feat = mpv_encode(model.mpv, x);
      T head_sum = ad::l1_loss(rectified_raw(model.mpv, feat, refs[0], 0), y);
      for (std::size_t j = 1; j < H; ++j) head_sum = ad::add(head_sum, ad::l1_loss(rectified_raw(model.mpv, feat, refs[j], j), y));
      loss = ad::add(loss, ad::scale(head_sum, 1.0 / static_cast<double>(H)));

      zero_grads(params);
      backward(loss);
      opt.step();
    }
  }
  EXPECT_EQ(flat_values(model), flat_values(lib.state.student));
  EXPECT_EQ(flat_values(lib.state.teacher), flat_values(lib.state.student));
}

TEST_F(TrainStepTest, RunsAreDeterministic) {
  const auto a = run_training<double>(cfg, mcfg, data);
  const auto b = run_training<double>(cfg, mcfg, data);
  EXPECT_EQ(flat_values(a.state.student), flat_values(b.state.student));
  EXPECT_EQ(flat_values(a.state.teacher), flat_values(b.state.teacher));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(metrics_row(a.history[i]), metrics_row(b.history[i]));
}

TEST_F(TrainStepTest, ResumedRunEqualsUninterruptedRun) {
  const auto full = run_training<double>(cfg, mcfg, data, RunOptions{.evaluate_each_epoch = false});
  for (int stop : {1, 2}) {
    auto first = run_training<double>(cfg, mcfg, data, RunOptions{.evaluate_each_epoch = false, .stop_epoch = stop});
    EXPECT_EQ(first.history.size(), static_cast<std::size_t>(stop));
    const auto rest = run_training<double>(cfg, mcfg, data, RunOptions{.evaluate_each_epoch = false, .start_epoch = stop},
                                           first.state.deep_copy());
    EXPECT_EQ(flat_values(rest.state.student), flat_values(full.state.student)) << stop;
    EXPECT_EQ(flat_values(rest.state.teacher), flat_values(full.state.teacher)) << stop;
  }
}

TEST_F(TrainStepTest, DeepCopyIsIndependent) {
  auto warm = run_training<double>(cfg, mcfg, data, RunOptions{.evaluate_each_epoch = false, .stop_epoch = 2});
  const auto snapshot = flat_values(warm.state.student);
  auto copy = warm.state.deep_copy();
  run_training<double>(cfg, mcfg, data, RunOptions{.evaluate_each_epoch = false, .start_epoch = 2}, std::move(copy));
  EXPECT_EQ(flat_values(warm.state.student), snapshot);
}

TEST_F(TrainStepTest, AllWarmupIsSupervisedBaseline) {
  TrainConfig sup = cfg;
  sup.warmup_epochs = sup.epochs;
  const auto r = run_training<double>(sup, mcfg, data);
  for (const auto& h : r.history) {
    EXPECT_FALSE(h.semi);
    EXPECT_EQ(h.loss.composer_unsup, 0.0);
    EXPECT_EQ(h.loss.total, h.loss.composer_sup + h.loss.mpv_sup);
  }
  EXPECT_TRUE(r.state.teacher_ready);
  EXPECT_EQ(flat_values(r.state.teacher), flat_values(r.state.student));
}

TEST_F(TrainStepTest, TeacherStartsAsExactCopyAtStageSwitch) {
  std::vector<double> student_at_switch;
  auto warm = run_training<double>(cfg, mcfg, data, RunOptions{.evaluate_each_epoch = false, .stop_epoch = cfg.warmup_epochs});
  student_at_switch = flat_values(warm.state.student);
  EXPECT_FALSE(warm.state.teacher_ready);
  auto st = warm.state.deep_copy();
  st.copy_student_to_teacher();
  EXPECT_EQ(flat_values(st.teacher), student_at_switch);
}

TEST_F(TrainStepTest, WritesRunArtifacts) {
  const auto dir = oracle::scratch_dir("train_artifacts");
  const auto r = run_training<double>(cfg, mcfg, data, RunOptions{.out_dir = dir});
  std::ifstream is(dir / "metrics.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, kMetricsHeader);
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, cfg.epochs);
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "warmup.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "final.json"));
  for (int e = cfg.warmup_epochs; e < cfg.epochs; ++e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.csv", e);
    EXPECT_TRUE(std::filesystem::exists(dir / "pseudo_labels" / name));
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "pseudo_labels" / "epoch_000.csv"));

  // the saved teacher reproduces the in-memory one
  auto loaded = init_models<double>(0, mcfg);
  load_teacher_from_checkpoint(read_json_file(dir / "checkpoints" / "final.json"), loaded);
  EXPECT_EQ(flat_values(loaded), flat_values(r.state.teacher));
  EXPECT_EQ(slurp(dir / "metrics.csv").back(), '\n');
  std::filesystem::remove_all(dir);
}

TEST_F(TrainStepTest, PseudoLabelDiagnosticLoggedOnlyWhenSemi) {
  const auto r = run_training<double>(cfg, mcfg, data, RunOptions{.keep_caches = true});
  ASSERT_EQ(r.caches.size(), static_cast<std::size_t>(cfg.semi_epochs()));
  for (const auto& h : r.history) {
    if (!h.semi) EXPECT_EQ(h.pseudo_label_iou, 0.0);
    else EXPECT_EQ(h.pseudo_label_iou, r.caches[static_cast<std::size_t>(h.epoch - cfg.warmup_epochs)].mean_diagnostic_iou());
  }
}

TEST_F(TrainStepTest, ConfigValidation) {
  TrainConfig bad = cfg;
  bad.warmup_epochs = bad.epochs + 1;
  EXPECT_THROW(run_training<double>(bad, mcfg, data), usage_error);
  bad = cfg;
  bad.alpha = 1.0;
  EXPECT_THROW(bad.validate(), usage_error);
  bad = cfg;
  bad.use_mpv = false;
  EXPECT_THROW(bad.validate(), usage_error);
  bad.source = PseudoLabelSource::composer;
  EXPECT_NO_THROW(bad.validate());
  Dataset no_unlabeled = data;
  no_unlabeled.unlabeled.clear();
  EXPECT_THROW(run_training<double>(cfg, mcfg, no_unlabeled), usage_error);
}

TEST_F(TrainStepTest, SinglePrecisionTrains) {
  const auto r = run_training<float>(cfg, mcfg, data);
  EXPECT_EQ(r.history.size(), static_cast<std::size_t>(cfg.epochs));
  for (const auto& h : r.history) EXPECT_TRUE(std::isfinite(h.loss.total));
}
