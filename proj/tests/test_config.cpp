#include "oracles.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace mpvcrop;

namespace {

std::filesystem::path write_file(const std::string& name, const std::string& text) {
  const auto dir = oracle::scratch_dir("config");
  const auto p = dir / name;
  std::ofstream(p) << text;
  return p;
}

} // namespace

TEST(Config, DefaultsMatchStructDefaults) {
  const auto rc = config_from_json(default_config_json());
  const TrainConfig t;
  const DataConfig d;
  const ModelConfig m;
  EXPECT_EQ(rc.train.epochs, t.epochs);
  EXPECT_EQ(rc.train.warmup_epochs, t.warmup_epochs);
  EXPECT_EQ(rc.train.steps_per_epoch, t.steps_per_epoch);
  EXPECT_EQ(rc.train.batch_size, t.batch_size);
  EXPECT_EQ(rc.train.lr, t.lr);
  EXPECT_EQ(rc.train.lambda, t.lambda);
  EXPECT_EQ(rc.train.alpha, t.alpha);
  EXPECT_EQ(rc.train.rho_start, t.rho_start);
  EXPECT_EQ(rc.train.rho_end, t.rho_end);
  EXPECT_EQ(rc.train.source, t.source);
  EXPECT_EQ(rc.train.policy.jitters, t.policy.jitters);
  EXPECT_EQ(rc.train.policy.rho_eval, t.policy.rho_eval);
  EXPECT_EQ(rc.train.strong.cutout_max_frac, t.strong.cutout_max_frac);
  EXPECT_EQ(rc.data.n_labeled, d.n_labeled);
  EXPECT_EQ(rc.data.n_unlabeled, d.n_unlabeled);
  EXPECT_EQ(rc.data.n_test, d.n_test);
  EXPECT_EQ(rc.data.annotation_rho, d.annotation_rho);
  EXPECT_EQ(rc.model.heads, m.heads);
  EXPECT_EQ(rc.model.channels, m.channels);
  EXPECT_EQ(rc.model.composer_pool, m.composer_pool);
  EXPECT_EQ(rc.seed, 0u);
}

TEST(Config, Precedence) {
  const auto file = write_file("prec.json", R"({"seed": 5, "train": {"epochs": 12, "lambda": 2.0}})");
  auto j = resolve_config_json(file, {});
  EXPECT_EQ(j["seed"], 5);
  EXPECT_EQ(j["train"]["epochs"], 12);
  EXPECT_EQ(j["train"]["warmup_epochs"], TrainConfig{}.warmup_epochs);

  j = resolve_config_json(file, {"train.epochs=20", "policy.rho_eval=0.1", "train.source=average"});
  const auto rc = config_from_json(j);
  EXPECT_EQ(rc.train.epochs, 20);
  EXPECT_EQ(rc.train.lambda, 2.0);
  EXPECT_EQ(rc.train.policy.rho_eval, 0.1);
  EXPECT_EQ(rc.train.source, PseudoLabelSource::average);
  EXPECT_EQ(rc.train.seed, 5u);
}

TEST(Config, OverrideAcceptsIntegerForFloat) {
  const auto rc = config_from_json(resolve_config_json(std::nullopt, {"train.lambda=3"}));
  EXPECT_EQ(rc.train.lambda, 3.0);
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(resolve_config_json(std::nullopt, {"train.epoch=3"}), usage_error);
  EXPECT_THROW(resolve_config_json(std::nullopt, {"nope=1"}), usage_error);
  EXPECT_THROW(resolve_config_json(std::nullopt, {"train=1"}), usage_error);
  EXPECT_THROW(resolve_config_json(std::nullopt, {"train.epochs"}), usage_error);
  EXPECT_THROW(resolve_config_json(std::nullopt, {"train.epochs=1.5"}), usage_error);
  EXPECT_THROW(resolve_config_json(std::nullopt, {"train.use_mpv=1"}), usage_error);
  EXPECT_THROW(resolve_config_json(std::nullopt, {"train.lr=fast"}), usage_error);
  EXPECT_THROW(resolve_config_json(write_file("unk.json", R"({"train": {"epoch": 3}})"), {}), usage_error);
  EXPECT_THROW(config_from_json(resolve_config_json(write_file("type.json", R"({"train": {"epochs": "many"}})"), {})),
               usage_error);
}

TEST(Config, UnreadableFileIsConfigError) {
  EXPECT_THROW(resolve_config_json(std::filesystem::path("/nonexistent/cfg.json"), {}), config_error);
  EXPECT_THROW(resolve_config_json(write_file("bad.json", "{ not json"), {}), config_error);
}

TEST(Config, SemanticValidation) {
  EXPECT_THROW(config_from_json(resolve_config_json(std::nullopt, {"precision=half"})), usage_error);
  EXPECT_THROW(config_from_json(resolve_config_json(std::nullopt, {"model.image_size=64"})), usage_error);
  EXPECT_THROW(config_from_json(resolve_config_json(std::nullopt, {"model.composer_pool=max"})), usage_error);
  EXPECT_THROW(config_from_json(resolve_config_json(std::nullopt, {"train.alpha=1.0"})), usage_error);
  EXPECT_THROW(config_from_json(resolve_config_json(std::nullopt, {"train.source=oracle"})), usage_error);
  EXPECT_THROW(config_from_json(resolve_config_json(std::nullopt, {"train.warmup_epochs=100"})), usage_error);
}

TEST(Config, ResolutionIsPure) {
  const auto file = write_file("pure.json", R"({"train": {"epochs": 7}})");
  const auto a = resolve_config_json(file, {"seed=3"});
  const auto b = resolve_config_json(file, {"seed=3"});
  EXPECT_EQ(a, b);
  EXPECT_EQ(default_config_json(), default_config_json());
  EXPECT_EQ(a.dump(), b.dump());
}
