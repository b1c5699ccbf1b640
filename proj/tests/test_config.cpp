#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "gazeclr/config.hpp"
#include "support/scratch.hpp"

namespace gazeclr {
namespace {

class SeedEnv : public ::testing::Test {
 protected:
  void SetUp() override { unsetenv("GAZECLR_SEED"); }
  void TearDown() override { unsetenv("GAZECLR_SEED"); }
};

TEST(Config, DefaultsValidate) {
  RunConfig c = load_run_config(std::nullopt);
  EXPECT_EQ(c.train.variant, Variant::equiv);
  EXPECT_DOUBLE_EQ(c.train.lr, 0.03);
  EXPECT_DOUBLE_EQ(c.train.tau, 0.1);
  EXPECT_EQ(c.eval.shots, kDefaultShotGrid);
}

TEST(Config, RoundTripThroughJson) {
  RunConfig c;
  c.seed = 9;
  c.train.variant = Variant::inv_equiv;
  c.train.iterations = 77;
  c.augmentation.hue = 0.05;
  c.eval.shots = {1, 9};
  c.eval.finetune_bias.folds.scheme = "k_fold";
  c.eval.finetune_bias.folds.folds = 4;
  c.diagnostics.mode = DiagnosticMode::encoder;
  c.model.encoder.architecture = "tinycnn";
  Json j = to_json(c);
  RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
}

TEST(Config, UnknownKeyNamesFullPath) {
  Json j = {{"train", {{"lr", 0.1}, {"lrr", 0.2}}}};
  try {
    run_config_from_json(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.lrr"), std::string::npos);
  }
  Json nested = {{"eval", {{"llt", {{"solvr", "pinv"}}}}}};
  try {
    run_config_from_json(nested);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("eval.llt.solvr"), std::string::npos);
  }
}

TEST(Config, WrongTypeRejected) {
  EXPECT_THROW(run_config_from_json(Json{{"train", {{"iterations", "many"}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(Json{{"seed", -3}}), ConfigError);
  EXPECT_THROW(run_config_from_json(Json{{"train", {{"variant", "contrastive"}}}}), ConfigError);
}

TEST(Config, ValidationCatchesBadValues) {
  EXPECT_THROW(load_run_config(std::nullopt, {"train.lr=0"}), ConfigError);
  EXPECT_THROW(load_run_config(std::nullopt, {"eval.within.fractions=[0.0]"}), ConfigError);
  EXPECT_THROW(load_run_config(std::nullopt, {"eval.runs=0"}), ConfigError);
  EXPECT_THROW(load_run_config(std::nullopt, {"train.tau=0"}), ConfigError);
}

TEST(Config, OverridesParseJsonOrString) {
  RunConfig c = load_run_config(std::nullopt, {"train.iterations=12", "train.variant=inv+equiv",
                                               "eval.shots=[3,5]", "eval.llt.solver=ridge"});
  EXPECT_EQ(c.train.iterations, 12);
  EXPECT_EQ(c.train.variant, Variant::inv_equiv);
  EXPECT_EQ(c.eval.shots, (std::vector<int>{3, 5}));
  EXPECT_EQ(c.eval.llt.solver, "ridge");
  EXPECT_THROW(load_run_config(std::nullopt, {"train.iterations"}), ConfigError);
  EXPECT_THROW(load_run_config(std::nullopt, {"train..lr=1"}), ConfigError);
  EXPECT_THROW(load_run_config(std::nullopt, {"train.lr.x=1"}), ConfigError);
}

TEST(Config, FileThenOverrides) {
  testing::ScratchDir dir("config");
  const auto path = dir.path() / "run.json";
  std::ofstream(path) << R"({"seed": 4, "train": {"iterations": 10, "batch_size": 8}})";
  RunConfig c = load_run_config(path, {"train.batch_size=16"});
  EXPECT_EQ(*c.seed, 4u);
  EXPECT_EQ(c.train.iterations, 10);
  EXPECT_EQ(c.train.batch_size, 16);
  EXPECT_EQ(c.train.seed, 4u);
  std::ofstream(dir.path() / "bad.json") << "{ not json";
  EXPECT_THROW(load_run_config(dir.path() / "bad.json"), ConfigError);
  EXPECT_THROW(load_run_config(dir.path() / "missing.json"), ConfigError);
}

TEST_F(SeedEnv, SeedPrecedence) {
  EXPECT_EQ(*load_run_config(std::nullopt).seed, 0u);
  setenv("GAZECLR_SEED", "17", 1);
  EXPECT_EQ(*load_run_config(std::nullopt).seed, 17u);
  EXPECT_EQ(*load_run_config(std::nullopt, {"seed=5"}).seed, 5u);
  EXPECT_EQ(*load_run_config(std::nullopt, {"seed=5"}, 99).seed, 99u);
  RunConfig c = load_run_config(std::nullopt, {}, 99);
  EXPECT_EQ(c.train.seed, 99u);
  EXPECT_EQ(c.diagnostics.seed, 99u);
  setenv("GAZECLR_SEED", "abc", 1);
  EXPECT_THROW(load_run_config(std::nullopt), ConfigError);
}

TEST(Config, PresetFilesLoad) {
  for (const char* name : {"pretrain_equiv.json", "pretrain_inv_equiv.json", "synthetic_small.json"}) {
    SCOPED_TRACE(name);
    EXPECT_NO_THROW(load_run_config(std::filesystem::path(GAZECLR_SOURCE_DIR) / "configs" / name));
  }
}

}  // namespace
}  // namespace gazeclr
