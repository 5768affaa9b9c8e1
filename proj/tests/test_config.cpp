#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "cdpo/config.hpp"

using namespace cdpo;
using nlohmann::json;

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c;
  c.seed = 9;
  c.dpo.lambda = 0.5;
  c.train.cdpo.steps = 17;
  c.eval.conditions = {Condition::likes};
  c.user_features = FeatureMode::learned;
  const auto j = to_json(c);
  const auto back = run_config_from_json(json::parse(j.dump()));
  EXPECT_EQ(to_json(back).dump(), j.dump());
}

TEST(RunConfig, MissingKeysKeepDefaults) {
  const auto c = run_config_from_json(json::parse(R"({"seed": 4, "dpo": {"k": 5}})"));
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.dpo.k, 5u);
  EXPECT_EQ(c.dpo.lambda, RunConfig().dpo.lambda);
  EXPECT_EQ(to_json(run_config_from_json(json::object())).dump(), to_json(RunConfig()).dump());
}

TEST(RunConfig, UnknownKeysRejected) {
  try {
    run_config_from_json(json::parse(R"({"train": {"cdpo": {"stepz": 3}}})"));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("train.cdpo.stepz"), std::string::npos);
  }
  EXPECT_THROW(run_config_from_json(json::parse(R"({"bogus": 1})")), FormatError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"gnn": 3})")), FormatError);
}

TEST(RunConfig, BadValuesRejected) {
  EXPECT_THROW(run_config_from_json(json::parse(R"({"seed": "x"})")), FormatError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"dpo": {"beta": 0}})")), Error);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"train": {"cdpo": {"lr_policy": 1e-4, "lr_gnn": 1e-3}}})")),
               Error);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"eval": {"conditions": ["Nope"]}})")), Error);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"graph": {"user_features": "warm"}})")), FormatError);
}

TEST(RunConfig, DerivedStageConfigs) {
  RunConfig c;
  c.seed = 12;
  c.gnn.out_dim = 16;
  c.feature_dim = 32;
  c.dpo.lambda = 0.3;
  EXPECT_EQ(c.gnn_config().in_dim, 32u);
  EXPECT_EQ(c.gnn_config().seed, 12u);
  const auto pc = c.policy_config(99);
  EXPECT_EQ(pc.vocab_size, 99u);
  EXPECT_EQ(pc.user_dim, 16u);
  EXPECT_EQ(c.cdpo_config().dpo.lambda, 0.3);
  EXPECT_EQ(c.cdpo_config().seed, 12u);
  EXPECT_EQ(c.sft_config().seed, 12u);
  EXPECT_EQ(c.data_config().seed, 12u);
}

TEST(RunConfig, LoadFromFile) {
  const std::string path = ::testing::TempDir() + "cdpo_run_config.json";
  {
    std::ofstream(path) << R"({"seed": 2, "eval": {"top_n": 4}})";
  }
  EXPECT_EQ(load_run_config(path).eval.top_n, 4u);
  {
    std::ofstream(path) << "{not json";
  }
  EXPECT_THROW(load_run_config(path), FormatError);
  std::remove(path.c_str());
  EXPECT_THROW(load_run_config(path), Error);
}
