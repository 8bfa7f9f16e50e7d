#include <gtest/gtest.h>

#include "helpers.hpp"
#include "mid/config.hpp"
#include "mid/error.hpp"

using namespace mid;

TEST(Config, DefaultsFromEmptyDocument) {
  auto c = parse_config_string("{}");
  EXPECT_EQ(c.encoder.backbone, Backbone::LeNet5);
  EXPECT_EQ(c.pool.names(), (std::vector<std::string>{"identity", "PGD_N", "PGD_T", "MIM_N", "MIM_T"}));
  EXPECT_DOUBLE_EQ(c.meta.beta, 1.0);
  EXPECT_DOUBLE_EQ(c.meta.weights.ac, 1.0);
  EXPECT_EQ(c.evaluation.attacks.size(), 8u);
  EXPECT_EQ(c.cross_validation.size(), 4u);
  EXPECT_TRUE(c.student_from_teacher);
  ASSERT_EQ(c.analysis.cutoffs.size(), 15u);  // 0..14 for 28x28 inputs
  EXPECT_DOUBLE_EQ(c.analysis.cutoffs.back(), 14.0);
}

TEST(Config, ParsesAttackHyperparameters) {
  auto c = parse_config_string(R"(
seed: 3
attacks:
  epsilon: 0.1
  steps: 4
  step_size: 0.05
  momentum_decay: 0.5
  cw: {iterations: 7, penalty: 2.0}
pool: [PGD_N, FGSM_T, MIM_N]
meta:
  alpha: 0.01
  second_order: false
  weights: {ac: 0.5, cc: 0, lc: 2}
)");
  ASSERT_EQ(c.pool.specs.size(), 4u);
  const auto& mim = c.pool.specs[3];
  EXPECT_EQ(mim.name(), "MIM_N");
  EXPECT_DOUBLE_EQ(mim.epsilon, 0.1);
  EXPECT_EQ(mim.steps, 4);
  EXPECT_DOUBLE_EQ(mim.step_size, 0.05);
  EXPECT_DOUBLE_EQ(mim.momentum_decay, 0.5);
  EXPECT_EQ(c.attack_defaults.cw_iterations, 7);
  EXPECT_FALSE(c.meta.second_order);
  EXPECT_DOUBLE_EQ(c.meta.weights.cc, 0.0);
  EXPECT_EQ(c.seed, 3u);
}

TEST(Config, UnknownKeyReportsLine) {
  try {
    parse_config_string("seed: 1\nmeta:\n  alpah: 0.1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    std::string what = e.what();
    EXPECT_NE(what.find("alpah"), std::string::npos) << what;
    EXPECT_NE(what.find("3"), std::string::npos) << what;
  }
}

TEST(Config, InvalidValuesRejected) {
  EXPECT_THROW(parse_config_string("meta: {gamma: 0}"), ConfigError);
  EXPECT_THROW(parse_config_string("pool: [PGD_N]"), ConfigError);
  EXPECT_THROW(parse_config_string("pool: [PGD_N, PGD_N]"), ConfigError);
  EXPECT_THROW(parse_config_string("encoder: {backbone: vgg}"), ConfigError);
  EXPECT_THROW(parse_config_string("seed: abc"), ConfigError);
  EXPECT_THROW(parse_config_string("attacks: {epsilon: -1}"), ConfigError);
  EXPECT_THROW(parse_config_string("meta: [1, 2"), ConfigError);
}

TEST(Config, YamlRoundTripPreservesHash) {
  auto c = parse_config_string("seed: 11\nmeta: {alpha: 0.003, temperature: 0.7}\n");
  auto again = parse_config_string(to_yaml(c));
  EXPECT_EQ(to_json(again), to_json(c));
  EXPECT_EQ(again.hash(), c.hash());
  auto other = parse_config_string("seed: 12\nmeta: {alpha: 0.003, temperature: 0.7}\n");
  EXPECT_NE(other.hash(), c.hash());
}

TEST(Config, ReseedDerivesStageSeeds) {
  auto c = parse_config_string("{}");
  c.reseed(5);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.teacher.seed, derive_seed(5, "teacher"));
  EXPECT_EQ(c.meta.seed, derive_seed(5, "meta"));
  EXPECT_NE(c.baseline.seed, c.meta.seed);
}
