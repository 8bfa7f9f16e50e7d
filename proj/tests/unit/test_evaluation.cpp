#include <gtest/gtest.h>

#include <sstream>

#include "helpers.hpp"
#include "mid/error.hpp"
#include "mid/evaluation.hpp"

using namespace mid;

namespace {

// Predicts the brightest row of a striped image; perfect on clean data.
Classifier row_detector(int64_t classes) {
  EncoderSpec spec{Backbone::MlpTiny, classes, {1, classes, 4}};
  Encoder encoder(spec, 1);
  ParamSet head;
  head.add("weight", torch::eye(classes));
  head.add("bias", torch::zeros({classes}));
  {
    torch::NoGradGuard guard;
    auto& fc1 = encoder.params().at("fc1.weight");
    fc1.zero_();
    for (int64_t c = 0; c < classes; ++c) fc1[c].narrow(0, c * 4, 4).fill_(0.5);
    encoder.params().at("fc1.bias").fill_(-0.5);
    auto& fc2 = encoder.params().at("fc2.weight");
    fc2.zero_();
    fc2.narrow(1, 0, classes).copy_(torch::eye(classes) * 3);
    encoder.params().at("fc2.bias").zero_();
  }
  return {encoder, ClassifierHead(head)};
}

}  // namespace

TEST(Evaluation, AccuracyCountsArgmaxHits) {
  auto split = fixtures::striped_split(300, 3, 1);
  auto model = row_detector(3);
  EXPECT_DOUBLE_EQ(accuracy(model, split, 64), 100.0);
  LogitsFn always_zero = [](const torch::Tensor& x) {
    auto out = torch::zeros({x.size(0), 3});
    out.select(1, 0).fill_(1.0);
    return out;
  };
  auto expected = 100.0 * split.labels().eq(0).sum().item<double>() / 300.0;
  EXPECT_NEAR(accuracy(always_zero, split, 7), expected, 1e-9);
}

TEST(Evaluation, ReportAveragesAndCsv) {
  EvaluationReport r;
  r.benign_accuracy = 90.0;
  r.rows = {{"PGD_N", false, AttackMode::White, true, 50.0},
            {"FGSM_T", true, AttackMode::White, false, 70.0}};
  r.finalize();
  EXPECT_DOUBLE_EQ(r.average_without_benign, 60.0);
  EXPECT_DOUBLE_EQ(r.average_with_benign, 70.0);
  EXPECT_EQ(r.find("FGSM_T", AttackMode::White)->accuracy, 70.0);
  EXPECT_EQ(r.find("FGSM_T", AttackMode::Black), nullptr);
  EXPECT_EQ(to_csv(r),
            "attack,targeted,mode,known,accuracy\n"
            "PGD_N,false,white,true,50.0000\n"
            "FGSM_T,true,white,false,70.0000\n");
  auto j = to_json(r);
  EXPECT_EQ(j["rows"].size(), 2u);
}

TEST(Evaluation, RobustnessRowsAndKnownTags) {
  auto split = fixtures::striped_split(60, 3, 2);
  auto model = row_detector(3);
  AttackDefaults d;
  d.epsilon = 0.0;
  std::vector<AttackSpec> specs{attack_from_name("identity"), attack_from_name("FGSM_N", d),
                                attack_from_name("PGD_T", d)};
  EvaluationOptions options;
  options.seed = 4;
  options.dataset = "striped";
  auto report = evaluate_robustness(model, split, specs, AttackMode::White, {"PGD_T"}, options);
  ASSERT_EQ(report.rows.size(), 2u);
  EXPECT_DOUBLE_EQ(report.benign_accuracy, 100.0);
  EXPECT_FALSE(report.rows[0].known);
  EXPECT_TRUE(report.rows[1].known);
  EXPECT_TRUE(report.rows[1].targeted);
  for (const auto& row : report.rows) EXPECT_DOUBLE_EQ(row.accuracy, 100.0);
  EXPECT_EQ(report.model_hash, model.hash());
  EXPECT_THROW(evaluate_robustness(model, split, specs, AttackMode::Black, {}, options),
               InvalidArgument);
}

TEST(Evaluation, StrongAttackBreaksUndefendedModel) {
  auto split = fixtures::striped_split(60, 3, 3);
  auto model = row_detector(3);
  EvaluationOptions options;
  AttackDefaults d;
  d.epsilon = 0.5;  // enough to swap a 0.7 stripe for another row
  const auto pgd = attack_from_name("PGD_N", d);
  auto report = evaluate_robustness(model, split, {pgd}, AttackMode::White, {}, options);
  EXPECT_LT(report.rows[0].accuracy, 10.0);
  auto again = evaluate_robustness(model, split, {pgd}, AttackMode::White, {}, options);
  EXPECT_EQ(to_csv(again), to_csv(report));
}

TEST(Evaluation, MergeKeepsRowOrder) {
  EvaluationReport a, b;
  a.rows = {{"PGD_N", false, AttackMode::White, true, 10.0}};
  b.rows = {{"PGD_N", false, AttackMode::Black, true, 30.0}};
  a.benign_accuracy = b.benign_accuracy = 95.0;
  auto m = merge_reports({a, b});
  ASSERT_EQ(m.rows.size(), 2u);
  EXPECT_EQ(m.rows[1].mode, AttackMode::Black);
  EXPECT_DOUBLE_EQ(m.average_without_benign, 20.0);
}

TEST(Evaluation, CrossValidationNeedsThreeAttacks) {
  auto data = fixtures::striped_dataset(32, 16, 3, 1);
  auto spec = fixtures::tiny_spec(4, data.spec().image_shape);
  auto teacher = fixtures::tiny_teacher(spec, 3, 1);
  CrossValidationConfig config;
  EXPECT_THROW(cross_validation_protocol({attack_from_name("PGD_N"), attack_from_name("MIM_N")},
                                         data, teacher, config),
               InvalidArgument);
}

TEST(Evaluation, CrossValidationHoldsOutEachAttack) {
  auto data = fixtures::striped_dataset(32, 16, 3, 1);
  auto spec = fixtures::tiny_spec(4, data.spec().image_shape);
  auto teacher = fixtures::tiny_teacher(spec, 3, 1);
  CrossValidationConfig config;
  config.meta.epochs = 1;
  config.meta.batch_size = 16;
  std::vector<AttackSpec> attacks{attack_from_name("PGD_N"), attack_from_name("FGSM_N"),
                                  attack_from_name("MIM_T")};
  auto rounds = cross_validation_protocol(attacks, data, teacher, config);
  ASSERT_EQ(rounds.size(), 3u);
  for (std::size_t i = 0; i < rounds.size(); ++i) {
    EXPECT_EQ(rounds[i].holdout, attacks[i]);
    EXPECT_EQ(rounds[i].training_pool.size(), 3u);  // identity + two others
    for (const auto& name : rounds[i].training_pool) EXPECT_NE(name, attacks[i].name());
    ASSERT_EQ(rounds[i].report.rows.size(), 1u);
    EXPECT_FALSE(rounds[i].report.rows[0].known);
  }
}

TEST(Training, FineTuneStartsFromInitialModelAndLeavesItIntact) {
  auto split = fixtures::striped_split(64, 3, 5);
  auto model = row_detector(3);
  const auto before = model.hash();
  ClassifierTrainConfig config;
  config.epochs = 1;
  config.optimizer = OptimizerKind::Sgd;
  config.learning_rate = 1e-6;
  config.batch_size = 16;
  int observed = 0;
  auto tuned = fine_tune_classifier(model, split, config, attack_from_name("FGSM_N"),
                                    [&](int, const Classifier&) { ++observed; });
  EXPECT_EQ(observed, 1);
  EXPECT_EQ(model.hash(), before);
  EXPECT_NE(tuned.hash(), before);
  EXPECT_TRUE(flatten_tensors(tuned.params().tensors())
                  .allclose(flatten_tensors(model.params().tensors()), 0, 1e-4));
  EXPECT_FALSE(tuned.encoder.params().at("fc1.weight").requires_grad());
}
