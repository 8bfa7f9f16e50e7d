#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "mid/error.hpp"
#include "mid/teacher.hpp"

using namespace mid;

TEST(Teacher, LossMatchesHandComputation) {
  auto spec = fixtures::tiny_spec(4, {1, 4, 4});
  TeacherModel teacher(Encoder(spec, 1), ClassifierHead(4, 3, 2), Decoder(spec, 3));
  {
    torch::NoGradGuard guard;
    for (auto& [_, t] : teacher.mutable_head().params()) t.zero_();
  }
  teacher.freeze();
  ImageBatch batch{fixtures::random_images(5, {1, 4, 4}, 4), fixtures::random_labels(5, 3, 5)};
  auto recon = teacher.reconstruct(batch.images);
  auto diff = (recon - batch.images).flatten(1);

  auto l2 = teacher_loss(teacher, batch, ReconstructionNorm::L2);
  EXPECT_NEAR(l2.classification.item<double>(), std::log(3.0), 1e-6);
  EXPECT_NEAR(l2.reconstruction.item<double>(), diff.norm(2, 1).mean().item<double>(), 1e-6);
  EXPECT_NEAR(l2.total.item<double>(),
              l2.classification.item<double>() + l2.reconstruction.item<double>(), 1e-6);

  auto l1 = teacher_loss(teacher, batch, ReconstructionNorm::L1);
  EXPECT_NEAR(l1.reconstruction.item<double>(), diff.abs().sum(1).mean().item<double>(), 1e-5);
}

TEST(Teacher, ConfigValidation) {
  TeacherTrainConfig config;
  EXPECT_NO_THROW(config.validate());
  config.epochs = 0;
  EXPECT_THROW(config.validate(), InvalidArgument);
  EXPECT_EQ(reconstruction_norm_from_string("l1"), ReconstructionNorm::L1);
  EXPECT_THROW(reconstruction_norm_from_string("l3"), InvalidArgument);
}

TEST(Teacher, TrainingLearnsSeparableDataAndFreezes) {
  auto data = fixtures::striped_dataset(600, 300, 3, 1);
  auto spec = fixtures::tiny_spec(8, data.spec().image_shape);
  TeacherTrainConfig config;
  config.epochs = 15;
  config.learning_rate = 1e-2;
  config.batch_size = 32;
  config.seed = 3;
  auto result = train_teacher(config, data, spec);
  EXPECT_TRUE(result.teacher.frozen());
  EXPECT_GT(result.clean_accuracy, 95.0);
  auto untrained = fixtures::tiny_teacher(spec, 3, 99);
  EXPECT_LT(result.reconstruction_error, reconstruction_error(untrained, data.test()));
  EXPECT_NEAR(result.reconstruction_error, reconstruction_error(result.teacher, data.test()), 1e-9);

  auto again = train_teacher(config, data, spec);
  EXPECT_EQ(again.teacher.hash(), result.teacher.hash());
}
