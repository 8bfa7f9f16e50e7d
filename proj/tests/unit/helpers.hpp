#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include "mid/attacks.hpp"
#include "mid/data.hpp"
#include "mid/models.hpp"

namespace mid::fixtures {

inline EncoderSpec tiny_spec(int64_t feature_dim = 4, ImageShape shape = {1, 4, 4}) {
  return {Backbone::MlpTiny, feature_dim, shape};
}

inline torch::Tensor random_images(int64_t n, ImageShape shape, uint64_t seed,
                                   torch::Dtype dtype = torch::kFloat32) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({n, shape.channels, shape.height, shape.width}, gen, torch::dtype(dtype));
}

inline torch::Tensor random_labels(int64_t n, int64_t num_classes, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randint(num_classes, {n}, gen, torch::kInt64);
}

inline TeacherModel tiny_teacher(const EncoderSpec& spec, int64_t num_classes, uint64_t seed,
                                 torch::Dtype dtype = torch::kFloat32) {
  TeacherModel teacher(Encoder(spec, seed, dtype),
                       ClassifierHead(spec.feature_dim, num_classes, seed + 1, dtype),
                       Decoder(spec, seed + 2, dtype));
  teacher.freeze();
  return teacher;
}

/// Two-class linear model with logits [0, w·x + b].
inline LogitsFn linear_two_class(torch::Tensor w, double b) {
  return [w = std::move(w), b](const torch::Tensor& x) {
    auto z = (x.flatten(1) * w.to(x.dtype())).sum(1) + b;
    return torch::stack({torch::zeros_like(z), z}, 1);
  };
}

/// Separable toy data: class c lights up row c of a [1, K, 4] image.
inline Split striped_split(int64_t n, int64_t num_classes, uint64_t seed) {
  auto labels = random_labels(n, num_classes, seed);
  auto images = 0.2 * random_images(n, {1, num_classes, 4}, seed + 1);
  for (int64_t i = 0; i < n; ++i)
    images[i][0][labels[i].item<int64_t>()].add_(0.7);
  return {images, labels};
}

inline Dataset striped_dataset(int64_t train, int64_t test, int64_t num_classes, uint64_t seed) {
  DatasetSpec spec;
  spec.name = "striped";
  spec.num_classes = num_classes;
  spec.image_shape = {1, num_classes, 4};
  spec.split_sizes = {{"train", train}, {"test", test}};
  return {spec, striped_split(train, num_classes, seed), striped_split(test, num_classes, seed + 7)};
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mid_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace mid::fixtures
