#include <benchmark/benchmark.h>

#include <random>

#include <torch/torch.h>

#include "mid/meta_defense.hpp"

namespace {

using namespace mid;

void BM_MetaUpdate(benchmark::State& state) {
  torch::set_num_threads(1);
  const bool second_order = state.range(1) != 0;
  EncoderSpec spec{Backbone::LeNet5, 84, {1, 28, 28}};
  TeacherModel teacher(Encoder(spec, 1), ClassifierHead(84, 10, 2), Decoder(spec, 3));
  teacher.freeze();
  auto student = StudentEncoder::from_teacher(teacher);
  MetaConfig config;
  config.second_order = second_order;
  MidTrainer trainer(student, teacher, config);
  auto pool = make_pool({attack_from_name("PGD_N"), attack_from_name("PGD_T"),
                         attack_from_name("MIM_N"), attack_from_name("MIM_T")},
                        5);
  const auto batch_size = state.range(0);
  torch::manual_seed(6);
  ImageBatch batch{torch::rand({batch_size, 1, 28, 28}), torch::randint(10, {batch_size})};
  std::mt19937_64 rng(7);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.meta_update(batch, pool, rng));
  state.SetItemsProcessed(state.iterations() * batch_size);
}

BENCHMARK(BM_MetaUpdate)
    ->ArgsProduct({{32, 128}, {0, 1}})
    ->ArgNames({"batch", "second_order"})
    ->Unit(benchmark::kMillisecond);

void BM_ConsistencyForward(benchmark::State& state) {
  torch::set_num_threads(1);
  EncoderSpec spec{Backbone::LeNet5, 84, {1, 28, 28}};
  TeacherModel teacher(Encoder(spec, 1), ClassifierHead(84, 10, 2), Decoder(spec, 3));
  teacher.freeze();
  auto student = StudentEncoder::from_teacher(teacher);
  torch::manual_seed(6);
  ImageBatch benign{torch::rand({128, 1, 28, 28}), torch::randint(10, {128})};
  AdversarialSet adversarial;
  for (int i = 0; i < 4; ++i) {
    adversarial.names.push_back("a" + std::to_string(i));
    adversarial.images.push_back(torch::rand({128, 1, 28, 28}));
  }
  MetaConfig config;
  for (auto _ : state)
    benchmark::DoNotOptimize(consistency_parts(
        teacher, StudentView{student.encoder(), student.params()}, benign, adversarial, config));
}

BENCHMARK(BM_ConsistencyForward)->Unit(benchmark::kMillisecond);

}  // namespace
