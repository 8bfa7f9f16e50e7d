#include <benchmark/benchmark.h>

#include <random>

#include <torch/torch.h>

#include "mid/attacks.hpp"
#include "mid/models.hpp"

namespace {

using namespace mid;

void BM_Attack(benchmark::State& state, const char* name) {
  torch::set_num_threads(1);
  EncoderSpec spec{Backbone::LeNet5, 84, {1, 28, 28}};
  Classifier model{Encoder(spec, 1), ClassifierHead(84, 10, 2)};
  const auto batch_size = state.range(0);
  torch::manual_seed(3);
  ImageBatch batch{torch::rand({batch_size, 1, 28, 28}), torch::randint(10, {batch_size})};
  const auto attack = attack_from_name(name);
  const auto f = logits_fn(model);
  std::mt19937_64 rng(4);
  for (auto _ : state) benchmark::DoNotOptimize(generate(attack, f, batch, 10, rng).images);
  state.SetItemsProcessed(state.iterations() * batch_size);
}

BENCHMARK_CAPTURE(BM_Attack, fgsm, "FGSM_N")->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Attack, pgd, "PGD_N")->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Attack, mim_targeted, "MIM_T")->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Attack, cw, "CW_N")->Arg(16)->Unit(benchmark::kMillisecond);

}  // namespace
