#include "mid/teacher.hpp"

#include "mid/error.hpp"

namespace mid {

namespace F = torch::nn::functional;

std::string_view to_string(ReconstructionNorm norm) {
  return norm == ReconstructionNorm::L2 ? "l2" : "l1";
}

ReconstructionNorm reconstruction_norm_from_string(std::string_view name) {
  if (name == "l2" || name == "L2") return ReconstructionNorm::L2;
  if (name == "l1" || name == "L1") return ReconstructionNorm::L1;
  throw InvalidArgument("unknown reconstruction norm '" + std::string(name) + "'");
}

void TeacherTrainConfig::validate() const {
  if (epochs < 1) throw InvalidArgument("teacher epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw InvalidArgument("teacher learning_rate must be > 0");
  if (batch_size < 1) throw InvalidArgument("teacher batch_size must be >= 1");
}

TeacherLoss teacher_loss_with(const TeacherModel& teacher, const ParamSet& encoder_params,
                              const ParamSet& head_params, const ParamSet& decoder_params,
                              const ImageBatch& batch, ReconstructionNorm norm, Mode mode) {
  auto features = teacher.encoder().forward_with(encoder_params, batch.images, mode);
  auto logits = ClassifierHead::forward_with(head_params, features);
  auto recon = teacher.decoder().forward_with(decoder_params, features, mode);
  auto diff = (recon - batch.images).flatten(1);
  auto per_sample = norm == ReconstructionNorm::L2 ? diff.norm(2, 1) : diff.abs().sum(1);
  TeacherLoss loss;
  loss.classification = F::cross_entropy(logits, batch.labels);
  loss.reconstruction = per_sample.mean();
  loss.total = loss.classification + loss.reconstruction;
  return loss;
}

TeacherLoss teacher_loss(const TeacherModel& teacher, const ImageBatch& batch,
                         ReconstructionNorm norm, Mode mode) {
  return teacher_loss_with(teacher, teacher.encoder().params(), teacher.head().params(),
                           teacher.decoder().params(), batch, norm, mode);
}

namespace {

double split_accuracy(const TeacherModel& teacher, const Split& split, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  int64_t correct = 0;
  for (int64_t begin = 0; begin < split.size(); begin += batch_size) {
    auto batch = split.slice(begin, std::min(split.size(), begin + batch_size));
    correct += teacher.logits(batch.images).argmax(1).eq(batch.labels).sum().item<int64_t>();
  }
  return split.size() == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / split.size();
}

}  // namespace

double reconstruction_error(const TeacherModel& teacher, const Split& split, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  double total = 0.0;
  int64_t count = 0;
  for (int64_t begin = 0; begin < split.size(); begin += batch_size) {
    auto batch = split.slice(begin, std::min(split.size(), begin + batch_size));
    total += (teacher.reconstruct(batch.images) - batch.images).abs().sum().item<double>();
    count += batch.images.numel();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

TeacherResult train_teacher(const TeacherTrainConfig& config, const Dataset& dataset,
                            const EncoderSpec& spec) {
  config.validate();
  spec.validate();
  const auto& ds = dataset.spec();
  TeacherModel teacher(Encoder(spec, derive_seed(config.seed, "teacher.encoder")),
                       ClassifierHead(spec.feature_dim, ds.num_classes,
                                      derive_seed(config.seed, "teacher.head")),
                       Decoder(spec, derive_seed(config.seed, "teacher.decoder")));
  std::vector<ParamSet*> sets = {&teacher.mutable_encoder().params(),
                                 &teacher.mutable_head().params(),
                                 &teacher.mutable_decoder().params()};
  std::vector<torch::Tensor> tensors;
  for (auto* set : sets)
    for (auto& [_, t] : *set) {
      t = t.detach().clone().requires_grad_(true);
      tensors.push_back(t);
    }
  Optimizer optimizer(config.optimizer, tensors, config.learning_rate);
  BatchIterator batches(dataset.train(), config.batch_size,
                        derive_seed(config.seed, "teacher.batches"));
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (const auto& indices : batches.epoch(epoch)) {
      auto batch = batches.batch(indices);
      auto loss = teacher_loss(teacher, batch, config.reconstruction, Mode::Train);
      check_finite(loss.total, "train-teacher");
      optimizer.step(torch::autograd::grad({loss.total}, tensors));
    }
  }
  teacher.freeze();
  TeacherResult result{std::move(teacher), 0.0, 0.0};
  result.clean_accuracy = split_accuracy(result.teacher, dataset.test(), 256);
  result.reconstruction_error = reconstruction_error(result.teacher, dataset.test());
  return result;
}

}  // namespace mid
