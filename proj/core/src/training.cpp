#include "mid/training.hpp"

#include <algorithm>
#include <cctype>
#include <random>

#include "mid/error.hpp"

namespace mid {

namespace F = torch::nn::functional;

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Sgd ? "sgd" : "adam";
}

OptimizerKind optimizer_from_string(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "sgd") return OptimizerKind::Sgd;
  if (lower == "adam") return OptimizerKind::Adam;
  throw InvalidArgument("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

Optimizer::Optimizer(OptimizerKind kind, std::vector<torch::Tensor> tensors, double learning_rate)
    : kind_(kind), tensors_(std::move(tensors)), learning_rate_(learning_rate) {
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be > 0");
  if (kind_ == OptimizerKind::Sgd)
    impl_ = std::make_unique<torch::optim::SGD>(tensors_, torch::optim::SGDOptions(learning_rate));
  else
    impl_ =
        std::make_unique<torch::optim::Adam>(tensors_, torch::optim::AdamOptions(learning_rate));
}

Optimizer::~Optimizer() = default;
Optimizer::Optimizer(Optimizer&&) noexcept = default;
Optimizer& Optimizer::operator=(Optimizer&&) noexcept = default;

void Optimizer::step(const std::vector<torch::Tensor>& gradients) {
  if (gradients.size() != tensors_.size())
    throw ShapeError("optimizer: " + std::to_string(gradients.size()) + " gradients for " +
                     std::to_string(tensors_.size()) + " tensors");
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (!gradients[i].defined() || gradients[i].sizes() != tensors_[i].sizes())
      throw ShapeError("optimizer: gradient shape mismatch at index " + std::to_string(i));
    tensors_[i].mutable_grad() = gradients[i].detach().to(tensors_[i].dtype());
  }
  impl_->step();
  for (auto& t : tensors_) t.mutable_grad() = torch::Tensor();
}

void check_finite(const torch::Tensor& value, const std::string& stage) {
  if (!torch::isfinite(value).all().item<bool>())
    throw NumericError(stage, "non-finite value encountered");
}

namespace {

void make_leaves(ParamSet& set) {
  for (auto& [_, t] : set) t = t.detach().clone().requires_grad_(true);
}

void release(ParamSet& set) {
  for (auto& [_, t] : set) t = t.detach();
}

}  // namespace

Classifier train_classifier(const EncoderSpec& spec, int64_t num_classes, const Split& train,
                            const ClassifierTrainConfig& config,
                            const std::optional<AttackSpec>& adversarial,
                            const EpochObserver& observer) {
  spec.validate();
  return fine_tune_classifier(
      Classifier{Encoder(spec, derive_seed(config.seed, "classifier.encoder")),
                 ClassifierHead(spec.feature_dim, num_classes,
                                derive_seed(config.seed, "classifier.head"))},
      train, config, adversarial, observer);
}

Classifier fine_tune_classifier(Classifier model, const Split& train,
                                const ClassifierTrainConfig& config,
                                const std::optional<AttackSpec>& adversarial,
                                const EpochObserver& observer) {
  if (config.epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (config.batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (train.size() == 0) throw InvalidArgument("empty training split");
  const int64_t num_classes = model.head.num_classes();
  model = model.clone();
  make_leaves(model.encoder.params());
  make_leaves(model.head.params());
  auto tensors = model.encoder.params().tensors();
  for (const auto& t : model.head.params().tensors()) tensors.push_back(t);
  Optimizer optimizer(config.optimizer, tensors, config.learning_rate);

  BatchIterator batches(train, config.batch_size, derive_seed(config.seed, "classifier.batches"));
  std::mt19937_64 attack_rng(derive_seed(config.seed, "classifier.attack"));

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (const auto& indices : batches.epoch(epoch)) {
      auto batch = batches.batch(indices);
      if (adversarial) batch = generate(*adversarial, logits_fn(model), batch, num_classes, attack_rng);
      auto features = model.encoder.forward_with(model.encoder.params(), batch.images, Mode::Train);
      auto logits = ClassifierHead::forward_with(model.head.params(), features);
      auto loss = F::cross_entropy(logits, batch.labels);
      check_finite(loss, "train-classifier");
      optimizer.step(torch::autograd::grad({loss}, tensors));
    }
    if (observer) observer(epoch, model);
  }
  release(model.encoder.params());
  release(model.head.params());
  return model;
}

}  // namespace mid
