#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "mid/attacks.hpp"
#include "mid/data.hpp"
#include "mid/models.hpp"

namespace mid {

enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(std::string_view name);

/// Gradient-descent step over externally held tensors. Gradients are passed
/// in explicitly, so the tensors need no autograd history of their own.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<torch::Tensor> tensors, double learning_rate);
  ~Optimizer();
  Optimizer(Optimizer&&) noexcept;
  Optimizer& operator=(Optimizer&&) noexcept;

  void step(const std::vector<torch::Tensor>& gradients);
  double learning_rate() const { return learning_rate_; }

 private:
  OptimizerKind kind_;
  std::vector<torch::Tensor> tensors_;
  double learning_rate_;
  std::unique_ptr<torch::optim::Optimizer> impl_;
};

struct ClassifierTrainConfig {
  int epochs = 5;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  int64_t batch_size = 128;
  uint64_t seed = 0;
};

/// Per-epoch observer: (1-based epoch, model after the epoch).
using EpochObserver = std::function<void(int, const Classifier&)>;

/// Cross-entropy training of encoder + head. With `adversarial` set, every
/// batch is replaced by attacks generated against the current model
/// (plain adversarial training).
Classifier train_classifier(const EncoderSpec& spec, int64_t num_classes, const Split& train,
                            const ClassifierTrainConfig& config,
                            const std::optional<AttackSpec>& adversarial = std::nullopt,
                            const EpochObserver& observer = {});

/// The same loop starting from `initial` (copied) instead of a fresh model.
Classifier fine_tune_classifier(Classifier initial, const Split& train,
                                const ClassifierTrainConfig& config,
                                const std::optional<AttackSpec>& adversarial = std::nullopt,
                                const EpochObserver& observer = {});

void check_finite(const torch::Tensor& value, const std::string& stage);

}  // namespace mid
