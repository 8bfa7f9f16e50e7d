#pragma once

// Multi-consistency distillation under a meta-train / meta-test bi-level
// update. The student is trained against a frozen teacher:
//
//   L_meta_train(θ)  = Σ_{n ∈ train}  ω_AC·AC + ω_CC·CC + ω_LC·LC
//   θ'               = θ − α ∇_θ L_meta_train(θ)
//   L_meta_test(θ')  = same objective on the held-out attack, at θ'
//   θ               ← θ − γ ∇_θ [L_meta_train(θ) + β L_meta_test(θ')]
//
// In second-order mode θ' keeps its dependence on θ, so the outer gradient
// contains the Hessian-vector term −α β H_train ∇L_meta_test(θ').

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mid/attacks.hpp"
#include "mid/data.hpp"
#include "mid/models.hpp"
#include "mid/params.hpp"
#include "mid/training.hpp"

namespace mid {

struct FeatureDistribution {
  torch::Tensor probs;  // [B, D], rows on the simplex
  double temperature = 1.0;
};

/// Row-wise softmax(features / τ) over flattened features.
FeatureDistribution feature_distribution(const torch::Tensor& features, double temperature = 1.0);

/// Per-row KL(p ‖ q) with q smoothed as (1−λ)q + λ/D. Returns [B].
torch::Tensor kl_divergence(const FeatureDistribution& p, const FeatureDistribution& q,
                            double smoothing = 1e-6);

struct ConsistencyWeights {
  double ac = 1.0;
  double cc = 1.0;
  double lc = 1.0;
};

struct MetaConfig {
  ConsistencyWeights weights;
  double alpha = 1e-3;  // inner step
  double beta = 1.0;    // meta-test weight
  double gamma = 1e-3;  // outer step
  bool second_order = true;
  double temperature = 1.0;
  double kl_smoothing = 1e-6;
  int epochs = 20;
  int64_t batch_size = 128;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  uint64_t seed = 0;

  void validate() const;
};

/// The student evaluated at a given parameter set (its own or a temporary θ').
struct StudentView {
  const Encoder& encoder;
  const ParamSet& params;
  Mode mode = Mode::Train;

  torch::Tensor features(const torch::Tensor& images) const {
    return encoder.forward_with(params, images, mode);
  }
};

/// Index-aligned adversarial versions of one benign batch.
struct AdversarialSet {
  std::vector<std::string> names;
  std::vector<torch::Tensor> images;  // each [B,C,H,W]
};

struct ConsistencyParts {
  torch::Tensor ac;
  torch::Tensor cc;
  torch::Tensor lc;
  torch::Tensor total;  // ω-weighted sum
};

// Each loss sums over attacks and averages over the samples of a batch.
torch::Tensor adversarial_consistency(const TeacherModel& teacher, const StudentView& student,
                                      const ImageBatch& benign, const AdversarialSet& adversarial,
                                      double temperature = 1.0, double smoothing = 1e-6);
torch::Tensor cyclic_consistency(const TeacherModel& teacher, const StudentView& student,
                                 const ImageBatch& benign, const AdversarialSet& adversarial,
                                 double temperature = 1.0, double smoothing = 1e-6);
torch::Tensor label_consistency(const ClassifierHead& teacher_head, const StudentView& student,
                                const AdversarialSet& adversarial, const torch::Tensor& labels);

/// All three parts from one student forward over the concatenated set.
/// Parts with zero weight are still reported but not differentiated.
ConsistencyParts consistency_parts(const TeacherModel& teacher, const StudentView& student,
                                   const ImageBatch& benign, const AdversarialSet& adversarial,
                                   const MetaConfig& config);

/// Generates one adversarial batch per spec, white-box against the student
/// (at its current parameters) composed with the teacher head.
AdversarialSet generate_adversarial_set(const TeacherModel& teacher, const Encoder& student,
                                        const ImageBatch& benign,
                                        const std::vector<AttackSpec>& specs,
                                        std::mt19937_64& rng);

/// Generation followed by consistency_parts at the student's own parameters.
ConsistencyParts consistency_loss(const TeacherModel& teacher, const StudentEncoder& student,
                                  const ImageBatch& benign, const std::vector<AttackSpec>& specs,
                                  const MetaConfig& config, std::mt19937_64& rng);

/// θ' = θ − α ∇_θ loss. With `create_graph` θ' stays differentiable in θ;
/// otherwise the gradient is treated as a constant.
ParamSet inner_step(const ParamSet& params, const torch::Tensor& loss, double alpha,
                    bool create_graph);

/// Loss as a function of a parameter set.
using ParamLoss = std::function<torch::Tensor(const ParamSet&)>;

struct MetaGradient {
  torch::Tensor meta_train_loss;
  torch::Tensor meta_test_loss;
  std::vector<torch::Tensor> gradient;  // ∂(L_train + β L_test(θ'))/∂θ, one per tensor
};

/// Bi-level gradient for arbitrary losses. `params` must be autograd leaves.
MetaGradient meta_gradient(const ParamSet& params, const ParamLoss& meta_train,
                           const ParamLoss& meta_test, double alpha, double beta,
                           bool second_order);

struct MetaStepReport {
  int64_t iteration = 0;
  int epoch = 0;
  double meta_train = 0.0;
  double meta_train_ac = 0.0;
  double meta_train_cc = 0.0;
  double meta_train_lc = 0.0;
  double meta_test = 0.0;
  double meta_test_ac = 0.0;
  double meta_test_cc = 0.0;
  double meta_test_lc = 0.0;
  double gradient_norm = 0.0;
  std::vector<std::string> train_specs;
  std::string holdout_spec;
};

/// Owns the outer optimizer state for one student.
class MidTrainer {
 public:
  MidTrainer(StudentEncoder& student, const TeacherModel& teacher, MetaConfig config);

  /// One meta iteration on `benign`: fresh meta split, fresh adversarial
  /// batches, bi-level gradient, outer step.
  MetaStepReport meta_update(const ImageBatch& benign, const AttackerPool& pool,
                             std::mt19937_64& rng);

  const MetaConfig& config() const { return config_; }

 private:
  StudentEncoder* student_;
  const TeacherModel* teacher_;
  MetaConfig config_;
  Optimizer optimizer_;
  int64_t iteration_ = 0;
};

struct MidEpochSummary {
  int epoch = 0;
  double meta_train = 0.0;
  double meta_test = 0.0;
  double sparsity_index = 0.0;
};

struct MidHooks {
  std::function<void(const MetaStepReport&)> on_step;
  std::function<void(const MidEpochSummary&, const StudentEncoder&)> on_epoch;
  /// Called with the student state before an error propagates.
  std::function<void(const StudentEncoder&)> on_failure;
};

struct MidResult {
  std::vector<MetaStepReport> history;
  std::vector<MidEpochSummary> epochs;
};

MidResult train_mid(StudentEncoder& student, const TeacherModel& teacher, const Split& train,
                    const AttackerPool& pool, const MetaConfig& config,
                    const MidHooks& hooks = {});

/// Cosine similarity of two flattened gradient lists.
double gradient_cosine(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b);

/// Cosine between ∇_θ of the consistency loss under spec_a and spec_b. Both
/// adversarial batches are drawn with the same seed.
double gradient_alignment(const StudentEncoder& student, const TeacherModel& teacher,
                          const ImageBatch& batch, const AttackSpec& spec_a,
                          const AttackSpec& spec_b, const MetaConfig& config, uint64_t seed);

/// Mean over unordered pairs of the pool's adversarial specs.
double mean_pool_alignment(const StudentEncoder& student, const TeacherModel& teacher,
                           const ImageBatch& batch, const AttackerPool& pool,
                           const MetaConfig& config, uint64_t seed);

/// First-order expansion of the bi-level objective J_a(θ) + J_b(θ − α∇J_a):
///   expansion = J_a + J_b − α ⟨∇J_b, ∇J_a⟩, residual = objective − expansion.
struct TaylorDiagnostic {
  double objective = 0.0;
  double expansion = 0.0;
  double residual = 0.0;
  double gradient_inner_product = 0.0;
};

TaylorDiagnostic taylor_diagnostic(const ParamSet& params, const ParamLoss& known,
                                   const ParamLoss& unknown, double alpha);

}  // namespace mid
