#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "mid/data.hpp"
#include "mid/models.hpp"

namespace mid {

enum class AttackMethod { Identity, Fgsm, Bim, Pgd, Mim, Cw };
enum class Norm { Linf, L2 };

std::string_view to_string(AttackMethod method);
AttackMethod attack_method_from_string(std::string_view name);

struct AttackSpec {
  AttackMethod method = AttackMethod::Identity;
  bool targeted = false;
  double epsilon = 0.3;  // pixel units
  int steps = 10;
  double step_size = 0.075;  // 2.5 * epsilon / steps
  double momentum_decay = 1.0;
  Norm norm = Norm::Linf;
  bool random_start = true;
  double cw_confidence = 0.0;
  int cw_iterations = 100;
  double cw_penalty = 10.0;
  double cw_learning_rate = 0.01;

  /// Canonical column name, e.g. "PGD_N", "MIM_T", "identity".
  std::string name() const;
  void validate() const;
  bool operator==(const AttackSpec&) const = default;
};

/// Iterative hyperparameters applied when building specs from names.
struct AttackDefaults {
  double epsilon = 0.3;
  int steps = 10;
  double step_size = -1.0;  // < 0 means 2.5 * epsilon / steps
  double momentum_decay = 1.0;
  bool random_start = true;
  double cw_confidence = 0.0;
  int cw_iterations = 100;
  double cw_penalty = 10.0;
  double cw_learning_rate = 0.01;
};

/// Builds a spec from a canonical name ("FGSM_N", "CW_T", "identity", ...).
AttackSpec attack_from_name(std::string_view name, const AttackDefaults& defaults = {});

struct AttackerPool {
  std::vector<AttackSpec> specs;  // identity always present
  uint64_t seed = 0;

  void validate() const;
  std::vector<AttackSpec> adversarial() const;
  std::vector<std::string> names() const;
  bool contains(const std::string& name) const;
};

/// Adds the identity entry when missing and validates.
AttackerPool make_pool(std::vector<AttackSpec> specs, uint64_t seed);

struct TargetAssignment {
  torch::Tensor targets;  // int64 [B]
};

TargetAssignment select_targets(const torch::Tensor& labels, int64_t num_classes,
                                std::mt19937_64& rng);

/// Scalar objective an attack ascends, as a function of the whole batch.
using AttackObjective = std::function<torch::Tensor(const torch::Tensor& images)>;

/// Summed cross-entropy of the true class (non-targeted) or the negated
/// summed cross-entropy of the target class (targeted).
AttackObjective classification_objective(LogitsFn model, torch::Tensor labels,
                                         torch::Tensor targets, bool targeted);

struct SignAscentOptions {
  double epsilon = 0.3;
  int steps = 1;
  double step_size = 0.3;
  double momentum_decay = 0.0;
  bool use_momentum = false;
  bool random_start = false;
  Norm norm = Norm::Linf;
  uint64_t seed = 0;
};

/// Projected steepest ascent on `objective` inside the ε-ball around
/// `images` intersected with [0,1]. Linf steps follow sign(g); L2 steps
/// follow g/‖g‖₂. With momentum the accumulator is g ← μg + ∇/‖∇‖₁.
torch::Tensor projected_ascent(const AttackObjective& objective, const torch::Tensor& images,
                               const SignAscentOptions& options);

// Method entry points. `targets` is required when spec.targeted.
ImageBatch fgsm(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
                const torch::Tensor& targets = {});
ImageBatch bim(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
               const torch::Tensor& targets = {});
ImageBatch pgd(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
               const torch::Tensor& targets = {}, uint64_t seed = 0);
ImageBatch mim(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
               const torch::Tensor& targets = {});

struct CwTrace {
  std::vector<double> objective;  // batch objective after each iteration
};

/// Carlini–Wagner l2 with a fixed trade-off constant. Returns the smallest
/// successful perturbation found per sample, or the input when none was found.
ImageBatch cw(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
              const torch::Tensor& targets = {}, CwTrace* trace = nullptr);

/// Dispatch on spec.method. Draws targets and the random-start seed from rng.
ImageBatch generate(const AttackSpec& spec, const LogitsFn& model, const ImageBatch& batch,
                    int64_t num_classes, std::mt19937_64& rng);

struct MetaSplit {
  std::vector<AttackSpec> train;  // identity + N-1 adversarial specs
  AttackSpec holdout;
};

MetaSplit sample_meta_split(const AttackerPool& pool, std::mt19937_64& rng);

/// Per-sample maximum absolute perturbation and l2 norm.
torch::Tensor linf_distance(const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor l2_distance(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace mid
