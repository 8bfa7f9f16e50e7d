#include "mid/meta_defense.hpp"

#include <cmath>

#include "mid/analysis.hpp"
#include "mid/error.hpp"

namespace mid {

namespace F = torch::nn::functional;

FeatureDistribution feature_distribution(const torch::Tensor& features, double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  if (!torch::isfinite(features).all().item<bool>())
    throw NumericError("feature-distribution", "non-finite features");
  auto flat = features.dim() == 1 ? features.unsqueeze(0) : features.flatten(1);
  return {torch::softmax(flat / temperature, 1), temperature};
}

torch::Tensor kl_divergence(const FeatureDistribution& p, const FeatureDistribution& q,
                            double smoothing) {
  if (p.probs.sizes() != q.probs.sizes())
    throw ShapeError("kl_divergence: distributions of different shape");
  if (!(smoothing >= 0.0 && smoothing < 1.0))
    throw InvalidArgument("kl smoothing must be in [0, 1)");
  const double dim = static_cast<double>(q.probs.size(1));
  auto qs = q.probs * (1.0 - smoothing) + smoothing / dim;
  return (torch::xlogy(p.probs, p.probs) - p.probs * torch::log(qs)).sum(1);
}

void MetaConfig::validate() const {
  if (!(weights.ac >= 0.0 && weights.cc >= 0.0 && weights.lc >= 0.0))
    throw InvalidArgument("consistency weights must be >= 0");
  if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be >= 0");
  if (!(beta >= 0.0)) throw InvalidArgument("beta must be >= 0");
  if (!(gamma > 0.0)) throw InvalidArgument("gamma must be > 0");
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  if (!(kl_smoothing >= 0.0 && kl_smoothing < 1.0))
    throw InvalidArgument("kl_smoothing must be in [0, 1)");
  if (epochs < 0) throw InvalidArgument("epochs must be >= 0");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
}

namespace {

void check_aligned(const ImageBatch& benign, const AdversarialSet& adversarial) {
  if (adversarial.images.empty()) throw InvalidArgument("no adversarial batches");
  if (adversarial.names.size() != adversarial.images.size())
    throw ShapeError("adversarial set: names and batches differ in count");
  for (std::size_t n = 0; n < adversarial.images.size(); ++n)
    if (adversarial.images[n].sizes() != benign.images.sizes())
      throw ShapeError("adversarial batch '" + adversarial.names[n] +
                       "' is not aligned with the benign batch");
}

torch::Tensor teacher_distribution(const TeacherModel& teacher, const torch::Tensor& images,
                                   double temperature) {
  torch::NoGradGuard no_grad;
  return feature_distribution(teacher.encoder().forward(images, Mode::Eval), temperature).probs;
}

// Sum over attacks of per-attack sample means of KL(p_t ‖ p(features_n)).
torch::Tensor kl_sum(const torch::Tensor& teacher_probs, const std::vector<torch::Tensor>& chunks,
                     double temperature, double smoothing) {
  torch::Tensor total;
  for (const auto& features : chunks) {
    auto kl = kl_divergence({teacher_probs, temperature}, feature_distribution(features, temperature),
                            smoothing)
                  .mean();
    total = total.defined() ? total + kl : kl;
  }
  return total;
}

torch::Tensor regenerated_features(const TeacherModel& teacher, const torch::Tensor& features) {
  return teacher.encoder().forward(teacher.decoder().forward(features, Mode::Eval), Mode::Eval);
}

std::vector<torch::Tensor> student_features(const StudentView& student,
                                            const AdversarialSet& adversarial) {
  auto all = student.features(torch::cat(adversarial.images, 0));
  return all.chunk(static_cast<int64_t>(adversarial.images.size()), 0);
}

torch::Tensor lc_sum(const ClassifierHead& head, const std::vector<torch::Tensor>& chunks,
                     const torch::Tensor& labels) {
  if (labels.numel() > 0 &&
      (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= head.num_classes()))
    throw InvalidArgument("label_consistency: label outside [0, num_classes)");
  torch::Tensor total;
  for (const auto& features : chunks) {
    auto ce = F::cross_entropy(head.forward(features), labels);
    total = total.defined() ? total + ce : ce;
  }
  return total;
}

ParamSet detached(const ParamSet& set) {
  ParamSet out;
  for (const auto& [k, v] : set) out.add(k, v.detach());
  return out;
}

std::vector<torch::Tensor> gradients_or_zero(const torch::Tensor& loss,
                                             const std::vector<torch::Tensor>& inputs,
                                             bool retain_graph, bool create_graph) {
  auto grads = torch::autograd::grad({loss}, inputs, {}, retain_graph, create_graph,
                                     /*allow_unused=*/true);
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].defined()) grads[i] = torch::zeros_like(inputs[i]);
  return grads;
}

void check_gradients(const std::vector<torch::Tensor>& grads, const std::string& stage) {
  for (const auto& g : grads)
    if (!torch::isfinite(g).all().item<bool>()) throw NumericError(stage, "non-finite gradient");
}

}  // namespace

torch::Tensor adversarial_consistency(const TeacherModel& teacher, const StudentView& student,
                                      const ImageBatch& benign, const AdversarialSet& adversarial,
                                      double temperature, double smoothing) {
  check_aligned(benign, adversarial);
  return kl_sum(teacher_distribution(teacher, benign.images, temperature),
                student_features(student, adversarial), temperature, smoothing);
}

torch::Tensor cyclic_consistency(const TeacherModel& teacher, const StudentView& student,
                                 const ImageBatch& benign, const AdversarialSet& adversarial,
                                 double temperature, double smoothing) {
  check_aligned(benign, adversarial);
  std::vector<torch::Tensor> regenerated;
  for (const auto& f : student_features(student, adversarial))
    regenerated.push_back(regenerated_features(teacher, f));
  return kl_sum(teacher_distribution(teacher, benign.images, temperature), regenerated,
                temperature, smoothing);
}

torch::Tensor label_consistency(const ClassifierHead& teacher_head, const StudentView& student,
                                const AdversarialSet& adversarial, const torch::Tensor& labels) {
  if (adversarial.images.empty()) throw InvalidArgument("no adversarial batches");
  for (const auto& images : adversarial.images)
    if (images.size(0) != labels.size(0))
      throw ShapeError("label_consistency: labels not aligned with adversarial batch");
  return lc_sum(teacher_head, student_features(student, adversarial), labels);
}

ConsistencyParts consistency_parts(const TeacherModel& teacher, const StudentView& student,
                                   const ImageBatch& benign, const AdversarialSet& adversarial,
                                   const MetaConfig& config) {
  check_aligned(benign, adversarial);
  const auto& w = config.weights;
  auto chunks = student_features(student, adversarial);
  auto p_teacher = teacher_distribution(teacher, benign.images, config.temperature);

  ConsistencyParts parts;
  {
    std::optional<torch::NoGradGuard> guard;
    if (w.ac == 0.0) guard.emplace();
    parts.ac = kl_sum(p_teacher, chunks, config.temperature, config.kl_smoothing);
  }
  {
    std::optional<torch::NoGradGuard> guard;
    if (w.cc == 0.0) guard.emplace();
    std::vector<torch::Tensor> regenerated;
    // One decoder/encoder pass over all attacks at once.
    auto joined = regenerated_features(teacher, torch::cat(chunks, 0));
    regenerated = joined.chunk(static_cast<int64_t>(chunks.size()), 0);
    parts.cc = kl_sum(p_teacher, regenerated, config.temperature, config.kl_smoothing);
  }
  {
    std::optional<torch::NoGradGuard> guard;
    if (w.lc == 0.0) guard.emplace();
    parts.lc = lc_sum(teacher.head(), chunks, benign.labels);
  }
  parts.total = w.ac * parts.ac + w.cc * parts.cc + w.lc * parts.lc;
  return parts;
}

AdversarialSet generate_adversarial_set(const TeacherModel& teacher, const Encoder& student,
                                        const ImageBatch& benign,
                                        const std::vector<AttackSpec>& specs,
                                        std::mt19937_64& rng) {
  if (specs.empty()) throw InvalidArgument("attack spec list is empty");
  Encoder snapshot(student.spec(), detached(student.params()), student.buffers());
  auto model = logits_fn(snapshot, teacher.head());
  AdversarialSet out;
  for (const auto& spec : specs) {
    out.names.push_back(spec.name());
    out.images.push_back(
        generate(spec, model, benign, teacher.head().num_classes(), rng).images.detach());
  }
  return out;
}

ConsistencyParts consistency_loss(const TeacherModel& teacher, const StudentEncoder& student,
                                  const ImageBatch& benign, const std::vector<AttackSpec>& specs,
                                  const MetaConfig& config, std::mt19937_64& rng) {
  auto adversarial = generate_adversarial_set(teacher, student.encoder(), benign, specs, rng);
  return consistency_parts(teacher, StudentView{student.encoder(), student.params(), Mode::Train},
                           benign, adversarial, config);
}

ParamSet inner_step(const ParamSet& params, const torch::Tensor& loss, double alpha,
                    bool create_graph) {
  if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be >= 0");
  auto tensors = params.tensors();
  auto grads = gradients_or_zero(loss, tensors, /*retain_graph=*/true, create_graph);
  check_gradients(grads, "inner-step");
  std::vector<torch::Tensor> updated;
  updated.reserve(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i)
    updated.push_back(tensors[i] - alpha * (create_graph ? grads[i] : grads[i].detach()));
  return params.with_tensors(updated);
}

MetaGradient meta_gradient(const ParamSet& params, const ParamLoss& meta_train,
                           const ParamLoss& meta_test, double alpha, double beta,
                           bool second_order) {
  for (const auto& [name, t] : params)
    if (!t.requires_grad()) throw InvalidArgument("meta_gradient: '" + name + "' is not a leaf");
  MetaGradient out;
  out.meta_train_loss = meta_train(params);
  check_finite(out.meta_train_loss, "meta-train");
  auto temporary = inner_step(params, out.meta_train_loss, alpha, second_order);
  out.meta_test_loss = meta_test(temporary);
  check_finite(out.meta_test_loss, "meta-test");
  auto total = out.meta_train_loss + beta * out.meta_test_loss;
  out.gradient = gradients_or_zero(total, params.tensors(), false, false);
  check_gradients(out.gradient, "meta-update");
  return out;
}

MidTrainer::MidTrainer(StudentEncoder& student, const TeacherModel& teacher, MetaConfig config)
    : student_(&student),
      teacher_(&teacher),
      config_(config),
      optimizer_([&]() -> Optimizer {
        config.validate();
        if (!teacher.frozen()) throw InvalidArgument("teacher must be frozen before MID training");
        for (auto& [_, t] : student.params()) t = t.detach().clone().requires_grad_(true);
        return Optimizer(config.optimizer, student.params().tensors(), config.gamma);
      }()) {}

MetaStepReport MidTrainer::meta_update(const ImageBatch& benign, const AttackerPool& pool,
                                       std::mt19937_64& rng) {
  auto split = sample_meta_split(pool, rng);
  const auto& encoder = student_->encoder();
  auto train_set = generate_adversarial_set(*teacher_, encoder, benign, split.train, rng);
  auto test_set = generate_adversarial_set(*teacher_, encoder, benign, {split.holdout}, rng);

  ConsistencyParts train_parts;
  ConsistencyParts test_parts;
  auto meta_train = [&](const ParamSet& p) {
    train_parts = consistency_parts(*teacher_, StudentView{encoder, p, Mode::Train}, benign,
                                    train_set, config_);
    return train_parts.total;
  };
  auto meta_test = [&](const ParamSet& p) {
    test_parts = consistency_parts(*teacher_, StudentView{encoder, p, Mode::Train}, benign,
                                   test_set, config_);
    return test_parts.total;
  };
  auto mg = meta_gradient(student_->params(), meta_train, meta_test, config_.alpha, config_.beta,
                          config_.second_order);
  optimizer_.step(mg.gradient);

  MetaStepReport report;
  report.iteration = ++iteration_;
  report.meta_train = mg.meta_train_loss.item<double>();
  report.meta_train_ac = train_parts.ac.item<double>();
  report.meta_train_cc = train_parts.cc.item<double>();
  report.meta_train_lc = train_parts.lc.item<double>();
  report.meta_test = mg.meta_test_loss.item<double>();
  report.meta_test_ac = test_parts.ac.item<double>();
  report.meta_test_cc = test_parts.cc.item<double>();
  report.meta_test_lc = test_parts.lc.item<double>();
  report.gradient_norm = flatten_tensors(mg.gradient).norm().item<double>();
  for (const auto& s : split.train) report.train_specs.push_back(s.name());
  report.holdout_spec = split.holdout.name();
  return report;
}

MidResult train_mid(StudentEncoder& student, const TeacherModel& teacher, const Split& train,
                    const AttackerPool& pool, const MetaConfig& config, const MidHooks& hooks) {
  config.validate();
  pool.validate();
  if (!teacher.frozen()) throw InvalidArgument("teacher must be frozen before MID training");
  MidResult result;
  if (config.epochs == 0) return result;
  if (train.size() == 0) throw InvalidArgument("empty training split");

  const auto teacher_hash = teacher.hash();
  MidTrainer trainer(student, teacher, config);
  BatchIterator batches(train, config.batch_size, derive_seed(config.seed, "mid.batches"));
  std::mt19937_64 rng(derive_seed(config.seed, "mid.attacks"));

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    MidEpochSummary summary;
    summary.epoch = epoch;
    int64_t steps = 0;
    for (const auto& indices : batches.epoch(epoch)) {
      MetaStepReport report;
      try {
        report = trainer.meta_update(batches.batch(indices), pool, rng);
      } catch (...) {
        if (hooks.on_failure) hooks.on_failure(student);
        throw;
      }
      report.epoch = epoch;
      summary.meta_train += report.meta_train;
      summary.meta_test += report.meta_test;
      ++steps;
      if (hooks.on_step) hooks.on_step(report);
      result.history.push_back(std::move(report));
    }
    summary.meta_train /= static_cast<double>(steps);
    summary.meta_test /= static_cast<double>(steps);
    summary.sparsity_index = sparsity_index(student.params());
    if (hooks.on_epoch) hooks.on_epoch(summary, student);
    result.epochs.push_back(summary);
  }
  for (auto& [_, t] : student.params()) t = t.detach();
  if (teacher.hash() != teacher_hash)
    throw Error("teacher parameters changed during MID training");
  return result;
}

double gradient_cosine(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  auto fa = flatten_tensors(a).to(torch::kFloat64);
  auto fb = flatten_tensors(b).to(torch::kFloat64);
  if (fa.numel() != fb.numel()) throw ShapeError("gradient_cosine: length mismatch");
  const double na = fa.norm().item<double>();
  const double nb = fb.norm().item<double>();
  if (na == 0.0 || nb == 0.0) throw NumericError("gradient-alignment", "zero-norm gradient");
  return std::clamp(fa.dot(fb).item<double>() / (na * nb), -1.0, 1.0);
}

double gradient_alignment(const StudentEncoder& student, const TeacherModel& teacher,
                          const ImageBatch& batch, const AttackSpec& spec_a,
                          const AttackSpec& spec_b, const MetaConfig& config, uint64_t seed) {
  auto params = student.params().as_leaves();
  Encoder encoder(student.encoder().spec(), params, student.encoder().buffers().clone());
  auto gradient_for = [&](const AttackSpec& spec) {
    std::mt19937_64 rng(seed);
    auto adversarial = generate_adversarial_set(teacher, encoder, batch, {spec}, rng);
    auto parts = consistency_parts(teacher, StudentView{encoder, params, Mode::Eval}, batch,
                                   adversarial, config);
    return gradients_or_zero(parts.total, params.tensors(), false, false);
  };
  return gradient_cosine(gradient_for(spec_a), gradient_for(spec_b));
}

double mean_pool_alignment(const StudentEncoder& student, const TeacherModel& teacher,
                           const ImageBatch& batch, const AttackerPool& pool,
                           const MetaConfig& config, uint64_t seed) {
  auto specs = pool.adversarial();
  if (specs.size() < 2) throw InvalidArgument("pool alignment needs two adversarial attacks");
  double total = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < specs.size(); ++i)
    for (std::size_t j = i + 1; j < specs.size(); ++j) {
      total += gradient_alignment(student, teacher, batch, specs[i], specs[j], config, seed);
      ++pairs;
    }
  return total / pairs;
}

TaylorDiagnostic taylor_diagnostic(const ParamSet& params, const ParamLoss& known,
                                   const ParamLoss& unknown, double alpha) {
  auto leaves = params.as_leaves();
  auto tensors = leaves.tensors();
  auto j_a = known(leaves);
  auto g_a = gradients_or_zero(j_a, tensors, false, false);
  auto j_b = unknown(leaves);
  auto g_b = gradients_or_zero(j_b, tensors, false, false);

  std::vector<torch::Tensor> shifted;
  for (std::size_t i = 0; i < tensors.size(); ++i)
    shifted.push_back((tensors[i] - alpha * g_a[i]).detach());
  torch::NoGradGuard no_grad;
  TaylorDiagnostic d;
  d.gradient_inner_product = flatten_tensors(g_a).to(torch::kFloat64)
                                 .dot(flatten_tensors(g_b).to(torch::kFloat64))
                                 .item<double>();
  d.objective = j_a.item<double>() + unknown(leaves.with_tensors(shifted)).item<double>();
  d.expansion = j_a.item<double>() + j_b.item<double>() - alpha * d.gradient_inner_product;
  d.residual = d.objective - d.expansion;
  return d;
}

}  // namespace mid
