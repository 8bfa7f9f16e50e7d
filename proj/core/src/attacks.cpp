#include "mid/attacks.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "mid/error.hpp"

namespace mid {

namespace F = torch::nn::functional;

std::string_view to_string(AttackMethod method) {
  switch (method) {
    case AttackMethod::Identity: return "identity";
    case AttackMethod::Fgsm: return "fgsm";
    case AttackMethod::Bim: return "bim";
    case AttackMethod::Pgd: return "pgd";
    case AttackMethod::Mim: return "mim";
    case AttackMethod::Cw: return "cw";
  }
  return "?";
}

AttackMethod attack_method_from_string(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "benign") return AttackMethod::Identity;
  for (auto m : {AttackMethod::Identity, AttackMethod::Fgsm, AttackMethod::Bim, AttackMethod::Pgd,
                 AttackMethod::Mim, AttackMethod::Cw})
    if (to_string(m) == lower) return m;
  throw InvalidArgument("unknown attack method '" + std::string(name) + "'");
}

std::string AttackSpec::name() const {
  if (method == AttackMethod::Identity) return "identity";
  std::string out(to_string(method));
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  out += targeted ? "_T" : "_N";
  if (norm == Norm::L2 && method != AttackMethod::Cw) out += "_L2";
  return out;
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0)) throw InvalidArgument(name() + ": epsilon must be >= 0");
  if (steps < 1) throw InvalidArgument(name() + ": steps must be >= 1");
  if (epsilon > 0.0 && method != AttackMethod::Fgsm && method != AttackMethod::Identity &&
      method != AttackMethod::Cw && !(step_size > 0.0))
    throw InvalidArgument(name() + ": step_size must be > 0");
  if (!(momentum_decay >= 0.0)) throw InvalidArgument(name() + ": momentum_decay must be >= 0");
  if (method == AttackMethod::Cw) {
    if (cw_iterations < 1) throw InvalidArgument(name() + ": cw_iterations must be >= 1");
    if (!(cw_penalty > 0.0)) throw InvalidArgument(name() + ": cw_penalty must be > 0");
    if (!(cw_confidence >= 0.0)) throw InvalidArgument(name() + ": cw_confidence must be >= 0");
    if (!(cw_learning_rate > 0.0)) throw InvalidArgument(name() + ": cw_learning_rate must be > 0");
  }
}

AttackSpec attack_from_name(std::string_view name, const AttackDefaults& d) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  AttackSpec spec;
  spec.epsilon = d.epsilon;
  spec.steps = d.steps;
  spec.step_size = d.step_size < 0.0 ? 2.5 * d.epsilon / d.steps : d.step_size;
  spec.momentum_decay = d.momentum_decay;
  spec.random_start = false;
  spec.cw_confidence = d.cw_confidence;
  spec.cw_iterations = d.cw_iterations;
  spec.cw_penalty = d.cw_penalty;
  spec.cw_learning_rate = d.cw_learning_rate;
  if (upper == "IDENTITY" || upper == "BENIGN") {
    spec.method = AttackMethod::Identity;
    spec.validate();
    return spec;
  }
  auto parts = std::vector<std::string>{};
  std::size_t start = 0;
  while (start <= upper.size()) {
    auto pos = upper.find('_', start);
    if (pos == std::string::npos) pos = upper.size();
    parts.push_back(upper.substr(start, pos - start));
    start = pos + 1;
  }
  if (parts.size() < 2 || parts.size() > 3 || (parts[1] != "N" && parts[1] != "T") ||
      (parts.size() == 3 && parts[2] != "L2"))
    throw InvalidArgument("attack name '" + std::string(name) +
                          "' is not of the form METHOD_N, METHOD_T or METHOD_N_L2");
  spec.method = attack_method_from_string(parts[0]);
  spec.targeted = parts[1] == "T";
  if (parts.size() == 3) spec.norm = Norm::L2;
  if (spec.method == AttackMethod::Fgsm) {
    spec.steps = 1;
    spec.step_size = spec.epsilon;
  }
  if (spec.method == AttackMethod::Pgd) spec.random_start = d.random_start;
  if (spec.method == AttackMethod::Cw) spec.norm = Norm::L2;
  spec.validate();
  return spec;
}

void AttackerPool::validate() const {
  std::size_t adversarial_count = 0;
  bool has_identity = false;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    specs[i].validate();
    if (specs[i].method == AttackMethod::Identity)
      has_identity = true;
    else
      ++adversarial_count;
    for (std::size_t j = 0; j < i; ++j)
      if (specs[i] == specs[j] || specs[i].name() == specs[j].name())
        throw InvalidArgument("attacker pool: duplicate entry '" + specs[i].name() + "'");
  }
  if (!has_identity) throw InvalidArgument("attacker pool: identity entry missing");
  if (adversarial_count < 2)
    throw InvalidArgument("attacker pool needs at least two non-identity attacks");
}

std::vector<AttackSpec> AttackerPool::adversarial() const {
  std::vector<AttackSpec> out;
  for (const auto& s : specs)
    if (s.method != AttackMethod::Identity) out.push_back(s);
  return out;
}

std::vector<std::string> AttackerPool::names() const {
  std::vector<std::string> out;
  for (const auto& s : specs) out.push_back(s.name());
  return out;
}

bool AttackerPool::contains(const std::string& name) const {
  return std::any_of(specs.begin(), specs.end(), [&](const auto& s) { return s.name() == name; });
}

AttackerPool make_pool(std::vector<AttackSpec> specs, uint64_t seed) {
  const bool has_identity = std::any_of(specs.begin(), specs.end(), [](const auto& s) {
    return s.method == AttackMethod::Identity;
  });
  if (!has_identity) {
    AttackSpec identity;
    identity.method = AttackMethod::Identity;
    specs.insert(specs.begin(), identity);
  }
  AttackerPool pool{std::move(specs), seed};
  pool.validate();
  return pool;
}

TargetAssignment select_targets(const torch::Tensor& labels, int64_t num_classes,
                                std::mt19937_64& rng) {
  if (num_classes < 2) throw InvalidArgument("select_targets: num_classes must be >= 2");
  auto lbl = labels.to(torch::kInt64).contiguous();
  auto out = torch::empty_like(lbl);
  auto src = lbl.accessor<int64_t, 1>();
  auto dst = out.accessor<int64_t, 1>();
  std::uniform_int_distribution<int64_t> pick(0, num_classes - 2);
  for (int64_t i = 0; i < src.size(0); ++i) {
    if (src[i] < 0 || src[i] >= num_classes)
      throw InvalidArgument("select_targets: label outside [0, num_classes)");
    int64_t t = pick(rng);
    if (t >= src[i]) ++t;
    dst[i] = t;
  }
  return {out};
}

AttackObjective classification_objective(LogitsFn model, torch::Tensor labels,
                                         torch::Tensor targets, bool targeted) {
  if (targeted && !targets.defined())
    throw InvalidArgument("targeted attack requires target labels");
  return [model = std::move(model), labels = std::move(labels), targets = std::move(targets),
          targeted](const torch::Tensor& x) {
    auto logits = model(x);
    auto opts = F::CrossEntropyFuncOptions().reduction(torch::kSum);
    if (targeted) return -F::cross_entropy(logits, targets, opts);
    return F::cross_entropy(logits, labels, opts);
  };
}

namespace {

torch::Tensor per_sample(const torch::Tensor& v, const torch::Tensor& like) {
  std::vector<int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[0] = like.size(0);
  return v.view(shape);
}

torch::Tensor l2_norms(const torch::Tensor& t) { return t.flatten(1).norm(2, 1); }

torch::Tensor project(const torch::Tensor& x, const torch::Tensor& origin, double epsilon,
                      Norm norm) {
  torch::Tensor out;
  if (norm == Norm::Linf) {
    out = torch::min(torch::max(x, origin - epsilon), origin + epsilon);
  } else {
    auto delta = x - origin;
    auto n = l2_norms(delta);
    auto scale = torch::clamp_max(epsilon / n.clamp_min(1e-12), 1.0);
    out = origin + delta * per_sample(scale, delta);
  }
  return out.clamp(0.0, 1.0);
}

void check_finite_gradient(const torch::Tensor& grad, const char* stage) {
  if (!torch::isfinite(grad).all().item<bool>())
    throw NumericError(stage, "non-finite input gradient");
}

}  // namespace

torch::Tensor projected_ascent(const AttackObjective& objective, const torch::Tensor& images,
                               const SignAscentOptions& o) {
  torch::NoGradGuard outer;
  const auto origin = images.detach();
  auto x = origin.clone();
  if (o.random_start && o.epsilon > 0.0) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(o.seed);
    if (o.norm == Norm::Linf) {
      x = origin + torch::empty_like(origin).uniform_(-o.epsilon, o.epsilon, gen);
    } else {
      auto dir = torch::empty_like(origin).normal_(0.0, 1.0, gen);
      dir = dir / per_sample(l2_norms(dir).clamp_min(1e-12), dir);
      auto radius = torch::empty({origin.size(0)}, origin.options()).uniform_(0.0, 1.0, gen);
      radius = radius.pow(1.0 / static_cast<double>(origin[0].numel())) * o.epsilon;
      x = origin + dir * per_sample(radius, dir);
    }
    x = project(x, origin, o.epsilon, o.norm);
  }
  auto momentum = torch::zeros_like(origin);
  for (int step = 0; step < o.steps; ++step) {
    torch::Tensor grad;
    {
      torch::AutoGradMode enable(true);
      auto xg = x.detach().requires_grad_(true);
      auto loss = objective(xg);
      grad = torch::autograd::grad({loss}, {xg})[0].detach();
    }
    check_finite_gradient(grad, "attack");
    torch::Tensor direction = grad;
    if (o.use_momentum) {
      auto l1 = grad.abs().flatten(1).sum(1).clamp_min(1e-12);
      momentum = o.momentum_decay * momentum + grad / per_sample(l1, grad);
      direction = momentum;
    }
    if (o.norm == Norm::Linf) {
      x = x + o.step_size * direction.sign();
    } else {
      auto n = l2_norms(direction).clamp_min(1e-12);
      x = x + o.step_size * direction / per_sample(n, direction);
    }
    x = project(x, origin, o.epsilon, o.norm);
  }
  return x;
}

namespace {

AttackObjective objective_for(const LogitsFn& model, const ImageBatch& batch,
                              const AttackSpec& spec, const torch::Tensor& targets) {
  return classification_objective(model, batch.labels, targets, spec.targeted);
}

void expect_method(const AttackSpec& spec, AttackMethod method) {
  spec.validate();
  if (spec.method != method)
    throw InvalidArgument("spec '" + spec.name() + "' passed to " + std::string(to_string(method)));
}

}  // namespace

ImageBatch fgsm(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
                const torch::Tensor& targets) {
  expect_method(spec, AttackMethod::Fgsm);
  SignAscentOptions o;
  o.epsilon = spec.epsilon;
  o.steps = 1;
  o.step_size = spec.epsilon;
  o.norm = spec.norm;
  return {projected_ascent(objective_for(model, batch, spec, targets), batch.images, o),
          batch.labels};
}

ImageBatch bim(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
               const torch::Tensor& targets) {
  expect_method(spec, AttackMethod::Bim);
  SignAscentOptions o;
  o.epsilon = spec.epsilon;
  o.steps = spec.steps;
  o.step_size = spec.step_size;
  o.norm = spec.norm;
  return {projected_ascent(objective_for(model, batch, spec, targets), batch.images, o),
          batch.labels};
}

ImageBatch pgd(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
               const torch::Tensor& targets, uint64_t seed) {
  expect_method(spec, AttackMethod::Pgd);
  SignAscentOptions o;
  o.epsilon = spec.epsilon;
  o.steps = spec.steps;
  o.step_size = spec.step_size;
  o.norm = spec.norm;
  o.random_start = spec.random_start;
  o.seed = seed;
  return {projected_ascent(objective_for(model, batch, spec, targets), batch.images, o),
          batch.labels};
}

ImageBatch mim(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
               const torch::Tensor& targets) {
  expect_method(spec, AttackMethod::Mim);
  SignAscentOptions o;
  o.epsilon = spec.epsilon;
  o.steps = spec.steps;
  o.step_size = spec.step_size;
  o.norm = spec.norm;
  o.use_momentum = true;
  o.momentum_decay = spec.momentum_decay;
  return {projected_ascent(objective_for(model, batch, spec, targets), batch.images, o),
          batch.labels};
}

ImageBatch cw(const LogitsFn& model, const ImageBatch& batch, const AttackSpec& spec,
              const torch::Tensor& targets, CwTrace* trace) {
  expect_method(spec, AttackMethod::Cw);
  if (spec.targeted && !targets.defined())
    throw InvalidArgument("targeted attack requires target labels");
  const auto origin = batch.images.detach();
  const auto goal = spec.targeted ? targets : batch.labels;
  const double kappa = spec.cw_confidence;

  auto w = torch::atanh((origin * 2.0 - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6))
               .detach()
               .requires_grad_(true);
  torch::optim::Adam optimizer({w}, torch::optim::AdamOptions(spec.cw_learning_rate));

  auto best_l2 = torch::full({origin.size(0)}, std::numeric_limits<double>::infinity(),
                             origin.options().dtype(torch::kFloat64));
  auto best = origin.clone();
  torch::Tensor mask;

  for (int it = 0; it <= spec.cw_iterations; ++it) {
    auto adv = (torch::tanh(w) + 1.0) * 0.5;
    auto logits = model(adv);
    if (!mask.defined()) {
      if (goal.max().item<int64_t>() >= logits.size(1))
        throw ShapeError("cw: label outside logits range");
      mask = F::one_hot(goal, logits.size(1)).to(torch::kBool);
    }
    auto goal_logit = logits.masked_select(mask);
    auto other = logits.masked_fill(mask, -std::numeric_limits<double>::infinity()).amax(1);
    // targeted: push the target above the rest; non-targeted: push the label below.
    auto margin = spec.targeted ? other - goal_logit : goal_logit - other;
    auto hinge = torch::clamp_min(margin, -kappa);
    auto l2sq = (adv - origin).pow(2).flatten(1).sum(1);
    auto objective = l2sq + spec.cw_penalty * hinge;
    auto total = objective.sum();
    if (!std::isfinite(total.item<double>())) throw NumericError("cw", "non-finite objective");
    if (trace) trace->objective.push_back(total.item<double>());

    {
      torch::NoGradGuard no_grad;
      auto success = margin <= -kappa;
      auto pred = logits.argmax(1);
      success = success & (spec.targeted ? pred == goal : pred != goal);
      auto l2 = l2sq.sqrt().to(torch::kFloat64);
      auto improved = success & (l2 < best_l2);
      best_l2 = torch::where(improved, l2, best_l2);
      best = torch::where(per_sample(improved, adv), adv.detach(), best);
    }
    if (it == spec.cw_iterations) break;
    auto grad = torch::autograd::grad({total}, {w})[0];
    optimizer.zero_grad();
    w.mutable_grad() = grad.detach();
    optimizer.step();
  }
  return {best.detach(), batch.labels};
}

ImageBatch generate(const AttackSpec& spec, const LogitsFn& model, const ImageBatch& batch,
                    int64_t num_classes, std::mt19937_64& rng) {
  spec.validate();
  const uint64_t seed = rng();
  torch::Tensor targets;
  if (spec.targeted && spec.method != AttackMethod::Identity)
    targets = select_targets(batch.labels, num_classes, rng).targets;
  switch (spec.method) {
    case AttackMethod::Identity: return batch;
    case AttackMethod::Fgsm: return fgsm(model, batch, spec, targets);
    case AttackMethod::Bim: return bim(model, batch, spec, targets);
    case AttackMethod::Pgd: return pgd(model, batch, spec, targets, seed);
    case AttackMethod::Mim: return mim(model, batch, spec, targets);
    case AttackMethod::Cw: return cw(model, batch, spec, targets);
  }
  throw InvalidArgument("unknown attack method");
}

MetaSplit sample_meta_split(const AttackerPool& pool, std::mt19937_64& rng) {
  pool.validate();
  auto adversarial = pool.adversarial();
  std::uniform_int_distribution<std::size_t> pick(0, adversarial.size() - 1);
  const std::size_t holdout = pick(rng);
  MetaSplit split;
  for (const auto& s : pool.specs)
    if (s.method == AttackMethod::Identity) split.train.push_back(s);
  for (std::size_t i = 0; i < adversarial.size(); ++i) {
    if (i == holdout)
      split.holdout = adversarial[i];
    else
      split.train.push_back(adversarial[i]);
  }
  return split;
}

torch::Tensor linf_distance(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).abs().flatten(1).amax(1);
}

torch::Tensor l2_distance(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).flatten(1).norm(2, 1);
}

}  // namespace mid
