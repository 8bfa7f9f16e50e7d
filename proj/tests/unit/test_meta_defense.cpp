#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "mid/analysis.hpp"
#include "mid/error.hpp"
#include "mid/meta_defense.hpp"

using namespace mid;

namespace {

constexpr double kKlHalfQuarter = 0.14384103622589045;  // KL([.5,.5] ‖ [.25,.75])

void set_fc2(Encoder& encoder, double second_bias) {
  torch::NoGradGuard guard;
  encoder.params().at("fc2.weight").zero_();
  encoder.params().at("fc2.bias").zero_();
  encoder.params().at("fc2.bias")[1] = second_bias;
}

// Teacher features are 0, student features [0, 0.5]; with τ = 0.5/ln 3 the
// student distribution is [1/4, 3/4] and the teacher's is uniform.
struct ToySetup {
  EncoderSpec spec = fixtures::tiny_spec(2, {1, 4, 4});
  TeacherModel teacher;
  Encoder student;
  ImageBatch benign;
  AdversarialSet adversarial;
  MetaConfig config;

  ToySetup()
      : teacher(Encoder(spec, 1), ClassifierHead(2, 10, 2), Decoder(spec, 3)),
        student(spec, 4) {
    set_fc2(teacher.mutable_encoder(), 0.0);
    {
      torch::NoGradGuard guard;
      for (auto& [_, t] : teacher.mutable_head().params()) t.zero_();
    }
    teacher.freeze();
    set_fc2(student, std::atanh(0.5));
    benign = {fixtures::random_images(6, spec.input_shape, 5), fixtures::random_labels(6, 10, 6)};
    adversarial = {{"PGD_N"}, {fixtures::random_images(6, spec.input_shape, 7)}};
    config.temperature = 0.5 / std::log(3.0);
    config.kl_smoothing = 0.0;
  }
};

// Double-precision teacher/student pair with nonzero gradients everywhere.
struct SmoothSetup {
  EncoderSpec spec = fixtures::tiny_spec(4, {1, 4, 4});
  TeacherModel teacher = fixtures::tiny_teacher(spec, 3, 11, torch::kFloat64);
  Encoder student{spec, 21, torch::kFloat64};
  ImageBatch benign{fixtures::random_images(4, spec.input_shape, 31, torch::kFloat64),
                    fixtures::random_labels(4, 3, 32)};
  AdversarialSet known{{"identity", "PGD_N"},
                       {benign.images, fixtures::random_images(4, spec.input_shape, 33,
                                                              torch::kFloat64)}};
  AdversarialSet unknown{{"MIM_N"},
                         {fixtures::random_images(4, spec.input_shape, 34, torch::kFloat64)}};
  MetaConfig config;

  ParamLoss loss_on(const AdversarialSet& set) const {
    return [this, &set](const ParamSet& p) {
      return consistency_parts(teacher, StudentView{student, p, Mode::Train}, benign, set, config)
          .total;
    };
  }
};

torch::Tensor scalar_loss(const ParamSet& p, const torch::Tensor& a, const torch::Tensor& c) {
  auto t = p.at("theta");
  return 0.5 * (a * (t - c).pow(2)).sum();
}

}  // namespace

TEST(FeatureDistribution, SoftmaxWithTemperature) {
  auto p = feature_distribution(torch::tensor({{0.0, std::log(3.0)}}, torch::kFloat64), 1.0);
  EXPECT_TRUE(p.probs.allclose(torch::tensor({{0.25, 0.75}}, torch::kFloat64)));
  auto flat = feature_distribution(torch::zeros({2, 3, 2}), 2.0);
  EXPECT_EQ(flat.probs.sizes(), (std::vector<int64_t>{2, 6}));
  EXPECT_THROW(feature_distribution(torch::tensor({{std::nan(""), 0.0}})), NumericError);
}

TEST(KlDivergence, KnownValue) {
  FeatureDistribution p{torch::tensor({{0.5, 0.5}}, torch::kFloat64)};
  FeatureDistribution q{torch::tensor({{0.25, 0.75}}, torch::kFloat64)};
  EXPECT_NEAR(kl_divergence(p, q, 0.0).item<double>(), kKlHalfQuarter, 1e-12);
  EXPECT_NEAR(kl_divergence(p, q, 1e-6).item<double>(), kKlHalfQuarter, 1e-5);
}

TEST(KlDivergence, NonNegativeAndZeroOnSelf) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  for (int i = 0; i < 50; ++i) {
    auto a = torch::randn({20, 7}, gen, torch::kFloat64) * 3;
    auto b = torch::randn({20, 7}, gen, torch::kFloat64) * 3;
    auto p = feature_distribution(a), q = feature_distribution(b);
    EXPECT_GE(kl_divergence(p, q).min().item<double>(), -1e-12);
    EXPECT_LE(kl_divergence(p, p, 0.0).abs().max().item<double>(), 1e-12);
  }
}

TEST(KlDivergence, ZeroProbabilityTermsContributeNothing) {
  FeatureDistribution p{torch::tensor({{0.0, 1.0}}, torch::kFloat64)};
  FeatureDistribution q{torch::tensor({{0.5, 0.5}}, torch::kFloat64)};
  EXPECT_NEAR(kl_divergence(p, q, 0.0).item<double>(), std::log(2.0), 1e-12);
  FeatureDistribution r{torch::tensor({{1.0, 0.0}}, torch::kFloat64)};
  EXPECT_TRUE(std::isfinite(kl_divergence(p, r, 1e-6).item<double>()));
}

TEST(Consistency, AdversarialTermOnToyModel) {
  ToySetup s;
  auto ac = adversarial_consistency(s.teacher, {s.student, s.student.params()}, s.benign,
                                    s.adversarial, s.config.temperature, 0.0);
  EXPECT_NEAR(ac.item<double>(), kKlHalfQuarter, 1e-6);
  // Two attacks sum.
  AdversarialSet twice{{"a", "b"}, {s.adversarial.images[0], s.adversarial.images[0]}};
  auto ac2 = adversarial_consistency(s.teacher, {s.student, s.student.params()}, s.benign, twice,
                                     s.config.temperature, 0.0);
  EXPECT_NEAR(ac2.item<double>(), 2 * kKlHalfQuarter, 1e-6);
}

TEST(Consistency, LabelTermWithZeroHeadIsLogK) {
  ToySetup s;
  auto lc = label_consistency(s.teacher.head(), {s.student, s.student.params()}, s.adversarial,
                              s.benign.labels);
  EXPECT_NEAR(lc.item<double>(), std::log(10.0), 1e-6);
}

TEST(Consistency, PartsAgreeWithSeparateTerms) {
  ToySetup s;
  s.config.weights = {0.5, 2.0, 3.0};
  StudentView view{s.student, s.student.params()};
  auto parts = consistency_parts(s.teacher, view, s.benign, s.adversarial, s.config);
  auto cc = cyclic_consistency(s.teacher, view, s.benign, s.adversarial, s.config.temperature, 0.0);
  EXPECT_NEAR(parts.ac.item<double>(), kKlHalfQuarter, 1e-6);
  EXPECT_NEAR(parts.cc.item<double>(), cc.item<double>(), 1e-6);
  EXPECT_NEAR(parts.lc.item<double>(), std::log(10.0), 1e-6);
  EXPECT_NEAR(parts.total.item<double>(),
              0.5 * kKlHalfQuarter + 2.0 * cc.item<double>() + 3.0 * std::log(10.0), 1e-5);
}

TEST(Consistency, MisalignedBatchesRejected) {
  ToySetup s;
  AdversarialSet bad{{"x"}, {fixtures::random_images(5, s.spec.input_shape, 1)}};
  StudentView view{s.student, s.student.params()};
  EXPECT_THROW(consistency_parts(s.teacher, view, s.benign, bad, s.config), ShapeError);
  EXPECT_THROW(consistency_parts(s.teacher, view, s.benign, {}, s.config), InvalidArgument);
}

TEST(Consistency, CyclicGradientMatchesFiniteDifferences) {
  SmoothSetup s;
  s.config.weights = {0.0, 1.0, 0.0};
  auto params = s.student.params().as_leaves();
  auto loss = s.loss_on(s.known);
  auto grads = torch::autograd::grad({loss(params)}, params.tensors());
  auto flat = flatten_tensors(grads);
  auto base = flatten_tensors(params.tensors()).detach();
  const double h = 1e-6;
  torch::NoGradGuard guard;
  for (int64_t i = 0; i < base.numel(); i += 17) {
    auto plus = base.clone(), minus = base.clone();
    plus[i] += h;
    minus[i] -= h;
    auto unflatten = [&](const torch::Tensor& v) {
      std::vector<torch::Tensor> out;
      int64_t offset = 0;
      for (const auto& t : params.tensors()) {
        out.push_back(v.narrow(0, offset, t.numel()).view(t.sizes()));
        offset += t.numel();
      }
      return params.with_tensors(out);
    };
    double fd = (loss(unflatten(plus)).item<double>() - loss(unflatten(minus)).item<double>()) /
                (2 * h);
    EXPECT_NEAR(flat[i].item<double>(), fd, 1e-6 + 1e-5 * std::abs(fd)) << i;
  }
}

TEST(InnerStep, PlainGradientDescent) {
  ParamSet p;
  p.add("theta", torch::tensor({1.0}, torch::kFloat64).requires_grad_());
  auto loss = 0.5 * p.at("theta").pow(2).sum();
  auto next = inner_step(p, loss, 0.1, false);
  EXPECT_NEAR(next.at("theta").item<double>(), 0.9, 1e-12);
  // dθ'/dθ is 1 when the inner gradient is a constant and 1 − α otherwise.
  auto first = torch::autograd::grad({next.at("theta").sum()}, {p.at("theta")})[0];
  EXPECT_NEAR(first.item<double>(), 1.0, 1e-12);
  auto graph = inner_step(p, 0.5 * p.at("theta").pow(2).sum(), 0.1, true);
  auto second = torch::autograd::grad({graph.at("theta").sum()}, {p.at("theta")})[0];
  EXPECT_NEAR(second.item<double>(), 0.9, 1e-12);
}

TEST(MetaGradient, QuadraticMatchesAnalyticForm) {
  const auto a1 = torch::tensor({2.0, 0.5, 3.0}, torch::kFloat64);
  const auto c1 = torch::tensor({1.0, -1.0, 0.5}, torch::kFloat64);
  const auto a2 = torch::tensor({1.5, 4.0, 0.25}, torch::kFloat64);
  const auto c2 = torch::tensor({-0.5, 2.0, 1.0}, torch::kFloat64);
  const double alpha = 0.1, beta = 0.7;
  ParamSet p;
  p.add("theta", torch::tensor({0.3, 0.2, -0.4}, torch::kFloat64).requires_grad_());
  auto mg = meta_gradient(
      p, [&](const ParamSet& q) { return scalar_loss(q, a1, c1); },
      [&](const ParamSet& q) { return scalar_loss(q, a2, c2); }, alpha, beta, true);
  auto theta = p.at("theta").detach();
  auto g1 = a1 * (theta - c1);
  auto shifted = theta - alpha * g1;
  auto g2 = a2 * (shifted - c2);
  auto expected = g1 + beta * (1 - alpha * a1) * g2;
  EXPECT_LE((mg.gradient[0] - expected).abs().max().item<double>(), 1e-6);

  auto first = meta_gradient(
      p, [&](const ParamSet& q) { return scalar_loss(q, a1, c1); },
      [&](const ParamSet& q) { return scalar_loss(q, a2, c2); }, alpha, beta, false);
  EXPECT_LE((first.gradient[0] - (g1 + beta * g2)).abs().max().item<double>(), 1e-6);
}

TEST(MetaGradient, SecondOrderMatchesFiniteDifferences) {
  SmoothSetup s;
  const double alpha = 0.5, beta = 0.8;
  auto params = s.student.params().as_leaves();
  ASSERT_LE(params.numel(), 1000);
  auto train = s.loss_on(s.known);
  auto test = s.loss_on(s.unknown);
  auto mg = meta_gradient(params, train, test, alpha, beta, true);
  auto analytic = flatten_tensors(mg.gradient);

  auto objective = [&](const torch::Tensor& flat) {
    std::vector<torch::Tensor> tensors;
    int64_t offset = 0;
    for (const auto& t : params.tensors()) {
      tensors.push_back(flat.narrow(0, offset, t.numel()).view(t.sizes()).clone());
      offset += t.numel();
    }
    auto q = params.with_tensors(tensors).as_leaves();
    auto l = train(q);
    auto shifted = inner_step(q, l, alpha, false);
    return l.item<double>() + beta * test(shifted).item<double>();
  };
  auto base = flatten_tensors(params.tensors()).detach();
  auto numeric = torch::zeros_like(base);
  const double h = 1e-5;
  for (int64_t i = 0; i < base.numel(); ++i) {
    auto plus = base.clone(), minus = base.clone();
    plus[i] += h;
    minus[i] -= h;
    numeric[i] = (objective(plus) - objective(minus)) / (2 * h);
  }
  double rel = ((analytic - numeric).norm() / numeric.norm()).item<double>();
  EXPECT_LE(rel, 1e-3);

  auto fo = flatten_tensors(meta_gradient(params, train, test, alpha, beta, false).gradient);
  EXPECT_GT(((fo - numeric).norm() / numeric.norm()).item<double>(), rel);
}

TEST(MetaGradient, OrdersAgreeWithoutInnerStep) {
  SmoothSetup s;
  auto params = s.student.params().as_leaves();
  auto so = meta_gradient(params, s.loss_on(s.known), s.loss_on(s.unknown), 0.0, 1.0, true);
  auto fo = meta_gradient(params, s.loss_on(s.known), s.loss_on(s.unknown), 0.0, 1.0, false);
  EXPECT_LE((flatten_tensors(so.gradient) - flatten_tensors(fo.gradient)).abs().max().item<double>(),
            1e-10);
}

TEST(MetaGradient, RequiresLeaves) {
  ParamSet p;
  p.add("theta", torch::tensor({1.0}));
  auto loss = [](const ParamSet& q) { return q.at("theta").pow(2).sum(); };
  EXPECT_THROW(meta_gradient(p, loss, loss, 0.1, 1.0, true), InvalidArgument);
}

TEST(Taylor, ResidualShrinksQuadraticallyInAlpha) {
  ParamSet p;
  p.add("theta", torch::tensor({0.3, -0.2, 0.5}, torch::kFloat64));
  ParamLoss known = [](const ParamSet& q) { return (q.at("theta") * 2).sin().sum(); };
  ParamLoss unknown = [](const ParamSet& q) { return q.at("theta").exp().sum(); };
  double previous = 0.0;
  for (double alpha : {0.1, 0.05, 0.025}) {
    auto d = taylor_diagnostic(p, known, unknown, alpha);
    EXPECT_NEAR(d.residual, d.objective - d.expansion, 1e-15);
    if (previous != 0.0) EXPECT_GE(std::abs(previous / d.residual), 3.5);
    previous = d.residual;
  }
}

TEST(Alignment, CosineBounds) {
  std::vector<torch::Tensor> a{torch::tensor({1.0, 2.0}), torch::tensor({3.0})};
  std::vector<torch::Tensor> b{-a[0], -a[1]};
  EXPECT_NEAR(gradient_cosine(a, a), 1.0, 1e-12);
  EXPECT_NEAR(gradient_cosine(a, b), -1.0, 1e-12);
  EXPECT_THROW(gradient_cosine(a, {torch::zeros({2}), torch::zeros({1})}), NumericError);
}

TEST(Alignment, IdenticalSpecsAreFullyAligned) {
  auto spec = fixtures::tiny_spec(4, {1, 4, 4});
  auto teacher = fixtures::tiny_teacher(spec, 3, 1);
  auto student = StudentEncoder::random(spec, 2);
  ImageBatch batch{fixtures::random_images(8, spec.input_shape, 3), fixtures::random_labels(8, 3, 4)};
  auto pgd = attack_from_name("PGD_N");
  EXPECT_NEAR(gradient_alignment(student, teacher, batch, pgd, pgd, {}, 5), 1.0, 1e-6);
  double mixed = gradient_alignment(student, teacher, batch, pgd, attack_from_name("FGSM_T"), {}, 5);
  EXPECT_LT(mixed, 1.0);
  EXPECT_GE(mixed, -1.0);
}

TEST(MetaConfig, Validation) {
  MetaConfig c;
  EXPECT_NO_THROW(c.validate());
  c.gamma = 0.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.temperature = -1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.weights.lc = -1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

class TrainMid : public ::testing::Test {
 protected:
  Dataset data = fixtures::striped_dataset(96, 32, 3, 1);
  EncoderSpec spec = fixtures::tiny_spec(4, data.spec().image_shape);
  TeacherModel teacher = fixtures::tiny_teacher(spec, 3, 2);
  AttackerPool pool = make_pool({attack_from_name("PGD_N"), attack_from_name("PGD_T"),
                                 attack_from_name("MIM_N")},
                                7);
  MetaConfig config = [] {
    MetaConfig c;
    c.epochs = 2;
    c.batch_size = 32;
    c.alpha = 0.05;
    c.gamma = 0.05;
    c.seed = 9;
    return c;
  }();
};

TEST_F(TrainMid, ZeroEpochsLeavesStudentUnchanged) {
  auto student = StudentEncoder::from_teacher(teacher);
  config.epochs = 0;
  auto result = train_mid(student, teacher, data.train(), pool, config);
  EXPECT_TRUE(result.history.empty());
  EXPECT_TRUE(student.params().identical(teacher.encoder().params()));
}

TEST_F(TrainMid, UpdatesStudentOnlyAndIsDeterministic) {
  const auto teacher_hash = teacher.hash();
  auto run = [&] {
    auto student = StudentEncoder::from_teacher(teacher);
    std::vector<MetaStepReport> steps;
    MidHooks hooks;
    hooks.on_step = [&](const MetaStepReport& r) { steps.push_back(r); };
    auto result = train_mid(student, teacher, data.train(), pool, config, hooks);
    EXPECT_EQ(steps.size(), result.history.size());
    return std::make_pair(student, result);
  };
  auto [a, ra] = run();
  auto [b, rb] = run();
  EXPECT_EQ(teacher.hash(), teacher_hash);
  EXPECT_FALSE(a.params().identical(teacher.encoder().params()));
  EXPECT_TRUE(a.params().identical(b.params()));
  ASSERT_EQ(ra.history.size(), 6u);
  ASSERT_EQ(ra.epochs.size(), 2u);
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    const auto& r = ra.history[i];
    EXPECT_EQ(r.meta_train, rb.history[i].meta_train);
    EXPECT_EQ(r.holdout_spec, rb.history[i].holdout_spec);
    EXPECT_EQ(r.train_specs.size(), 3u);
    EXPECT_EQ(r.train_specs.front(), "identity");
    EXPECT_NE(r.holdout_spec, "identity");
    EXPECT_TRUE(std::isfinite(r.gradient_norm));
  }
  EXPECT_NEAR(ra.epochs.back().sparsity_index, sparsity_index(a.params()), 1e-9);
}

TEST_F(TrainMid, RejectsUnfrozenTeacher) {
  TeacherModel open(Encoder(spec, 1), ClassifierHead(4, 3, 2), Decoder(spec, 3));
  auto student = StudentEncoder::from_teacher(open);
  EXPECT_THROW(MidTrainer(student, open, config), InvalidArgument);
}
