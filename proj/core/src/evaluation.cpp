#include "mid/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "mid/error.hpp"

namespace mid {

std::string_view to_string(AttackMode mode) { return mode == AttackMode::White ? "white" : "black"; }

AttackMode attack_mode_from_string(std::string_view name) {
  if (name == "white") return AttackMode::White;
  if (name == "black") return AttackMode::Black;
  throw InvalidArgument("unknown attack mode '" + std::string(name) + "' (expected white or black)");
}

double accuracy(const LogitsFn& model, const Split& split, int64_t batch_size) {
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  torch::NoGradGuard no_grad;
  int64_t correct = 0;
  for (int64_t begin = 0; begin < split.size(); begin += batch_size) {
    auto batch = split.slice(begin, std::min(split.size(), begin + batch_size));
    correct += model(batch.images).argmax(1).eq(batch.labels).sum().item<int64_t>();
  }
  return split.size() == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / split.size();
}

double accuracy(const Classifier& model, const Split& split, int64_t batch_size) {
  return accuracy(logits_fn(model), split, batch_size);
}

void EvaluationReport::finalize() {
  double sum = 0.0;
  for (const auto& r : rows) sum += r.accuracy;
  average_without_benign = rows.empty() ? 0.0 : sum / static_cast<double>(rows.size());
  average_with_benign = (sum + benign_accuracy) / static_cast<double>(rows.size() + 1);
}

const EvaluationRow* EvaluationReport::find(const std::string& attack, AttackMode mode) const {
  for (const auto& r : rows)
    if (r.attack == attack && r.mode == mode) return &r;
  return nullptr;
}

EvaluationReport evaluate_robustness(const Classifier& model, const Split& test,
                                     const std::vector<AttackSpec>& specs, AttackMode mode,
                                     const std::vector<std::string>& training_pool,
                                     const EvaluationOptions& options,
                                     const Classifier* substitute) {
  if (options.batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (mode == AttackMode::Black && substitute == nullptr)
    throw InvalidArgument("black-box evaluation needs a substitute model");
  const Split data = options.max_samples > 0 ? test.head(options.max_samples) : test;
  const auto target = logits_fn(model);
  const auto attacker = mode == AttackMode::Black ? logits_fn(*substitute) : target;
  const int64_t num_classes = model.head.num_classes();

  EvaluationReport report;
  report.model_hash = model.hash();
  report.dataset = options.dataset;
  report.seed = options.seed;
  report.training_pool = training_pool;
  report.benign_accuracy = accuracy(target, data, options.batch_size);

  for (const auto& spec : specs) {
    if (spec.method == AttackMethod::Identity) continue;
    std::mt19937_64 rng(derive_seed(
        options.seed, "evaluate." + spec.name() + "." + std::string(to_string(mode))));
    int64_t correct = 0;
    for (int64_t begin = 0; begin < data.size(); begin += options.batch_size) {
      auto batch = data.slice(begin, std::min(data.size(), begin + options.batch_size));
      auto adversarial = generate(spec, attacker, batch, num_classes, rng);
      torch::NoGradGuard no_grad;
      correct += target(adversarial.images).argmax(1).eq(batch.labels).sum().item<int64_t>();
    }
    EvaluationRow row;
    row.attack = spec.name();
    row.targeted = spec.targeted;
    row.mode = mode;
    row.known = std::find(training_pool.begin(), training_pool.end(), row.attack) !=
                training_pool.end();
    row.accuracy = data.size() == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / data.size();
    report.rows.push_back(row);
  }
  report.finalize();
  return report;
}

EvaluationReport merge_reports(const std::vector<EvaluationReport>& reports) {
  if (reports.empty()) throw InvalidArgument("nothing to merge");
  EvaluationReport out = reports.front();
  out.rows.clear();
  for (const auto& r : reports) out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
  out.finalize();
  return out;
}

std::string to_csv(const EvaluationReport& report) {
  std::ostringstream out;
  out << "attack,targeted,mode,known,accuracy\n";
  char buffer[32];
  for (const auto& r : report.rows) {
    std::snprintf(buffer, sizeof(buffer), "%.4f", r.accuracy);
    out << r.attack << ',' << (r.targeted ? "true" : "false") << ',' << to_string(r.mode) << ','
        << (r.known ? "true" : "false") << ',' << buffer << '\n';
  }
  return out.str();
}

nlohmann::json to_json(const EvaluationReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows)
    rows.push_back({{"attack", r.attack},
                    {"targeted", r.targeted},
                    {"mode", std::string(to_string(r.mode))},
                    {"known", r.known},
                    {"accuracy", r.accuracy}});
  return {{"model_hash", report.model_hash},
          {"dataset", report.dataset},
          {"seed", report.seed},
          {"training_pool", report.training_pool},
          {"benign_accuracy", report.benign_accuracy},
          {"average_with_benign", report.average_with_benign},
          {"average_without_benign", report.average_without_benign},
          {"rows", rows}};
}

Classifier train_substitute(const Dataset& dataset, const EncoderSpec& spec,
                            const ClassifierTrainConfig& config) {
  auto substitute_config = config;
  substitute_config.seed = derive_seed(config.seed, "substitute");
  return train_classifier(spec, dataset.spec().num_classes, dataset.train(), substitute_config);
}

std::vector<CrossValidationRound> cross_validation_protocol(
    const std::vector<AttackSpec>& attack_set, const Dataset& dataset,
    const TeacherModel& teacher, const CrossValidationConfig& config) {
  std::vector<AttackSpec> adversarial;
  for (const auto& s : attack_set)
    if (s.method != AttackMethod::Identity) adversarial.push_back(s);
  // Each round trains on the remaining attacks, which must still form a pool.
  if (adversarial.size() < 3)
    throw InvalidArgument("cross-validation needs at least three adversarial attacks");

  std::vector<CrossValidationRound> rounds;
  for (std::size_t i = 0; i < adversarial.size(); ++i) {
    const auto tag = "cross-validation." + std::to_string(i);
    std::vector<AttackSpec> rest;
    for (std::size_t j = 0; j < adversarial.size(); ++j)
      if (j != i) rest.push_back(adversarial[j]);
    auto pool = make_pool(rest, derive_seed(config.seed, tag + ".pool"));

    auto student = config.student_from_teacher
                       ? StudentEncoder::from_teacher(teacher)
                       : StudentEncoder::random(teacher.encoder().spec(),
                                                derive_seed(config.seed, tag + ".student"));
    auto meta = config.meta;
    meta.seed = derive_seed(config.seed, tag + ".meta");
    train_mid(student, teacher, dataset.train(), pool, meta);

    CrossValidationRound round;
    round.holdout = adversarial[i];
    round.training_pool = pool.names();
    auto options = config.evaluation;
    options.seed = derive_seed(config.seed, tag + ".evaluate");
    round.report = evaluate_robustness(defended_model(student, teacher), dataset.test(),
                                       {adversarial[i]}, AttackMode::White, round.training_pool,
                                       options);
    rounds.push_back(std::move(round));
  }
  return rounds;
}

}  // namespace mid
