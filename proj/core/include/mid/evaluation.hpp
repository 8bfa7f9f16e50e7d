#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mid/attacks.hpp"
#include "mid/data.hpp"
#include "mid/meta_defense.hpp"
#include "mid/models.hpp"
#include "mid/teacher.hpp"
#include "mid/training.hpp"

namespace mid {

enum class AttackMode { White, Black };

std::string_view to_string(AttackMode mode);
AttackMode attack_mode_from_string(std::string_view name);

/// Percentage of argmax-correct predictions.
double accuracy(const Classifier& model, const Split& split, int64_t batch_size = 256);
double accuracy(const LogitsFn& model, const Split& split, int64_t batch_size = 256);

struct EvaluationRow {
  std::string attack;
  bool targeted = false;
  AttackMode mode = AttackMode::White;
  bool known = false;
  double accuracy = 0.0;
};

struct EvaluationReport {
  std::vector<EvaluationRow> rows;
  double benign_accuracy = 0.0;
  double average_with_benign = 0.0;
  double average_without_benign = 0.0;
  std::string model_hash;
  std::string dataset;
  uint64_t seed = 0;
  std::vector<std::string> training_pool;

  /// Recomputes the two averages from rows.
  void finalize();
  const EvaluationRow* find(const std::string& attack, AttackMode mode) const;
};

struct EvaluationOptions {
  uint64_t seed = 0;
  int64_t batch_size = 200;
  int64_t max_samples = 0;  // 0 = whole split
  std::string dataset;
};

/// Rows are tagged known iff their name appears in `training_pool`.
/// Black mode crafts every attack on `substitute` and scores `model`.
EvaluationReport evaluate_robustness(const Classifier& model, const Split& test,
                                     const std::vector<AttackSpec>& specs, AttackMode mode,
                                     const std::vector<std::string>& training_pool,
                                     const EvaluationOptions& options,
                                     const Classifier* substitute = nullptr);

/// Concatenates rows of several reports (e.g. white + black) into one.
EvaluationReport merge_reports(const std::vector<EvaluationReport>& reports);

/// CSV with header `attack,targeted,mode,known,accuracy`.
std::string to_csv(const EvaluationReport& report);
nlohmann::json to_json(const EvaluationReport& report);

/// Independently seeded model of the same architecture, trained on the same data.
Classifier train_substitute(const Dataset& dataset, const EncoderSpec& spec,
                            const ClassifierTrainConfig& config);

struct CrossValidationConfig {
  MetaConfig meta;
  EvaluationOptions evaluation;
  bool student_from_teacher = true;
  uint64_t seed = 0;
};

struct CrossValidationRound {
  AttackSpec holdout;
  std::vector<std::string> training_pool;
  EvaluationReport report;
};

/// Leave-one-attack-out: for each attack, MID is trained on the others and
/// evaluated (white box) on the held-out one.
std::vector<CrossValidationRound> cross_validation_protocol(
    const std::vector<AttackSpec>& attack_set, const Dataset& dataset,
    const TeacherModel& teacher, const CrossValidationConfig& config);

}  // namespace mid
