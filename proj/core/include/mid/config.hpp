#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mid/attacks.hpp"
#include "mid/data.hpp"
#include "mid/evaluation.hpp"
#include "mid/meta_defense.hpp"
#include "mid/models.hpp"
#include "mid/teacher.hpp"
#include "mid/training.hpp"

namespace mid {

struct DataConfig {
  std::filesystem::path path;  // directory holding manifest.json
  double fraction = 1.0;
  int64_t test_samples = 0;  // 0 = full test split
};

struct EvaluationConfig {
  std::vector<AttackSpec> attacks;
  std::vector<AttackMode> modes{AttackMode::White};
  int64_t batch_size = 200;
};

struct AnalysisConfig {
  std::vector<double> cutoffs;
  std::vector<AttackSpec> frequency_attacks;
  int64_t gradient_samples = 16;
  int64_t feature_samples = 200;
  std::vector<AttackSpec> feature_attacks;
  int64_t alignment_samples = 64;  // 0 disables per-epoch gradient alignment
  int reference_epochs = 0;        // adversarial-training reference; 0 = meta.epochs
  std::string reference_attack = "PGD_N";
};

struct ExperimentConfig {
  DataConfig data;
  EncoderSpec encoder;
  AttackDefaults attack_defaults;
  AttackerPool pool;
  TeacherTrainConfig teacher;
  ClassifierTrainConfig baseline;
  MetaConfig meta;
  bool student_from_teacher = true;
  int checkpoint_every = 5;
  EvaluationConfig evaluation;
  AnalysisConfig analysis;
  std::vector<AttackSpec> cross_validation;
  std::filesystem::path output = "runs/default";
  uint64_t seed = 0;

  /// Applies `seed` to every stage through derive_seed.
  void reseed(uint64_t global_seed);
  /// Hex SHA-256 of the canonical JSON form.
  std::string hash() const;
};

/// Parses a YAML experiment file. Unknown keys and invalid values raise
/// ConfigError with the offending key and line.
ExperimentConfig parse_config(const std::filesystem::path& path);
ExperimentConfig parse_config_string(const std::string& text);

/// Canonical JSON form (every field, defaults included). Parsing its YAML
/// rendering yields an equal config.
nlohmann::json to_json(const ExperimentConfig& config);
std::string to_yaml(const ExperimentConfig& config);

nlohmann::json attack_spec_to_json(const AttackSpec& spec);

}  // namespace mid
