#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "mid/models.hpp"
#include "mid/params.hpp"

namespace mid {

// Checkpoint archive: a torch serialize archive mapping stable string keys to
// tensors, plus one string entry "__metadata__" holding a JSON record.
//
//   encoder.<name>          encoder parameters (e.g. encoder.conv1.weight)
//   encoder_buffers.<name>  batch-norm running statistics
//   head.weight, head.bias  classifier head
//   decoder.<name>, decoder_buffers.<name>
//
// Metadata always carries: kind, backbone, feature_dim, input_shape,
// num_classes, dataset, seed, epoch, and for MID models the training pool.

struct Checkpoint {
  ParamSet tensors;
  nlohmann::json metadata;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const Classifier& model, nlohmann::json metadata);
Checkpoint to_checkpoint(const TeacherModel& teacher, nlohmann::json metadata);

Classifier classifier_from_checkpoint(const Checkpoint& checkpoint);
/// Restored teachers are frozen.
TeacherModel teacher_from_checkpoint(const Checkpoint& checkpoint);

EncoderSpec encoder_spec_from_metadata(const nlohmann::json& metadata);
nlohmann::json encoder_spec_to_json(const EncoderSpec& spec);

}  // namespace mid
