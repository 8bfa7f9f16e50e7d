#pragma once

#include <cstdint>
#include <string_view>

#include <torch/torch.h>

#include "mid/data.hpp"
#include "mid/models.hpp"
#include "mid/training.hpp"

namespace mid {

enum class ReconstructionNorm { L2, L1 };

std::string_view to_string(ReconstructionNorm norm);
ReconstructionNorm reconstruction_norm_from_string(std::string_view name);

struct TeacherTrainConfig {
  int epochs = 5;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  ReconstructionNorm reconstruction = ReconstructionNorm::L2;
  int64_t batch_size = 128;
  uint64_t seed = 0;

  void validate() const;
};

struct TeacherLoss {
  torch::Tensor total;
  torch::Tensor classification;  // mean cross-entropy per sample
  torch::Tensor reconstruction;  // mean per-sample ‖D(E(x)) − x‖ (l2 or l1)
};

/// total = classification + reconstruction, both batch means.
TeacherLoss teacher_loss(const TeacherModel& teacher, const ImageBatch& batch,
                         ReconstructionNorm norm = ReconstructionNorm::L2,
                         Mode mode = Mode::Eval);

/// The same loss evaluated on explicit parameter sets (used for training).
TeacherLoss teacher_loss_with(const TeacherModel& teacher, const ParamSet& encoder_params,
                              const ParamSet& head_params, const ParamSet& decoder_params,
                              const ImageBatch& batch, ReconstructionNorm norm, Mode mode);

struct TeacherResult {
  TeacherModel teacher;  // frozen
  double clean_accuracy = 0.0;        // percent, test split
  double reconstruction_error = 0.0;  // mean absolute pixel error, test split
};

TeacherResult train_teacher(const TeacherTrainConfig& config, const Dataset& dataset,
                            const EncoderSpec& spec);

/// Mean absolute pixel error of decode(encode(x)) over a split.
double reconstruction_error(const TeacherModel& teacher, const Split& split,
                            int64_t batch_size = 256);

}  // namespace mid
