#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mid/attacks.hpp"
#include "mid/data.hpp"
#include "mid/models.hpp"

namespace mid {

struct FrequencyBands {
  torch::Tensor low;   // inverse FFT of the spectrum inside the radius
  torch::Tensor high;  // inverse FFT of the complement
};

/// Per-channel centred 2-D FFT; frequencies at distance ≤ radius from the
/// centre form the low band, the rest the high band. Inputs [B,C,H,W].
FrequencyBands frequency_split(const torch::Tensor& images, double radius);

/// Radius that covers every frequency of an H×W spectrum.
double full_spectrum_radius(int64_t height, int64_t width);

struct FrequencyPoint {
  double cutoff = 0.0;
  std::string band;  // "low" | "high"
  std::string attack;
  double accuracy = 0.0;
};

struct FrequencyCurve {
  std::vector<double> cutoffs;
  std::vector<FrequencyPoint> points;

  std::vector<double> series(const std::string& band, const std::string& attack) const;
};

/// Accuracy of `model` on low/high bands of benign (identity spec) and
/// adversarial data; attacks are generated white-box against `model`.
FrequencyCurve frequency_robustness_curve(const Classifier& model, const Split& test,
                                          const std::vector<AttackSpec>& specs,
                                          const std::vector<double>& cutoffs, uint64_t seed,
                                          int64_t batch_size = 200);

std::string to_csv(const FrequencyCurve& curve);

/// Σ over tensors of squared entries.
double sparsity_index(const ParamSet& params);

struct SparsityTrace {
  std::vector<int> epochs;
  std::vector<double> values;
};

std::string to_csv(const SparsityTrace& trace);

/// True when every relative per-epoch change after `burn_in_fraction` of
/// the trace is below `tolerance`.
bool sparsity_plateaued(const SparsityTrace& trace, double burn_in_fraction = 0.25,
                        double tolerance = 0.05);
/// True when the trace never decreases after `burn_in_fraction`.
bool sparsity_increasing(const SparsityTrace& trace, double burn_in_fraction = 0.25);

struct GradientMap {
  torch::Tensor gradients;  // [B,C,H,W]
  torch::Tensor minimum;    // [B] per-image min, for plotting
  torch::Tensor maximum;    // [B]
};

/// ∇_x cross-entropy(model(x), y) per sample.
GradientMap input_gradient_map(const LogitsFn& model, const ImageBatch& batch);

/// decode_teacher(E_student(x)).
ImageBatch regenerate(const TeacherModel& teacher, const Encoder& student, const ImageBatch& batch);

struct FeatureRow {
  int64_t sample_id = 0;
  std::string attack;
  int64_t label = 0;
  std::vector<double> features;
};

/// One row per (sample, spec); attacks target `model` white-box.
std::vector<FeatureRow> export_features(const Classifier& model, const Split& split,
                                        const std::vector<AttackSpec>& specs, uint64_t seed,
                                        int64_t batch_size = 200);
std::string features_to_csv(const std::vector<FeatureRow>& rows);

/// Rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// 8-bit grayscale PNG of a [H,W] tensor in [0,1].
void write_png(const std::filesystem::path& path, const torch::Tensor& image);
/// Tiles [N,C,H,W] images (channels averaged) into a grid PNG.
void write_png_grid(const std::filesystem::path& path, const torch::Tensor& images,
                    int64_t columns);

}  // namespace mid
