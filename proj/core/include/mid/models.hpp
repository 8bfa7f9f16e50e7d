#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "mid/data.hpp"
#include "mid/params.hpp"

namespace mid {

// Registered feature extractors. MlpTiny exists for gradient checks on
// models small enough for finite differences.
enum class Backbone { MlpTiny, SmallConv, LeNet5, ResNetSmall };

std::string_view to_string(Backbone backbone);
Backbone backbone_from_string(std::string_view name);
std::vector<std::string> registered_backbones();

enum class Mode { Eval, Train };

struct EncoderSpec {
  Backbone backbone = Backbone::LeNet5;
  int64_t feature_dim = 84;
  ImageShape input_shape;

  void validate() const;
  bool operator==(const EncoderSpec&) const = default;
};

/// Feature extractor E(θ). Parameters and batch-norm buffers are explicit so
/// forwards can run against substituted parameters (the temporary model of
/// the meta step).
class Encoder {
 public:
  Encoder(EncoderSpec spec, uint64_t seed, torch::Dtype dtype = torch::kFloat32);
  Encoder(EncoderSpec spec, ParamSet params, ParamSet buffers);

  const EncoderSpec& spec() const { return spec_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const ParamSet& buffers() const { return buffers_; }
  ParamSet& buffers() { return buffers_; }

  torch::Tensor forward(const torch::Tensor& images, Mode mode = Mode::Eval) const;
  /// Forward with `params` in place of the encoder's own. In Train mode the
  /// batch-norm running statistics of this encoder are updated.
  torch::Tensor forward_with(const ParamSet& params, const torch::Tensor& images,
                             Mode mode) const;

  Encoder clone() const;
  Encoder to(torch::Dtype dtype) const;

 private:
  EncoderSpec spec_;
  ParamSet params_;
  mutable ParamSet buffers_;
};

/// Linear head C(w, b): logits = features · wᵀ + b.
class ClassifierHead {
 public:
  ClassifierHead(int64_t feature_dim, int64_t num_classes, uint64_t seed,
                 torch::Dtype dtype = torch::kFloat32);
  explicit ClassifierHead(ParamSet params);

  int64_t feature_dim() const { return params_.at("weight").size(1); }
  int64_t num_classes() const { return params_.at("weight").size(0); }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  torch::Tensor forward(const torch::Tensor& features) const;
  static torch::Tensor forward_with(const ParamSet& params, const torch::Tensor& features);

  ClassifierHead clone() const { return ClassifierHead(params_.clone()); }

 private:
  ParamSet params_;
};

/// Decoder D(θ_D) mirroring an encoder. Output is tanh rescaled to [0,1].
class Decoder {
 public:
  Decoder(EncoderSpec spec, uint64_t seed, torch::Dtype dtype = torch::kFloat32);
  Decoder(EncoderSpec spec, ParamSet params, ParamSet buffers);

  const EncoderSpec& spec() const { return spec_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const ParamSet& buffers() const { return buffers_; }
  ParamSet& buffers() { return buffers_; }

  torch::Tensor forward(const torch::Tensor& features, Mode mode = Mode::Eval) const;
  torch::Tensor forward_with(const ParamSet& params, const torch::Tensor& features,
                             Mode mode) const;

  Decoder clone() const;

 private:
  EncoderSpec spec_;
  ParamSet params_;
  mutable ParamSet buffers_;
};

/// Encoder plus linear head; the plain classifier F(θ, w, b).
struct Classifier {
  Encoder encoder;
  ClassifierHead head;

  torch::Tensor logits(const torch::Tensor& images, Mode mode = Mode::Eval) const {
    return head.forward(encoder.forward(images, mode));
  }
  ParamSet params() const;
  std::string hash() const { return hash_params(params()); }
  Classifier clone() const { return {encoder.clone(), head.clone()}; }
};

/// Teacher autoencoder–classifier. After freeze() its parameters are
/// detached, no longer require gradients, and mutable access throws.
class TeacherModel {
 public:
  TeacherModel(Encoder encoder, ClassifierHead head, Decoder decoder);

  const Encoder& encoder() const { return encoder_; }
  const ClassifierHead& head() const { return head_; }
  const Decoder& decoder() const { return decoder_; }
  Encoder& mutable_encoder();
  ClassifierHead& mutable_head();
  Decoder& mutable_decoder();

  void freeze();
  bool frozen() const { return frozen_; }

  torch::Tensor logits(const torch::Tensor& images) const;
  torch::Tensor reconstruct(const torch::Tensor& images) const;

  /// All parameters and buffers under "encoder.", "head.", "decoder." prefixes.
  ParamSet state() const;
  std::string hash() const { return hash_params(state()); }

 private:
  Encoder encoder_;
  ClassifierHead head_;
  Decoder decoder_;
  bool frozen_ = false;
};

/// The trainable student E_student(θ_E^s).
class StudentEncoder {
 public:
  explicit StudentEncoder(Encoder encoder) : encoder_(std::move(encoder)) {}

  /// Copy of the teacher encoder (identical structure and initial weights).
  static StudentEncoder from_teacher(const TeacherModel& teacher);
  static StudentEncoder random(const EncoderSpec& spec, uint64_t seed);

  const Encoder& encoder() const { return encoder_; }
  Encoder& encoder() { return encoder_; }
  const ParamSet& params() const { return encoder_.params(); }
  ParamSet& params() { return encoder_.params(); }

 private:
  Encoder encoder_;
};

/// Differentiable image → logits map used by attacks and evaluation.
using LogitsFn = std::function<torch::Tensor(const torch::Tensor&)>;

LogitsFn logits_fn(const Classifier& model);
/// Student encoder composed with the teacher head (the defended model).
LogitsFn logits_fn(const Encoder& encoder, const ClassifierHead& head);

Classifier defended_model(const StudentEncoder& student, const TeacherModel& teacher);

// Free-function forms of the three model operations.
torch::Tensor encode(const Encoder& encoder, const ImageBatch& batch);
torch::Tensor classify(const ClassifierHead& head, const torch::Tensor& features);
torch::Tensor decode(const Decoder& decoder, const torch::Tensor& features);

/// Number of trainable scalars.
int64_t parameter_count(const EncoderSpec& spec);

}  // namespace mid
