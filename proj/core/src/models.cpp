#include "mid/models.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "mid/error.hpp"

namespace mid {

namespace F = torch::nn::functional;

std::string_view to_string(Backbone backbone) {
  switch (backbone) {
    case Backbone::MlpTiny: return "mlp-tiny";
    case Backbone::SmallConv: return "small-conv";
    case Backbone::LeNet5: return "lenet5";
    case Backbone::ResNetSmall: return "resnet-small";
  }
  return "?";
}

Backbone backbone_from_string(std::string_view name) {
  for (auto b : {Backbone::MlpTiny, Backbone::SmallConv, Backbone::LeNet5, Backbone::ResNetSmall})
    if (to_string(b) == name) return b;
  throw InvalidArgument("unknown backbone '" + std::string(name) + "'");
}

std::vector<std::string> registered_backbones() {
  return {"mlp-tiny", "small-conv", "lenet5", "resnet-small"};
}

void EncoderSpec::validate() const {
  const auto& s = input_shape;
  if (feature_dim < 1) throw InvalidArgument("feature_dim must be positive");
  if (s.channels < 1 || s.height < 1 || s.width < 1) throw InvalidArgument("invalid input shape");
  switch (backbone) {
    case Backbone::MlpTiny: break;
    case Backbone::LeNet5:
      if (s.height % 4 != 0 || s.width % 4 != 0 || s.height < 12 || s.width < 12)
        throw InvalidArgument("lenet5 needs height and width divisible by 4 and >= 12");
      break;
    case Backbone::SmallConv:
      if (s.height % 4 != 0 || s.width % 4 != 0)
        throw InvalidArgument("small-conv needs height and width divisible by 4");
      break;
    case Backbone::ResNetSmall:
      if (s.height % 8 != 0 || s.width % 8 != 0)
        throw InvalidArgument("resnet-small needs height and width divisible by 8");
      if (feature_dim % 8 != 0) throw InvalidArgument("resnet-small needs feature_dim % 8 == 0");
      break;
  }
}

namespace {

constexpr int64_t kTinyHidden = 16;

// Builds parameters with PyTorch's default fan-in uniform bounds.
class Initializer {
 public:
  Initializer(uint64_t seed, torch::Dtype dtype)
      : gen_(at::make_generator<at::CPUGeneratorImpl>(seed)), dtype_(dtype) {}

  torch::Tensor uniform(at::IntArrayRef shape, double bound) {
    return torch::empty(shape, torch::dtype(dtype_)).uniform_(-bound, bound, gen_);
  }

  void linear(ParamSet& p, const std::string& name, int64_t out, int64_t in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    p.add(name + ".weight", uniform({out, in}, bound));
    p.add(name + ".bias", uniform({out}, bound));
  }

  void conv(ParamSet& p, const std::string& name, int64_t out, int64_t in, int64_t k,
            bool bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    p.add(name + ".weight", uniform({out, in, k, k}, bound));
    if (bias) p.add(name + ".bias", uniform({out}, bound));
  }

  void conv_transpose(ParamSet& p, const std::string& name, int64_t in, int64_t out, int64_t k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(out * k * k));
    p.add(name + ".weight", uniform({in, out, k, k}, bound));
    p.add(name + ".bias", uniform({out}, bound));
  }

  void batch_norm(ParamSet& p, ParamSet& buffers, const std::string& name, int64_t channels) {
    p.add(name + ".weight", torch::ones({channels}, torch::dtype(dtype_)));
    p.add(name + ".bias", torch::zeros({channels}, torch::dtype(dtype_)));
    buffers.add(name + ".running_mean", torch::zeros({channels}, torch::dtype(dtype_)));
    buffers.add(name + ".running_var", torch::ones({channels}, torch::dtype(dtype_)));
  }

 private:
  at::Generator gen_;
  torch::Dtype dtype_;
};

torch::Tensor linear(const ParamSet& p, const std::string& name, const torch::Tensor& x) {
  return torch::linear(x, p.at(name + ".weight"), p.at(name + ".bias"));
}

torch::Tensor conv(const ParamSet& p, const std::string& name, const torch::Tensor& x,
                   int64_t stride, int64_t padding) {
  const auto bias_name = name + ".bias";
  torch::Tensor bias = p.contains(bias_name) ? p.at(bias_name) : torch::Tensor();
  return torch::conv2d(x, p.at(name + ".weight"), bias, stride, padding);
}

torch::Tensor conv_transpose(const ParamSet& p, const std::string& name, const torch::Tensor& x,
                             int64_t stride, int64_t padding) {
  return torch::conv_transpose2d(x, p.at(name + ".weight"), p.at(name + ".bias"), stride, padding);
}

torch::Tensor batch_norm(const ParamSet& p, const ParamSet& buffers, const std::string& name,
                         const torch::Tensor& x, Mode mode) {
  return torch::batch_norm(x, p.at(name + ".weight"), p.at(name + ".bias"),
                           buffers.at(name + ".running_mean"), buffers.at(name + ".running_var"),
                           mode == Mode::Train, 0.1, 1e-5, false);
}

torch::Tensor upsample2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kNearest));
}

int64_t lenet_side(int64_t side) { return (side / 2 - 4) / 2; }

int64_t resnet_width(const EncoderSpec& spec, int stage) {
  // stages 1..3 → fd/4, fd/2, fd
  return spec.feature_dim >> (3 - stage);
}

void init_encoder(const EncoderSpec& spec, Initializer& init, ParamSet& p, ParamSet& buffers) {
  const auto& s = spec.input_shape;
  switch (spec.backbone) {
    case Backbone::MlpTiny:
      init.linear(p, "fc1", kTinyHidden, s.numel());
      init.linear(p, "fc2", spec.feature_dim, kTinyHidden);
      break;
    case Backbone::LeNet5:
      init.conv(p, "conv1", 6, s.channels, 5);
      init.conv(p, "conv2", 16, 6, 5);
      init.linear(p, "fc1", 120, 16 * lenet_side(s.height) * lenet_side(s.width));
      init.linear(p, "fc2", spec.feature_dim, 120);
      break;
    case Backbone::SmallConv:
      init.conv(p, "conv1", 32, s.channels, 3);
      init.conv(p, "conv2", 64, 32, 3);
      init.linear(p, "fc1", spec.feature_dim, 64 * (s.height / 4) * (s.width / 4));
      break;
    case Backbone::ResNetSmall: {
      const int64_t w1 = resnet_width(spec, 1);
      init.conv(p, "stem", w1, s.channels, 3, false);
      init.batch_norm(p, buffers, "stem_bn", w1);
      int64_t in = w1;
      for (int stage = 1; stage <= 3; ++stage) {
        const int64_t out = resnet_width(spec, stage);
        const std::string name = "layer" + std::to_string(stage);
        init.conv(p, name + ".conv_a", out, in, 3, false);
        init.batch_norm(p, buffers, name + ".bn_a", out);
        init.conv(p, name + ".conv_b", out, out, 3, false);
        init.batch_norm(p, buffers, name + ".bn_b", out);
        if (stage > 1 || in != out) {
          init.conv(p, name + ".shortcut", out, in, 1, false);
          init.batch_norm(p, buffers, name + ".shortcut_bn", out);
        }
        in = out;
      }
      break;
    }
  }
}

torch::Tensor forward_encoder(const EncoderSpec& spec, const ParamSet& p, const ParamSet& buffers,
                              const torch::Tensor& x, Mode mode) {
  switch (spec.backbone) {
    case Backbone::MlpTiny: {
      auto h = torch::tanh(linear(p, "fc1", x.flatten(1)));
      return torch::tanh(linear(p, "fc2", h));
    }
    case Backbone::LeNet5: {
      auto h = torch::max_pool2d(torch::relu(conv(p, "conv1", x, 1, 2)), 2);
      h = torch::max_pool2d(torch::relu(conv(p, "conv2", h, 1, 0)), 2);
      h = torch::relu(linear(p, "fc1", h.flatten(1)));
      return torch::relu(linear(p, "fc2", h));
    }
    case Backbone::SmallConv: {
      auto h = torch::max_pool2d(torch::relu(conv(p, "conv1", x, 1, 1)), 2);
      h = torch::max_pool2d(torch::relu(conv(p, "conv2", h, 1, 1)), 2);
      return torch::relu(linear(p, "fc1", h.flatten(1)));
    }
    case Backbone::ResNetSmall: {
      auto h = torch::relu(batch_norm(p, buffers, "stem_bn", conv(p, "stem", x, 1, 1), mode));
      for (int stage = 1; stage <= 3; ++stage) {
        const std::string name = "layer" + std::to_string(stage);
        const int64_t stride = stage == 1 ? 1 : 2;
        auto a = torch::relu(
            batch_norm(p, buffers, name + ".bn_a", conv(p, name + ".conv_a", h, stride, 1), mode));
        auto b = batch_norm(p, buffers, name + ".bn_b", conv(p, name + ".conv_b", a, 1, 1), mode);
        auto shortcut = h;
        if (p.contains(name + ".shortcut.weight"))
          shortcut = batch_norm(p, buffers, name + ".shortcut_bn",
                                conv(p, name + ".shortcut", h, stride, 0), mode);
        h = torch::relu(b + shortcut);
      }
      return h.mean({2, 3});
    }
  }
  throw InvalidArgument("unhandled backbone");
}

void init_decoder(const EncoderSpec& spec, Initializer& init, ParamSet& p, ParamSet& buffers) {
  const auto& s = spec.input_shape;
  switch (spec.backbone) {
    case Backbone::MlpTiny:
      init.linear(p, "fc1", kTinyHidden, spec.feature_dim);
      init.linear(p, "fc2", s.numel(), kTinyHidden);
      break;
    case Backbone::LeNet5:
      init.linear(p, "fc1", 120, spec.feature_dim);
      init.linear(p, "fc2", 16 * lenet_side(s.height) * lenet_side(s.width), 120);
      init.conv_transpose(p, "deconv2", 16, 6, 5);
      init.conv_transpose(p, "deconv1", 6, s.channels, 5);
      break;
    case Backbone::SmallConv:
      init.linear(p, "fc1", 64 * (s.height / 4) * (s.width / 4), spec.feature_dim);
      init.conv_transpose(p, "deconv2", 64, 32, 4);
      init.batch_norm(p, buffers, "deconv2_bn", 32);
      init.conv_transpose(p, "deconv1", 32, s.channels, 4);
      break;
    case Backbone::ResNetSmall: {
      const int64_t fd = spec.feature_dim;
      init.linear(p, "fc1", (fd / 2) * (s.height / 8) * (s.width / 8), fd);
      init.conv_transpose(p, "deconv3", fd / 2, fd / 4, 4);
      init.batch_norm(p, buffers, "deconv3_bn", fd / 4);
      init.conv_transpose(p, "deconv2", fd / 4, fd / 8, 4);
      init.batch_norm(p, buffers, "deconv2_bn", fd / 8);
      init.conv_transpose(p, "deconv1", fd / 8, s.channels, 4);
      break;
    }
  }
}

torch::Tensor forward_decoder(const EncoderSpec& spec, const ParamSet& p, const ParamSet& buffers,
                              const torch::Tensor& f, Mode mode) {
  const auto& s = spec.input_shape;
  const int64_t batch = f.size(0);
  torch::Tensor out;
  switch (spec.backbone) {
    case Backbone::MlpTiny: {
      auto h = torch::tanh(linear(p, "fc1", f));
      out = linear(p, "fc2", h).view({batch, s.channels, s.height, s.width});
      break;
    }
    case Backbone::LeNet5: {
      auto h = torch::relu(linear(p, "fc1", f));
      h = torch::relu(linear(p, "fc2", h));
      h = h.view({batch, 16, lenet_side(s.height), lenet_side(s.width)});
      h = torch::relu(conv_transpose(p, "deconv2", upsample2(h), 1, 0));
      out = conv_transpose(p, "deconv1", upsample2(h), 1, 2);
      break;
    }
    case Backbone::SmallConv: {
      auto h = torch::relu(linear(p, "fc1", f)).view({batch, 64, s.height / 4, s.width / 4});
      h = torch::relu(
          batch_norm(p, buffers, "deconv2_bn", conv_transpose(p, "deconv2", h, 2, 1), mode));
      out = conv_transpose(p, "deconv1", h, 2, 1);
      break;
    }
    case Backbone::ResNetSmall: {
      const int64_t fd = spec.feature_dim;
      auto h = torch::relu(linear(p, "fc1", f)).view({batch, fd / 2, s.height / 8, s.width / 8});
      h = torch::relu(
          batch_norm(p, buffers, "deconv3_bn", conv_transpose(p, "deconv3", h, 2, 1), mode));
      h = torch::relu(
          batch_norm(p, buffers, "deconv2_bn", conv_transpose(p, "deconv2", h, 2, 1), mode));
      out = conv_transpose(p, "deconv1", h, 2, 1);
      break;
    }
  }
  return (torch::tanh(out) + 1.0) * 0.5;
}

void check_images(const EncoderSpec& spec, const torch::Tensor& x) {
  const auto& s = spec.input_shape;
  if (x.dim() != 4 || x.size(1) != s.channels || x.size(2) != s.height || x.size(3) != s.width)
    throw ShapeError("encoder '" + std::string(to_string(spec.backbone)) + "' expects [B," +
                     std::to_string(s.channels) + "," + std::to_string(s.height) + "," +
                     std::to_string(s.width) + "], got " + c10::str(x.sizes()));
}

void check_features(int64_t feature_dim, const torch::Tensor& f, const char* who) {
  if (f.dim() != 2 || f.size(1) != feature_dim)
    throw ShapeError(std::string(who) + " expects [B," + std::to_string(feature_dim) +
                     "] features, got " + c10::str(f.sizes()));
}

}  // namespace

Encoder::Encoder(EncoderSpec spec, uint64_t seed, torch::Dtype dtype) : spec_(std::move(spec)) {
  spec_.validate();
  Initializer init(seed, dtype);
  init_encoder(spec_, init, params_, buffers_);
}

Encoder::Encoder(EncoderSpec spec, ParamSet params, ParamSet buffers)
    : spec_(std::move(spec)), params_(std::move(params)), buffers_(std::move(buffers)) {
  spec_.validate();
  // Reject parameter sets that do not match the registered layout.
  Encoder reference(spec_, 0, torch::kFloat32);
  const auto& ref = reference.params();
  if (ref.size() != params_.size()) throw ShapeError("encoder parameter count mismatch");
  for (const auto& [name, t] : ref)
    if (!params_.at(name).sizes().equals(t.sizes()))
      throw ShapeError("encoder parameter '" + name + "' has wrong shape");
}

torch::Tensor Encoder::forward(const torch::Tensor& images, Mode mode) const {
  return forward_with(params_, images, mode);
}

torch::Tensor Encoder::forward_with(const ParamSet& params, const torch::Tensor& images,
                                    Mode mode) const {
  check_images(spec_, images);
  return forward_encoder(spec_, params, buffers_, images, mode);
}

Encoder Encoder::clone() const { return Encoder(spec_, params_.clone(), buffers_.clone()); }

Encoder Encoder::to(torch::Dtype dtype) const {
  return Encoder(spec_, params_.to(dtype), buffers_.to(dtype));
}

ClassifierHead::ClassifierHead(int64_t feature_dim, int64_t num_classes, uint64_t seed,
                               torch::Dtype dtype) {
  if (feature_dim < 1 || num_classes < 2) throw InvalidArgument("invalid classifier dimensions");
  Initializer init(seed, dtype);
  const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  params_.add("weight", init.uniform({num_classes, feature_dim}, bound));
  params_.add("bias", init.uniform({num_classes}, bound));
}

ClassifierHead::ClassifierHead(ParamSet params) : params_(std::move(params)) {
  const auto& w = params_.at("weight");
  const auto& b = params_.at("bias");
  if (w.dim() != 2 || b.dim() != 1 || b.size(0) != w.size(0))
    throw ShapeError("classifier head expects weight [K,D] and bias [K]");
}

torch::Tensor ClassifierHead::forward(const torch::Tensor& features) const {
  return forward_with(params_, features);
}

torch::Tensor ClassifierHead::forward_with(const ParamSet& params, const torch::Tensor& features) {
  const auto& w = params.at("weight");
  check_features(w.size(1), features, "classifier head");
  return torch::linear(features, w, params.at("bias"));
}

Decoder::Decoder(EncoderSpec spec, uint64_t seed, torch::Dtype dtype) : spec_(std::move(spec)) {
  spec_.validate();
  Initializer init(seed, dtype);
  init_decoder(spec_, init, params_, buffers_);
}

Decoder::Decoder(EncoderSpec spec, ParamSet params, ParamSet buffers)
    : spec_(std::move(spec)), params_(std::move(params)), buffers_(std::move(buffers)) {
  spec_.validate();
  Decoder reference(spec_, 0, torch::kFloat32);
  const auto& ref = reference.params();
  if (ref.size() != params_.size()) throw ShapeError("decoder parameter count mismatch");
  for (const auto& [name, t] : ref)
    if (!params_.at(name).sizes().equals(t.sizes()))
      throw ShapeError("decoder parameter '" + name + "' has wrong shape");
}

torch::Tensor Decoder::forward(const torch::Tensor& features, Mode mode) const {
  return forward_with(params_, features, mode);
}

torch::Tensor Decoder::forward_with(const ParamSet& params, const torch::Tensor& features,
                                    Mode mode) const {
  check_features(spec_.feature_dim, features, "decoder");
  return forward_decoder(spec_, params, buffers_, features, mode);
}

Decoder Decoder::clone() const { return Decoder(spec_, params_.clone(), buffers_.clone()); }

ParamSet Classifier::params() const {
  ParamSet out;
  for (const auto& [k, v] : encoder.params()) out.add("encoder." + k, v);
  for (const auto& [k, v] : encoder.buffers()) out.add("encoder_buffers." + k, v);
  for (const auto& [k, v] : head.params()) out.add("head." + k, v);
  return out;
}

TeacherModel::TeacherModel(Encoder encoder, ClassifierHead head, Decoder decoder)
    : encoder_(std::move(encoder)), head_(std::move(head)), decoder_(std::move(decoder)) {
  if (head_.feature_dim() != encoder_.spec().feature_dim)
    throw ShapeError("teacher head feature_dim does not match encoder");
  if (!(decoder_.spec() == encoder_.spec())) throw ShapeError("teacher decoder/encoder mismatch");
}

Encoder& TeacherModel::mutable_encoder() {
  if (frozen_) throw InvalidArgument("teacher is frozen");
  return encoder_;
}
ClassifierHead& TeacherModel::mutable_head() {
  if (frozen_) throw InvalidArgument("teacher is frozen");
  return head_;
}
Decoder& TeacherModel::mutable_decoder() {
  if (frozen_) throw InvalidArgument("teacher is frozen");
  return decoder_;
}

void TeacherModel::freeze() {
  auto detach_all = [](ParamSet& set) {
    for (auto& [_, t] : set) t = t.detach().clone();
  };
  detach_all(encoder_.params());
  detach_all(encoder_.buffers());
  detach_all(head_.params());
  detach_all(decoder_.params());
  detach_all(decoder_.buffers());
  frozen_ = true;
}

torch::Tensor TeacherModel::logits(const torch::Tensor& images) const {
  return head_.forward(encoder_.forward(images, Mode::Eval));
}

torch::Tensor TeacherModel::reconstruct(const torch::Tensor& images) const {
  return decoder_.forward(encoder_.forward(images, Mode::Eval), Mode::Eval);
}

ParamSet TeacherModel::state() const {
  ParamSet out;
  for (const auto& [k, v] : encoder_.params()) out.add("encoder." + k, v);
  for (const auto& [k, v] : encoder_.buffers()) out.add("encoder_buffers." + k, v);
  for (const auto& [k, v] : head_.params()) out.add("head." + k, v);
  for (const auto& [k, v] : decoder_.params()) out.add("decoder." + k, v);
  for (const auto& [k, v] : decoder_.buffers()) out.add("decoder_buffers." + k, v);
  return out;
}

StudentEncoder StudentEncoder::from_teacher(const TeacherModel& teacher) {
  return StudentEncoder(teacher.encoder().clone());
}

StudentEncoder StudentEncoder::random(const EncoderSpec& spec, uint64_t seed) {
  return StudentEncoder(Encoder(spec, seed));
}

LogitsFn logits_fn(const Classifier& model) { return logits_fn(model.encoder, model.head); }

LogitsFn logits_fn(const Encoder& encoder, const ClassifierHead& head) {
  return [encoder, head](const torch::Tensor& x) {
    return head.forward(encoder.forward(x, Mode::Eval));
  };
}

Classifier defended_model(const StudentEncoder& student, const TeacherModel& teacher) {
  return {student.encoder(), teacher.head()};
}

torch::Tensor encode(const Encoder& encoder, const ImageBatch& batch) {
  return encoder.forward(batch.images, Mode::Eval);
}

torch::Tensor classify(const ClassifierHead& head, const torch::Tensor& features) {
  return head.forward(features);
}

torch::Tensor decode(const Decoder& decoder, const torch::Tensor& features) {
  return decoder.forward(features, Mode::Eval);
}

int64_t parameter_count(const EncoderSpec& spec) { return Encoder(spec, 0).params().numel(); }

}  // namespace mid
