#include "mid/checkpoint.hpp"

#include "mid/error.hpp"

namespace mid {

namespace {

constexpr const char* kMetadataKey = "__metadata__";
constexpr const char* kOrderKey = "__order__";

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  torch::serialize::OutputArchive archive;
  nlohmann::json order = nlohmann::json::array();
  for (const auto& [name, t] : checkpoint.tensors) {
    if (name == kMetadataKey || name == kOrderKey)
      throw InvalidArgument("reserved checkpoint key '" + name + "'");
    archive.write(name, t.detach().contiguous().cpu());
    order.push_back(name);
  }
  archive.write(kMetadataKey, c10::IValue(checkpoint.metadata.dump()));
  archive.write(kOrderKey, c10::IValue(order.dump()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  archive.save_to(path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IngestionError(path.string(), "checkpoint not found");
  Checkpoint out;
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    c10::IValue value;
    if (!archive.try_read(kMetadataKey, value) || !value.isString())
      throw IngestionError(path.string(), "missing metadata record");
    out.metadata = nlohmann::json::parse(value.toStringRef());
    if (!archive.try_read(kOrderKey, value) || !value.isString())
      throw IngestionError(path.string(), "missing key order record");
    for (const auto& name : nlohmann::json::parse(value.toStringRef())) {
      torch::Tensor t;
      if (!archive.try_read(name.get<std::string>(), t))
        throw IngestionError(path.string(), "missing tensor '" + name.get<std::string>() + "'");
      out.tensors.add(name.get<std::string>(), t);
    }
  } catch (const c10::Error& e) {
    throw IngestionError(path.string(), std::string("unreadable checkpoint: ") + e.what_without_backtrace());
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(path.string(), std::string("bad metadata: ") + e.what());
  }
  return out;
}

nlohmann::json encoder_spec_to_json(const EncoderSpec& spec) {
  return {{"backbone", std::string(to_string(spec.backbone))},
          {"feature_dim", spec.feature_dim},
          {"input_shape",
           {spec.input_shape.channels, spec.input_shape.height, spec.input_shape.width}}};
}

EncoderSpec encoder_spec_from_metadata(const nlohmann::json& metadata) {
  try {
    EncoderSpec spec;
    spec.backbone = backbone_from_string(metadata.at("backbone").get<std::string>());
    spec.feature_dim = metadata.at("feature_dim").get<int64_t>();
    const auto& shape = metadata.at("input_shape");
    spec.input_shape = {shape.at(0).get<int64_t>(), shape.at(1).get<int64_t>(),
                        shape.at(2).get<int64_t>()};
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("checkpoint", std::string("incomplete model metadata: ") + e.what());
  }
}

namespace {

nlohmann::json with_model_fields(nlohmann::json metadata, const std::string& kind,
                                 const EncoderSpec& spec, int64_t num_classes) {
  if (metadata.is_null()) metadata = nlohmann::json::object();
  metadata["kind"] = kind;
  const auto fields = encoder_spec_to_json(spec);
  for (const auto& [k, v] : fields.items()) metadata[k] = v;
  metadata["num_classes"] = num_classes;
  return metadata;
}

void expect_kind(const Checkpoint& checkpoint, const std::string& kind) {
  auto found = checkpoint.metadata.value("kind", std::string());
  if (found != kind)
    throw IngestionError("checkpoint", "expected a " + kind + " checkpoint, found '" + found + "'");
}

}  // namespace

Checkpoint to_checkpoint(const Classifier& model, nlohmann::json metadata) {
  return {model.params(), with_model_fields(std::move(metadata), "classifier", model.encoder.spec(),
                                            model.head.num_classes())};
}

Checkpoint to_checkpoint(const TeacherModel& teacher, nlohmann::json metadata) {
  return {teacher.state(), with_model_fields(std::move(metadata), "teacher",
                                             teacher.encoder().spec(),
                                             teacher.head().num_classes())};
}

Classifier classifier_from_checkpoint(const Checkpoint& checkpoint) {
  expect_kind(checkpoint, "classifier");
  auto spec = encoder_spec_from_metadata(checkpoint.metadata);
  const auto& t = checkpoint.tensors;
  return {Encoder(spec, t.strip_prefix("encoder."), t.strip_prefix("encoder_buffers.")),
          ClassifierHead(t.strip_prefix("head."))};
}

TeacherModel teacher_from_checkpoint(const Checkpoint& checkpoint) {
  expect_kind(checkpoint, "teacher");
  auto spec = encoder_spec_from_metadata(checkpoint.metadata);
  const auto& t = checkpoint.tensors;
  TeacherModel teacher(Encoder(spec, t.strip_prefix("encoder."), t.strip_prefix("encoder_buffers.")),
                       ClassifierHead(t.strip_prefix("head.")),
                       Decoder(spec, t.strip_prefix("decoder."), t.strip_prefix("decoder_buffers.")));
  teacher.freeze();
  return teacher;
}

}  // namespace mid
