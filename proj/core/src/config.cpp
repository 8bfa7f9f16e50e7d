#include "mid/config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "mid/error.hpp"

namespace mid {

namespace {

int line_of(const YAML::Node& node) {
  const auto mark = node.Mark();
  return mark.is_null() ? 0 : mark.line + 1;
}

std::string join(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

template <typename T>
T scalar(const YAML::Node& node, const std::string& key, const char* expected) {
  if (!node.IsScalar()) throw ConfigError(key, line_of(node), std::string("expected ") + expected);
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(key, line_of(node), std::string("expected ") + expected);
  }
}

/// One YAML mapping with its dotted path; rejects keys outside `allowed`.
class Section {
 public:
  Section(YAML::Node node, std::string path, std::set<std::string> allowed)
      : node_(std::move(node)), path_(std::move(path)) {
    if (!node_ || node_.IsNull()) return;
    if (!node_.IsMap()) throw ConfigError(path_, line_of(node_), "expected a mapping");
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      const auto key = it->first.as<std::string>();
      if (!allowed.count(key))
        throw ConfigError(join(path_, key), line_of(it->first), "unknown key");
    }
  }

  bool has(const std::string& key) const { return node_ && node_.IsMap() && node_[key]; }
  YAML::Node node(const std::string& key) const {
    return has(key) ? node_[key] : YAML::Node();
  }
  std::string path(const std::string& key) const { return join(path_, key); }
  int line(const std::string& key) const { return has(key) ? line_of(node_[key]) : line_of(node_); }

  double real(const std::string& key, double fallback) const {
    return has(key) ? scalar<double>(node_[key], path(key), "a number") : fallback;
  }
  int64_t integer(const std::string& key, int64_t fallback) const {
    return has(key) ? scalar<int64_t>(node_[key], path(key), "an integer") : fallback;
  }
  bool boolean(const std::string& key, bool fallback) const {
    return has(key) ? scalar<bool>(node_[key], path(key), "true or false") : fallback;
  }
  std::string text(const std::string& key, const std::string& fallback) const {
    return has(key) ? scalar<std::string>(node_[key], path(key), "a string") : fallback;
  }

 private:
  YAML::Node node_;
  std::string path_;
};

// Runs `fn`, turning toolkit errors into ConfigError located at `key`.
template <typename Fn>
auto located(const std::string& key, int line, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(key, line, e.what());
  }
}

std::vector<AttackSpec> attack_list(const Section& parent, const std::string& key,
                                    const AttackDefaults& defaults,
                                    std::vector<AttackSpec> fallback) {
  if (!parent.has(key)) return fallback;
  const auto node = parent.node(key);
  if (!node.IsSequence())
    throw ConfigError(parent.path(key), line_of(node), "expected a list of attack names");
  std::vector<AttackSpec> out;
  for (const auto& item : node) {
    const auto name = scalar<std::string>(item, parent.path(key), "an attack name");
    out.push_back(located(parent.path(key), line_of(item),
                          [&] { return attack_from_name(name, defaults); }));
  }
  return out;
}

std::vector<AttackSpec> names_to_specs(const std::vector<std::string>& names,
                                       const AttackDefaults& defaults) {
  std::vector<AttackSpec> out;
  for (const auto& n : names) out.push_back(attack_from_name(n, defaults));
  return out;
}

std::vector<std::string> spec_names(const std::vector<AttackSpec>& specs) {
  std::vector<std::string> out;
  for (const auto& s : specs) out.push_back(s.name());
  return out;
}

ExperimentConfig parse_node(const YAML::Node& root) {
  ExperimentConfig c;
  Section top(root, "",
              {"seed", "output", "data", "encoder", "attacks", "pool", "teacher", "baseline",
               "meta", "evaluation", "analysis", "cross_validation"});
  const auto seed = top.integer("seed", 0);
  if (seed < 0) throw ConfigError("seed", top.line("seed"), "must be >= 0");
  c.output = top.text("output", c.output.string());

  Section data(top.node("data"), "data", {"path", "fraction", "test_samples"});
  c.data.path = data.text("path", "data/mnist5k");
  c.data.fraction = data.real("fraction", 1.0);
  if (!(c.data.fraction > 0.0 && c.data.fraction <= 1.0))
    throw ConfigError("data.fraction", data.line("fraction"), "must be in (0, 1]");
  c.data.test_samples = data.integer("test_samples", 0);
  if (c.data.test_samples < 0)
    throw ConfigError("data.test_samples", data.line("test_samples"), "must be >= 0");

  Section enc(top.node("encoder"), "encoder", {"backbone", "feature_dim", "input_shape"});
  c.encoder.backbone = located("encoder.backbone", enc.line("backbone"), [&] {
    return backbone_from_string(enc.text("backbone", "lenet5"));
  });
  c.encoder.feature_dim = enc.integer("feature_dim", 84);
  if (enc.has("input_shape")) {
    const auto shape = enc.node("input_shape");
    if (!shape.IsSequence() || shape.size() != 3)
      throw ConfigError("encoder.input_shape", line_of(shape), "expected [channels, height, width]");
    c.encoder.input_shape = {scalar<int64_t>(shape[0], "encoder.input_shape", "an integer"),
                             scalar<int64_t>(shape[1], "encoder.input_shape", "an integer"),
                             scalar<int64_t>(shape[2], "encoder.input_shape", "an integer")};
  }
  located("encoder", enc.line("backbone"), [&] { c.encoder.validate(); });

  Section atk(top.node("attacks"), "attacks",
              {"epsilon", "steps", "step_size", "momentum_decay", "random_start", "cw"});
  auto& d = c.attack_defaults;
  d.epsilon = atk.real("epsilon", 0.3);
  if (!(d.epsilon >= 0.0)) throw ConfigError("attacks.epsilon", atk.line("epsilon"), "must be >= 0");
  d.steps = static_cast<int>(atk.integer("steps", 10));
  if (d.steps < 1) throw ConfigError("attacks.steps", atk.line("steps"), "must be >= 1");
  if (atk.has("step_size") && atk.node("step_size").IsScalar() &&
      atk.node("step_size").Scalar() == "auto")
    d.step_size = -1.0;
  else
    d.step_size = atk.real("step_size", -1.0);
  d.momentum_decay = atk.real("momentum_decay", 1.0);
  d.random_start = atk.boolean("random_start", true);
  Section cw(atk.node("cw"), "attacks.cw", {"confidence", "iterations", "penalty", "learning_rate"});
  d.cw_confidence = cw.real("confidence", 0.0);
  d.cw_iterations = static_cast<int>(cw.integer("iterations", 100));
  d.cw_penalty = cw.real("penalty", 10.0);
  d.cw_learning_rate = cw.real("learning_rate", 0.01);

  const auto default_pool = names_to_specs({"PGD_N", "PGD_T", "MIM_N", "MIM_T"}, d);
  auto pool_specs = attack_list(top, "pool", d, default_pool);
  c.pool = located("pool", top.line("pool"), [&] { return make_pool(pool_specs, 0); });

  Section teacher(top.node("teacher"), "teacher",
                  {"epochs", "learning_rate", "optimizer", "reconstruction", "batch_size"});
  c.teacher.epochs = static_cast<int>(teacher.integer("epochs", 5));
  c.teacher.learning_rate = teacher.real("learning_rate", 1e-3);
  c.teacher.optimizer = located("teacher.optimizer", teacher.line("optimizer"), [&] {
    return optimizer_from_string(teacher.text("optimizer", "adam"));
  });
  c.teacher.reconstruction = located("teacher.reconstruction", teacher.line("reconstruction"), [&] {
    return reconstruction_norm_from_string(teacher.text("reconstruction", "l2"));
  });
  c.teacher.batch_size = teacher.integer("batch_size", 128);
  located("teacher", teacher.line("epochs"), [&] { c.teacher.validate(); });

  Section base(top.node("baseline"), "baseline",
               {"epochs", "learning_rate", "optimizer", "batch_size"});
  c.baseline.epochs = static_cast<int>(base.integer("epochs", 5));
  c.baseline.learning_rate = base.real("learning_rate", 1e-3);
  c.baseline.optimizer = located("baseline.optimizer", base.line("optimizer"), [&] {
    return optimizer_from_string(base.text("optimizer", "adam"));
  });
  c.baseline.batch_size = base.integer("batch_size", 128);
  if (c.baseline.epochs < 1)
    throw ConfigError("baseline.epochs", base.line("epochs"), "must be >= 1");
  if (!(c.baseline.learning_rate > 0.0))
    throw ConfigError("baseline.learning_rate", base.line("learning_rate"), "must be > 0");
  if (c.baseline.batch_size < 1)
    throw ConfigError("baseline.batch_size", base.line("batch_size"), "must be >= 1");

  Section meta(top.node("meta"), "meta",
               {"epochs", "alpha", "beta", "gamma", "second_order", "temperature", "kl_smoothing",
                "batch_size", "optimizer", "weights", "student_init", "checkpoint_every"});
  auto& m = c.meta;
  m.epochs = static_cast<int>(meta.integer("epochs", 20));
  m.alpha = meta.real("alpha", 1e-3);
  m.beta = meta.real("beta", 1.0);
  m.gamma = meta.real("gamma", 1e-3);
  m.second_order = meta.boolean("second_order", true);
  m.temperature = meta.real("temperature", 1.0);
  m.kl_smoothing = meta.real("kl_smoothing", 1e-6);
  m.batch_size = meta.integer("batch_size", 128);
  m.optimizer = located("meta.optimizer", meta.line("optimizer"), [&] {
    return optimizer_from_string(meta.text("optimizer", "sgd"));
  });
  Section w(meta.node("weights"), "meta.weights", {"ac", "cc", "lc"});
  m.weights = {w.real("ac", 1.0), w.real("cc", 1.0), w.real("lc", 1.0)};
  const auto init = meta.text("student_init", "teacher");
  if (init != "teacher" && init != "random")
    throw ConfigError("meta.student_init", meta.line("student_init"),
                      "expected 'teacher' or 'random'");
  c.student_from_teacher = init == "teacher";
  c.checkpoint_every = static_cast<int>(meta.integer("checkpoint_every", 5));
  if (c.checkpoint_every < 0)
    throw ConfigError("meta.checkpoint_every", meta.line("checkpoint_every"), "must be >= 0");
  located("meta", meta.line("epochs"), [&] { m.validate(); });

  Section ev(top.node("evaluation"), "evaluation", {"attacks", "modes", "batch_size"});
  c.evaluation.attacks = attack_list(
      ev, "attacks", d,
      names_to_specs({"FGSM_N", "FGSM_T", "BIM_N", "BIM_T", "PGD_N", "PGD_T", "MIM_N", "MIM_T"},
                     d));
  if (ev.has("modes")) {
    const auto modes = ev.node("modes");
    if (!modes.IsSequence())
      throw ConfigError("evaluation.modes", line_of(modes), "expected a list of modes");
    c.evaluation.modes.clear();
    for (const auto& item : modes)
      c.evaluation.modes.push_back(located("evaluation.modes", line_of(item), [&] {
        return attack_mode_from_string(scalar<std::string>(item, "evaluation.modes", "white or black"));
      }));
  }
  c.evaluation.batch_size = ev.integer("batch_size", 200);
  if (c.evaluation.batch_size < 1)
    throw ConfigError("evaluation.batch_size", ev.line("batch_size"), "must be >= 1");

  Section an(top.node("analysis"), "analysis",
             {"cutoffs", "frequency_attacks", "gradient_samples", "feature_samples",
              "feature_attacks", "alignment_samples", "reference_epochs", "reference_attack"});
  if (an.has("cutoffs")) {
    const auto cutoffs = an.node("cutoffs");
    if (!cutoffs.IsSequence())
      throw ConfigError("analysis.cutoffs", line_of(cutoffs), "expected a list of radii");
    for (const auto& item : cutoffs) {
      const double r = scalar<double>(item, "analysis.cutoffs", "a number");
      if (!(r >= 0.0)) throw ConfigError("analysis.cutoffs", line_of(item), "radius must be >= 0");
      c.analysis.cutoffs.push_back(r);
    }
  } else {
    // Integer radii from 0 to half the shorter image side.
    const auto half = std::min(c.encoder.input_shape.height, c.encoder.input_shape.width) / 2;
    for (int64_t r = 0; r <= half; ++r) c.analysis.cutoffs.push_back(static_cast<double>(r));
  }
  c.analysis.frequency_attacks =
      attack_list(an, "frequency_attacks", d, names_to_specs({"identity", "PGD_N"}, d));
  c.analysis.gradient_samples = an.integer("gradient_samples", 16);
  c.analysis.feature_samples = an.integer("feature_samples", 200);
  c.analysis.feature_attacks =
      attack_list(an, "feature_attacks", d, names_to_specs({"identity", "PGD_N"}, d));
  c.analysis.alignment_samples = an.integer("alignment_samples", 64);
  c.analysis.reference_epochs = static_cast<int>(an.integer("reference_epochs", 0));
  c.analysis.reference_attack = an.text("reference_attack", "PGD_N");
  located("analysis.reference_attack", an.line("reference_attack"),
          [&] { attack_from_name(c.analysis.reference_attack, d); });
  if (c.analysis.gradient_samples < 1 || c.analysis.feature_samples < 1 ||
      c.analysis.alignment_samples < 0 || c.analysis.reference_epochs < 0)
    throw ConfigError("analysis", line_of(top.node("analysis")), "sample counts out of range");

  c.cross_validation = attack_list(top, "cross_validation", d, c.pool.adversarial());

  c.reseed(static_cast<uint64_t>(seed));
  return c;
}

void emit(YAML::Emitter& out, const nlohmann::json& value) {
  switch (value.type()) {
    case nlohmann::json::value_t::object:
      out << YAML::BeginMap;
      for (const auto& [k, v] : value.items()) {
        out << YAML::Key << k << YAML::Value;
        emit(out, v);
      }
      out << YAML::EndMap;
      break;
    case nlohmann::json::value_t::array:
      out << YAML::Flow << YAML::BeginSeq;
      for (const auto& v : value) emit(out, v);
      out << YAML::EndSeq;
      break;
    case nlohmann::json::value_t::string: out << YAML::DoubleQuoted << value.get<std::string>(); break;
    case nlohmann::json::value_t::boolean: out << value.get<bool>(); break;
    case nlohmann::json::value_t::number_integer: out << value.get<int64_t>(); break;
    case nlohmann::json::value_t::number_unsigned: out << value.get<uint64_t>(); break;
    case nlohmann::json::value_t::number_float: out << value.get<double>(); break;
    default: out << YAML::Null;
  }
}

}  // namespace

void ExperimentConfig::reseed(uint64_t global_seed) {
  seed = global_seed;
  pool.seed = derive_seed(seed, "pool");
  teacher.seed = derive_seed(seed, "teacher");
  baseline.seed = derive_seed(seed, "baseline");
  meta.seed = derive_seed(seed, "meta");
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json(*this).dump()); }

ExperimentConfig parse_config_string(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("", e.mark.line + 1, e.msg);
  }
  if (root && !root.IsNull() && !root.IsMap())
    throw ConfigError("", line_of(root), "top level must be a mapping");
  return parse_node(root);
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", 0, "cannot open config file '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_string(buffer.str());
}

nlohmann::json attack_spec_to_json(const AttackSpec& s) {
  return {{"name", s.name()},
          {"method", std::string(to_string(s.method))},
          {"targeted", s.targeted},
          {"epsilon", s.epsilon},
          {"steps", s.steps},
          {"step_size", s.step_size},
          {"momentum_decay", s.momentum_decay},
          {"norm", s.norm == Norm::Linf ? "linf" : "l2"},
          {"random_start", s.random_start},
          {"cw_confidence", s.cw_confidence},
          {"cw_iterations", s.cw_iterations},
          {"cw_penalty", s.cw_penalty},
          {"cw_learning_rate", s.cw_learning_rate}};
}

nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& d = c.attack_defaults;
  nlohmann::json step_size = d.step_size < 0.0 ? nlohmann::json("auto") : nlohmann::json(d.step_size);
  std::vector<std::string> modes;
  for (auto m : c.evaluation.modes) modes.emplace_back(to_string(m));
  std::vector<std::string> pool;
  for (const auto& s : c.pool.adversarial()) pool.push_back(s.name());
  return {
      {"seed", c.seed},
      {"output", c.output.string()},
      {"data",
       {{"path", c.data.path.string()},
        {"fraction", c.data.fraction},
        {"test_samples", c.data.test_samples}}},
      {"encoder",
       {{"backbone", std::string(to_string(c.encoder.backbone))},
        {"feature_dim", c.encoder.feature_dim},
        {"input_shape", c.encoder.input_shape.dims()}}},
      {"attacks",
       {{"epsilon", d.epsilon},
        {"steps", d.steps},
        {"step_size", step_size},
        {"momentum_decay", d.momentum_decay},
        {"random_start", d.random_start},
        {"cw",
         {{"confidence", d.cw_confidence},
          {"iterations", d.cw_iterations},
          {"penalty", d.cw_penalty},
          {"learning_rate", d.cw_learning_rate}}}}},
      {"pool", pool},
      {"teacher",
       {{"epochs", c.teacher.epochs},
        {"learning_rate", c.teacher.learning_rate},
        {"optimizer", std::string(to_string(c.teacher.optimizer))},
        {"reconstruction", std::string(to_string(c.teacher.reconstruction))},
        {"batch_size", c.teacher.batch_size}}},
      {"baseline",
       {{"epochs", c.baseline.epochs},
        {"learning_rate", c.baseline.learning_rate},
        {"optimizer", std::string(to_string(c.baseline.optimizer))},
        {"batch_size", c.baseline.batch_size}}},
      {"meta",
       {{"epochs", c.meta.epochs},
        {"alpha", c.meta.alpha},
        {"beta", c.meta.beta},
        {"gamma", c.meta.gamma},
        {"second_order", c.meta.second_order},
        {"temperature", c.meta.temperature},
        {"kl_smoothing", c.meta.kl_smoothing},
        {"batch_size", c.meta.batch_size},
        {"optimizer", std::string(to_string(c.meta.optimizer))},
        {"weights", {{"ac", c.meta.weights.ac}, {"cc", c.meta.weights.cc}, {"lc", c.meta.weights.lc}}},
        {"student_init", c.student_from_teacher ? "teacher" : "random"},
        {"checkpoint_every", c.checkpoint_every}}},
      {"evaluation",
       {{"attacks", spec_names(c.evaluation.attacks)},
        {"modes", modes},
        {"batch_size", c.evaluation.batch_size}}},
      {"analysis",
       {{"cutoffs", c.analysis.cutoffs},
        {"frequency_attacks", spec_names(c.analysis.frequency_attacks)},
        {"gradient_samples", c.analysis.gradient_samples},
        {"feature_samples", c.analysis.feature_samples},
        {"feature_attacks", spec_names(c.analysis.feature_attacks)},
        {"alignment_samples", c.analysis.alignment_samples},
        {"reference_epochs", c.analysis.reference_epochs},
        {"reference_attack", c.analysis.reference_attack}}},
      {"cross_validation", spec_names(c.cross_validation)},
  };
}

std::string to_yaml(const ExperimentConfig& config) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  emit(out, to_json(config));
  return std::string(out.c_str()) + "\n";
}

}  // namespace mid
