#include "mid/commands.hpp"

#include <fstream>
#include <functional>
#include <map>

#include "mid/analysis.hpp"
#include "mid/checkpoint.hpp"
#include "mid/error.hpp"

namespace mid {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Context {
  ExperimentConfig config;
  RunOptions options;
  std::string command;
  std::string config_hash;
  fs::path out;
  std::ostream& log;

  fs::path teacher_path() const { return out / "teacher" / "teacher.ckpt"; }
  fs::path baseline_path() const { return out / "baseline" / "baseline.ckpt"; }
  fs::path mid_path() const { return out / "mid" / "student.ckpt"; }
  fs::path substitute_path() const { return out / "substitute" / "substitute.ckpt"; }

  json provenance() const {
    return {{"command", command},
            {"config_hash", config_hash},
            {"seed", config.seed},
            {"stage_seeds",
             {{"pool", config.pool.seed},
              {"teacher", config.teacher.seed},
              {"baseline", config.baseline.seed},
              {"meta", config.meta.seed}}}};
  }
  void note(const std::string& line) const { log << "[" << command << "] " << line << "\n"; }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& value) { write_text(path, value.dump(2) + "\n"); }

std::string short_hash(const std::string& hash) { return hash.substr(0, 12); }

Dataset load_data(Context& ctx) {
  auto spec = read_manifest(ctx.config.data.path);
  auto dataset = load_dataset(spec);
  if (ctx.config.data.fraction < 1.0)
    dataset = subsample(dataset, ctx.config.data.fraction, derive_seed(ctx.config.seed, "data"));
  if (!(ctx.config.encoder.input_shape == spec.image_shape)) {
    ctx.note("encoder input shape taken from the dataset manifest");
    ctx.config.encoder.input_shape = spec.image_shape;
    ctx.config.encoder.validate();
  }
  return dataset;
}

Split test_split(const Context& ctx, const Dataset& dataset) {
  return dataset.test().head(ctx.config.data.test_samples);
}

TeacherModel load_teacher(const Context& ctx) {
  if (!fs::exists(ctx.teacher_path()))
    throw Error("no teacher checkpoint at '" + ctx.teacher_path().string() +
                "'; run train-teacher first");
  return teacher_from_checkpoint(load_checkpoint(ctx.teacher_path()));
}

struct LoadedModel {
  Classifier model;
  std::vector<std::string> training_pool;
};

LoadedModel load_model(const Context& ctx) {
  const auto& which = ctx.options.model;
  if (which == "teacher") {
    auto teacher = load_teacher(ctx);
    return {Classifier{teacher.encoder(), teacher.head()}, {}};
  }
  fs::path path;
  std::string producer;
  if (which == "mid") {
    path = ctx.mid_path();
    producer = "train-mid";
  } else if (which == "baseline") {
    path = ctx.baseline_path();
    producer = "train-baseline";
  } else {
    throw InvalidArgument("unknown model '" + which + "' (expected mid, baseline or teacher)");
  }
  if (!fs::exists(path))
    throw Error("no " + which + " checkpoint at '" + path.string() + "'; run " + producer +
                " first");
  auto checkpoint = load_checkpoint(path);
  LoadedModel loaded{classifier_from_checkpoint(checkpoint), {}};
  if (checkpoint.metadata.contains("training_pool"))
    loaded.training_pool = checkpoint.metadata["training_pool"].get<std::vector<std::string>>();
  return loaded;
}

json model_metadata(const Context& ctx, const Dataset& dataset, int epoch) {
  auto meta = ctx.provenance();
  meta["dataset"] = dataset.spec().name;
  meta["epoch"] = epoch;
  return meta;
}

EvaluationOptions evaluation_options(const Context& ctx, const Dataset& dataset,
                                     const std::string& stage) {
  EvaluationOptions options;
  options.seed = derive_seed(ctx.config.seed, stage);
  options.batch_size = ctx.config.evaluation.batch_size;
  options.max_samples = ctx.config.data.test_samples;
  options.dataset = dataset.spec().name;
  return options;
}

int cmd_train_teacher(Context& ctx) {
  auto dataset = load_data(ctx);
  ctx.note("training teacher on " + std::to_string(dataset.train().size()) + " images");
  auto result = train_teacher(ctx.config.teacher, dataset, ctx.config.encoder);
  auto meta = model_metadata(ctx, dataset, ctx.config.teacher.epochs);
  meta["clean_accuracy"] = result.clean_accuracy;
  meta["reconstruction_error"] = result.reconstruction_error;
  save_checkpoint(ctx.teacher_path(), to_checkpoint(result.teacher, meta));
  auto metrics = ctx.provenance();
  metrics["clean_accuracy"] = result.clean_accuracy;
  metrics["reconstruction_error"] = result.reconstruction_error;
  metrics["model_hash"] = result.teacher.hash();
  metrics["config"] = to_json(ctx.config);
  write_json(ctx.out / "teacher" / "metrics.json", metrics);
  ctx.note("clean accuracy " + std::to_string(result.clean_accuracy) + "%, reconstruction error " +
           std::to_string(result.reconstruction_error));
  return 0;
}

int cmd_train_baseline(Context& ctx) {
  auto dataset = load_data(ctx);
  SparsityTrace trace;
  auto model = train_classifier(ctx.config.encoder, dataset.spec().num_classes, dataset.train(),
                                ctx.config.baseline, std::nullopt,
                                [&](int epoch, const Classifier& m) {
                                  trace.epochs.push_back(epoch);
                                  trace.values.push_back(sparsity_index(m.encoder.params()));
                                });
  const double clean = accuracy(model, test_split(ctx, dataset));
  auto meta = model_metadata(ctx, dataset, ctx.config.baseline.epochs);
  meta["role"] = "baseline";
  meta["training_pool"] = json::array();
  save_checkpoint(ctx.baseline_path(), to_checkpoint(model, meta));
  auto metrics = ctx.provenance();
  metrics["clean_accuracy"] = clean;
  metrics["model_hash"] = model.hash();
  metrics["sparsity"] = trace.values;
  write_json(ctx.out / "baseline" / "metrics.json", metrics);
  write_text(ctx.out / "baseline" / "sparsity.csv", to_csv(trace));
  ctx.note("clean accuracy " + std::to_string(clean) + "%");
  return 0;
}

json step_json(const MetaStepReport& r) {
  return {{"iteration", r.iteration},       {"epoch", r.epoch},
          {"meta_train", r.meta_train},     {"meta_train_ac", r.meta_train_ac},
          {"meta_train_cc", r.meta_train_cc}, {"meta_train_lc", r.meta_train_lc},
          {"meta_test", r.meta_test},       {"meta_test_ac", r.meta_test_ac},
          {"meta_test_cc", r.meta_test_cc}, {"meta_test_lc", r.meta_test_lc},
          {"gradient_norm", r.gradient_norm}, {"train_specs", r.train_specs},
          {"holdout_spec", r.holdout_spec}};
}

int cmd_train_mid(Context& ctx) {
  auto dataset = load_data(ctx);
  auto teacher = load_teacher(ctx);
  if (!(teacher.encoder().spec() == ctx.config.encoder))
    throw InvalidArgument("teacher checkpoint does not match the configured encoder");
  const auto& cfg = ctx.config;
  auto student = cfg.student_from_teacher
                     ? StudentEncoder::from_teacher(teacher)
                     : StudentEncoder::random(cfg.encoder, derive_seed(cfg.seed, "student"));

  auto pool = cfg.pool;
  const auto pool_names = pool.names();
  const auto mid_dir = ctx.out / "mid";
  fs::create_directories(mid_dir);
  std::ofstream history(mid_dir / "history.jsonl", std::ios::binary);

  auto defended_metadata = [&](int epoch) {
    auto meta = model_metadata(ctx, dataset, epoch);
    meta["role"] = "mid";
    meta["training_pool"] = pool_names;
    meta["teacher_hash"] = teacher.hash();
    return meta;
  };

  const auto alignment_batch = dataset.train().slice(
      0, std::min(dataset.train().size(), cfg.analysis.alignment_samples));
  const uint64_t alignment_seed = derive_seed(cfg.seed, "alignment");
  std::vector<std::pair<int, double>> alignment;
  auto record_alignment = [&](int epoch, const StudentEncoder& s) {
    if (cfg.analysis.alignment_samples == 0) return;
    const double value =
        mean_pool_alignment(s, teacher, alignment_batch, pool, cfg.meta, alignment_seed);
    alignment.emplace_back(epoch, value);
    ctx.note("epoch " + std::to_string(epoch) + " mean pool gradient alignment " +
             std::to_string(value));
  };
  record_alignment(0, student);

  SparsityTrace sparsity;
  MidHooks hooks;
  hooks.on_step = [&](const MetaStepReport& r) { history << step_json(r).dump() << "\n"; };
  hooks.on_epoch = [&](const MidEpochSummary& s, const StudentEncoder& current) {
    sparsity.epochs.push_back(s.epoch);
    sparsity.values.push_back(s.sparsity_index);
    ctx.note("epoch " + std::to_string(s.epoch) + " meta_train " + std::to_string(s.meta_train) +
             " meta_test " + std::to_string(s.meta_test));
    record_alignment(s.epoch, current);
    if (cfg.checkpoint_every > 0 && s.epoch % cfg.checkpoint_every == 0)
      save_checkpoint(mid_dir / "checkpoints" / ("epoch_" + std::to_string(s.epoch) + ".ckpt"),
                      to_checkpoint(defended_model(current, teacher), defended_metadata(s.epoch)));
  };
  hooks.on_failure = [&](const StudentEncoder& current) {
    save_checkpoint(mid_dir / "failure.ckpt",
                    to_checkpoint(defended_model(current, teacher), defended_metadata(-1)));
  };

  auto result = train_mid(student, teacher, dataset.train(), pool, cfg.meta, hooks);
  history.close();

  auto model = defended_model(student, teacher);
  save_checkpoint(ctx.mid_path(), to_checkpoint(model, defended_metadata(cfg.meta.epochs)));
  write_text(mid_dir / "sparsity.csv", to_csv(sparsity));
  std::string alignment_csv = "epoch,alignment\n";
  for (const auto& [epoch, value] : alignment)
    alignment_csv += std::to_string(epoch) + "," + json(value).dump() + "\n";
  write_text(mid_dir / "alignment.csv", alignment_csv);

  const double clean = accuracy(model, test_split(ctx, dataset));
  auto metrics = ctx.provenance();
  metrics["clean_accuracy"] = clean;
  metrics["model_hash"] = model.hash();
  metrics["teacher_hash"] = teacher.hash();
  metrics["training_pool"] = pool_names;
  metrics["sparsity"] = sparsity.values;
  json epochs = json::array();
  for (const auto& e : result.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"meta_train", e.meta_train},
                      {"meta_test", e.meta_test},
                      {"sparsity_index", e.sparsity_index}});
  metrics["epochs"] = epochs;
  json align = json::array();
  for (const auto& [epoch, value] : alignment) align.push_back({{"epoch", epoch}, {"alignment", value}});
  metrics["alignment"] = align;
  write_json(mid_dir / "metrics.json", metrics);
  ctx.note("clean accuracy " + std::to_string(clean) + "%");
  return 0;
}

void write_report(const Context& ctx, const std::string& stem, const EvaluationReport& report) {
  write_text(ctx.out / "reports" / (stem + ".csv"), to_csv(report));
  auto doc = to_json(report);
  doc["provenance"] = ctx.provenance();
  write_json(ctx.out / "reports" / (stem + ".json"), doc);
}

Classifier substitute_for(const Context& ctx, const Dataset& dataset) {
  if (fs::exists(ctx.substitute_path()))
    return classifier_from_checkpoint(load_checkpoint(ctx.substitute_path()));
  ctx.note("training substitute model for black-box attacks");
  auto substitute = train_substitute(dataset, ctx.config.encoder, ctx.config.baseline);
  auto meta = model_metadata(ctx, dataset, ctx.config.baseline.epochs);
  meta["role"] = "substitute";
  save_checkpoint(ctx.substitute_path(), to_checkpoint(substitute, meta));
  return substitute;
}

int cmd_evaluate(Context& ctx) {
  auto dataset = load_data(ctx);
  auto [model, pool] = load_model(ctx);
  const auto test = test_split(ctx, dataset);
  std::vector<EvaluationReport> parts;
  for (auto mode : ctx.config.evaluation.modes) {
    std::optional<Classifier> substitute;
    if (mode == AttackMode::Black) substitute = substitute_for(ctx, dataset);
    parts.push_back(evaluate_robustness(
        model, test, ctx.config.evaluation.attacks, mode, pool,
        evaluation_options(ctx, dataset, "evaluate"), substitute ? &*substitute : nullptr));
  }
  auto report = merge_reports(parts);
  const auto stem = "evaluation_" + ctx.options.model + "_" + short_hash(report.model_hash) + "_" +
                    dataset.spec().name;
  write_report(ctx, stem, report);
  ctx.note("benign " + std::to_string(report.benign_accuracy) + "%, average " +
           std::to_string(report.average_with_benign) + "%");
  for (const auto& row : report.rows)
    ctx.note(row.attack + " (" + std::string(to_string(row.mode)) +
             (row.known ? ", known" : ", unknown") + ") " + std::to_string(row.accuracy) + "%");
  return 0;
}

int cmd_analyze_frequency(Context& ctx) {
  auto dataset = load_data(ctx);
  auto [model, pool] = load_model(ctx);
  const auto test = test_split(ctx, dataset);
  const auto& a = ctx.config.analysis;
  auto curve = frequency_robustness_curve(model, test, a.frequency_attacks, a.cutoffs,
                                          derive_seed(ctx.config.seed, "frequency"),
                                          ctx.config.evaluation.batch_size);
  const auto stem = "frequency_" + ctx.options.model + "_" + short_hash(model.hash());
  write_text(ctx.out / "reports" / (stem + ".csv"), to_csv(curve));

  auto doc = ctx.provenance();
  doc["model_hash"] = model.hash();
  doc["cutoffs"] = a.cutoffs;
  json correlations = json::object();
  for (const auto& spec : a.frequency_attacks) {
    const auto low = curve.series("low", spec.name());
    try {
      correlations[spec.name()] = spearman(a.cutoffs, low);
    } catch (const Error&) {
      correlations[spec.name()] = nullptr;
    }
  }
  doc["low_band_spearman"] = correlations;
  write_json(ctx.out / "reports" / (stem + ".json"), doc);

  // One row per cutoff: low bands of the first images, then their high bands.
  const int64_t shown = std::min<int64_t>(8, test.size());
  auto sample = test.slice(0, shown).images;
  std::vector<torch::Tensor> tiles;
  for (double r : a.cutoffs) {
    auto bands = frequency_split(sample, r);
    tiles.push_back(bands.low);
    tiles.push_back(bands.high.abs().clamp_max(1.0));
  }
  write_png_grid(ctx.out / "reports" / (stem + "_bands.png"), torch::cat(tiles, 0), 2 * shown);
  ctx.note("wrote " + stem + ".csv");
  return 0;
}

SparsityTrace trace_from_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("no MID metrics at '" + path.string() + "'; run train-mid first");
  const auto doc = json::parse(in);
  SparsityTrace trace;
  for (const auto& e : doc.at("epochs")) {
    trace.epochs.push_back(e.at("epoch").get<int>());
    trace.values.push_back(e.at("sparsity_index").get<double>());
  }
  return trace;
}

int cmd_analyze_sparsity(Context& ctx) {
  auto mid_trace = trace_from_metrics(ctx.out / "mid" / "metrics.json");
  auto dataset = load_data(ctx);
  const auto& cfg = ctx.config;
  auto reference_config = cfg.baseline;
  reference_config.epochs = cfg.analysis.reference_epochs > 0 ? cfg.analysis.reference_epochs
                                                              : std::max(1, cfg.meta.epochs);
  reference_config.seed = derive_seed(cfg.seed, "sparsity-reference");
  const auto attack = attack_from_name(cfg.analysis.reference_attack, cfg.attack_defaults);
  ctx.note("adversarial-training reference with " + attack.name() + " for " +
           std::to_string(reference_config.epochs) + " epochs from the teacher encoder and head");
  // Same starting point as the MID student.
  const auto teacher = load_teacher(ctx);
  SparsityTrace reference;
  fine_tune_classifier(Classifier{teacher.encoder().clone(), teacher.head().clone()},
                       dataset.train(), reference_config, attack,
                       [&](int epoch, const Classifier& m) {
                         reference.epochs.push_back(epoch);
                         reference.values.push_back(sparsity_index(m.encoder.params()));
                       });
  write_text(ctx.out / "reports" / "sparsity_mid.csv", to_csv(mid_trace));
  write_text(ctx.out / "reports" / "sparsity_reference.csv", to_csv(reference));
  auto doc = ctx.provenance();
  doc["mid_plateaued"] = sparsity_plateaued(mid_trace);
  doc["reference_increasing"] = sparsity_increasing(reference);
  doc["reference_attack"] = attack.name();
  doc["mid"] = mid_trace.values;
  doc["reference"] = reference.values;
  write_json(ctx.out / "reports" / "sparsity_summary.json", doc);
  ctx.note(std::string("MID plateaued: ") + (doc["mid_plateaued"].get<bool>() ? "yes" : "no") +
           ", reference increasing: " + (doc["reference_increasing"].get<bool>() ? "yes" : "no"));
  return 0;
}

torch::Tensor normalize_per_image(const GradientMap& map) {
  auto lo = map.minimum.view({-1, 1, 1, 1});
  auto span = (map.maximum - map.minimum).clamp_min(1e-12).view({-1, 1, 1, 1});
  return (map.gradients - lo) / span;
}

int cmd_emit_gradients(Context& ctx) {
  auto dataset = load_data(ctx);
  auto [model, pool] = load_model(ctx);
  const auto test = test_split(ctx, dataset);
  auto batch = test.slice(0, std::min(test.size(), ctx.config.analysis.gradient_samples));
  const auto dir = ctx.out / "gradients";
  const auto stem = ctx.options.model + "_" + short_hash(model.hash());
  const int64_t columns = std::min<int64_t>(8, batch.size());

  auto map = input_gradient_map(logits_fn(model), batch);
  write_png_grid(dir / (stem + "_inputs.png"), batch.images, columns);
  write_png_grid(dir / (stem + "_gradients.png"), normalize_per_image(map), columns);

  auto doc = ctx.provenance();
  doc["model_hash"] = model.hash();
  doc["samples"] = batch.size();
  if (fs::exists(ctx.teacher_path())) {
    auto teacher = load_teacher(ctx);
    std::mt19937_64 rng(derive_seed(ctx.config.seed, "emit-gradients"));
    const auto spec = attack_from_name("PGD_N", ctx.config.attack_defaults);
    auto adversarial = generate(spec, logits_fn(model), batch, model.head.num_classes(), rng);
    write_png_grid(dir / (stem + "_adversarial.png"), adversarial.images, columns);
    write_png_grid(dir / (stem + "_decoded.png"), regenerate(teacher, model.encoder, batch).images,
                   columns);
    write_png_grid(dir / (stem + "_decoded_adversarial.png"),
                   regenerate(teacher, model.encoder, adversarial).images, columns);
    doc["decoded_attack"] = spec.name();
  }
  write_json(dir / (stem + ".json"), doc);
  ctx.note("wrote gradient maps for " + std::to_string(batch.size()) + " images");
  return 0;
}

int cmd_export_features(Context& ctx) {
  auto dataset = load_data(ctx);
  auto [model, pool] = load_model(ctx);
  auto split = dataset.test().head(ctx.config.analysis.feature_samples);
  auto rows = export_features(model, split, ctx.config.analysis.feature_attacks,
                              derive_seed(ctx.config.seed, "features"),
                              ctx.config.evaluation.batch_size);
  const auto stem = "features_" + ctx.options.model + "_" + short_hash(model.hash());
  write_text(ctx.out / "features" / (stem + ".csv"), features_to_csv(rows));
  auto doc = ctx.provenance();
  doc["model_hash"] = model.hash();
  doc["rows"] = rows.size();
  write_json(ctx.out / "features" / (stem + ".json"), doc);
  ctx.note("wrote " + std::to_string(rows.size()) + " feature rows");
  return 0;
}

int cmd_cross_validate(Context& ctx) {
  auto dataset = load_data(ctx);
  auto teacher = load_teacher(ctx);
  CrossValidationConfig cv;
  cv.meta = ctx.config.meta;
  cv.evaluation = evaluation_options(ctx, dataset, "cross-validation.evaluate");
  cv.student_from_teacher = ctx.config.student_from_teacher;
  cv.seed = derive_seed(ctx.config.seed, "cross-validation");
  auto rounds = cross_validation_protocol(ctx.config.cross_validation, dataset, teacher, cv);

  std::vector<EvaluationReport> reports;
  json doc_rounds = json::array();
  for (const auto& round : rounds) {
    reports.push_back(round.report);
    doc_rounds.push_back({{"holdout", round.holdout.name()},
                          {"training_pool", round.training_pool},
                          {"report", to_json(round.report)}});
    ctx.note("holdout " + round.holdout.name() + ": " +
             std::to_string(round.report.rows.front().accuracy) + "%");
  }
  auto merged = merge_reports(reports);
  merged.training_pool.clear();
  write_text(ctx.out / "reports" / "cross_validation.csv", to_csv(merged));
  auto doc = ctx.provenance();
  doc["rounds"] = doc_rounds;
  write_json(ctx.out / "reports" / "cross_validation.json", doc);
  return 0;
}

using Handler = std::function<int(Context&)>;

const std::map<std::string, Handler>& handlers() {
  static const std::map<std::string, Handler> table = {
      {"train-teacher", cmd_train_teacher},       {"train-baseline", cmd_train_baseline},
      {"train-mid", cmd_train_mid},               {"evaluate", cmd_evaluate},
      {"analyze-frequency", cmd_analyze_frequency}, {"analyze-sparsity", cmd_analyze_sparsity},
      {"emit-gradients", cmd_emit_gradients},     {"export-features", cmd_export_features},
      {"cross-validate", cmd_cross_validate},
  };
  return table;
}

std::string error_type(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const IngestionError*>(&e)) return "ingestion";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const InvalidArgument*>(&e)) return "invalid-argument";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const Error*>(&e)) return "error";
  return "internal";
}

}  // namespace

std::vector<std::string> command_names() {
  std::vector<std::string> out;
  for (const auto& [name, _] : handlers()) out.push_back(name);
  return out;
}

int run_command(const std::string& command, ExperimentConfig config, const RunOptions& options,
                std::ostream& log) {
  if (options.seed) config.reseed(*options.seed);
  if (options.output) config.output = *options.output;
  const auto hash = config.hash();
  Context ctx{std::move(config), options, command, hash, {}, log};
  ctx.out = ctx.config.output;
  try {
    const auto it = handlers().find(command);
    if (it == handlers().end()) throw InvalidArgument("unknown command '" + command + "'");
    if (options.device != "cpu")
      throw InvalidArgument("device '" + options.device + "' is not available; this build runs on cpu");
    fs::create_directories(ctx.out);
    write_text(ctx.out / ("config_" + short_hash(hash) + ".yaml"), to_yaml(ctx.config));
    return it->second(ctx);
  } catch (const std::exception& e) {
    json record = {{"command", command}, {"type", error_type(e)}, {"error", e.what()},
                   {"config_hash", hash}};
    if (const auto* n = dynamic_cast<const NumericError*>(&e)) record["stage"] = n->stage();
    log << record.dump() << "\n";
    try {
      write_json(ctx.out / "error.json", record);
    } catch (const std::exception&) {
    }
    return 1;
  }
}

}  // namespace mid
