#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "mid/commands.hpp"

using namespace mid;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Report names carry the model hash, so match on prefix and suffix.
fs::path find_one(const fs::path& dir, const std::string& prefix, const std::string& suffix) {
  std::vector<fs::path> hits;
  if (fs::exists(dir))
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (name.starts_with(prefix) && name.ends_with(suffix)) hits.push_back(e.path());
    }
  EXPECT_EQ(hits.size(), 1u) << dir << " " << prefix << "*" << suffix;
  return hits.empty() ? dir / (prefix + suffix) : hits.front();
}

ExperimentConfig tiny_config(const fs::path& out) {
  auto c = parse_config_string(R"(
data: {fraction: 0.05, test_samples: 40}
encoder: {backbone: mlp-tiny, feature_dim: 8}
attacks: {epsilon: 0.3, steps: 3}
teacher: {epochs: 1, batch_size: 50}
baseline: {epochs: 1, batch_size: 50}
meta: {epochs: 2, batch_size: 100, checkpoint_every: 1}
evaluation: {attacks: [FGSM_N, PGD_T], modes: [white, black]}
analysis:
  cutoffs: [0, 4, 40]
  gradient_samples: 4
  feature_samples: 6
  alignment_samples: 8
  reference_epochs: 2
cross_validation: [PGD_N, PGD_T, MIM_N]
)");
  c.data.path = MID_TEST_DATA_DIR;
  c.output = out;
  c.reseed(17);
  return c;
}

int run(const std::string& command, const ExperimentConfig& c, std::string model = "mid") {
  std::ostringstream log;
  RunOptions options;
  options.model = std::move(model);
  int code = run_command(command, c, options, log);
  EXPECT_EQ(code, 0) << command << ": " << log.str();
  return code;
}

}  // namespace

TEST(Commands, FullPipelineWritesArtifacts) {
  auto out = fixtures::temp_dir("pipeline");
  auto c = tiny_config(out);
  const auto hash12 = c.hash().substr(0, 12);
  for (const auto* cmd : {"train-teacher", "train-baseline", "train-mid", "evaluate",
                          "analyze-frequency", "analyze-sparsity", "emit-gradients",
                          "export-features"})
    ASSERT_EQ(run(cmd, c), 0) << cmd;

  EXPECT_TRUE(fs::exists(out / "teacher" / "teacher.ckpt"));
  EXPECT_TRUE(fs::exists(out / "baseline" / "baseline.ckpt"));
  EXPECT_TRUE(fs::exists(out / "mid" / "student.ckpt"));
  EXPECT_TRUE(fs::exists(out / "mid" / "checkpoints" / "epoch_1.ckpt"));
  EXPECT_TRUE(fs::exists(out / ("config_" + hash12 + ".yaml")));

  auto history = slurp(out / "mid" / "history.jsonl");
  EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 4);  // 2 epochs x 2 batches
  auto alignment = slurp(out / "mid" / "alignment.csv");
  EXPECT_EQ(alignment.substr(0, alignment.find('\n')), "epoch,alignment");
  EXPECT_EQ(std::count(alignment.begin(), alignment.end(), '\n'), 4);

  const auto report = find_one(out / "reports", "evaluation_mid_", "_mnist.csv");
  auto csv = slurp(report);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);  // header + 2 attacks × 2 modes
  EXPECT_NE(csv.find("PGD_T,true,white,true"), std::string::npos);
  EXPECT_NE(csv.find("FGSM_N,false,black,false"), std::string::npos);

  find_one(out / "reports", "frequency_mid_", ".csv");
  EXPECT_TRUE(fs::exists(out / "reports" / "sparsity_reference.csv"));
  find_one(out / "gradients", "mid_", "_gradients.png");
  find_one(out / "features", "features_mid_", ".csv");

  // Re-running evaluation reproduces the CSV byte for byte.
  ASSERT_EQ(run("evaluate", c), 0);
  EXPECT_EQ(slurp(report), csv);

  ASSERT_EQ(run("evaluate", c, "baseline"), 0);
  find_one(out / "reports", "evaluation_baseline_", "_mnist.csv");
}

TEST(Commands, CrossValidateWritesOneRowPerHoldout) {
  auto out = fixtures::temp_dir("crossval");
  auto c = tiny_config(out);
  c.meta.epochs = 1;
  ASSERT_EQ(run("train-teacher", c), 0);
  ASSERT_EQ(run("cross-validate", c), 0);
  auto csv = slurp(out / "reports" / "cross_validation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Commands, FailuresProduceErrorRecord) {
  auto out = fixtures::temp_dir("failure");
  auto c = tiny_config(out);
  std::ostringstream log;
  EXPECT_NE(run_command("train-mid", c, {}, log), 0);  // no teacher yet
  auto record = nlohmann::json::parse(slurp(out / "error.json"));
  EXPECT_EQ(record["command"], "train-mid");
  EXPECT_TRUE(record.contains("error"));

  c.data.path = out / "missing";
  EXPECT_NE(run_command("train-teacher", c, {}, log), 0);
  EXPECT_NE(run_command("no-such-command", c, {}, log), 0);
  RunOptions gpu;
  gpu.device = "cuda";
  EXPECT_NE(run_command("train-teacher", c, gpu, log), 0);
}
