// Command-line front end: mid <command> --config FILE [--seed N] [--output DIR]
#include <iostream>

#include "CLI11.hpp"
#include "mid/commands.hpp"
#include "mid/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Meta invariance defense: training, evaluation and analysis"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> output;
  mid::RunOptions options;

  for (const auto& name : mid::command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment YAML file")->required();
    sub->add_option("--seed", seed, "override the global seed");
    sub->add_option("--output", output, "override the output directory");
    sub->add_option("--device", options.device, "compute device")->capture_default_str();
    sub->add_option("--model", options.model, "model to evaluate or analyze: mid, baseline, teacher")
        ->capture_default_str();
  }
  CLI11_PARSE(app, argc, argv);

  const auto command = app.get_subcommands().front()->get_name();
  options.seed = seed;
  if (output) options.output = *output;

  mid::ExperimentConfig config;
  try {
    config = mid::parse_config(config_path);
  } catch (const mid::Error& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  return mid::run_command(command, std::move(config), options, std::cerr);
}
