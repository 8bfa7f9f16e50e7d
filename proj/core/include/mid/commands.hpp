#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mid/config.hpp"

namespace mid {

/// Command names accepted by run_command.
std::vector<std::string> command_names();

struct RunOptions {
  std::optional<uint64_t> seed;                 // overrides the config seed
  std::optional<std::filesystem::path> output;  // overrides the config output
  std::string device = "cpu";
  std::string model = "mid";  // mid | baseline | teacher: model used by evaluation/analysis
};

/// Runs one pipeline stage. Returns 0 on success; on failure writes a JSON
/// error record to `log` and to <output>/error.json and returns nonzero.
int run_command(const std::string& command, ExperimentConfig config, const RunOptions& options,
                std::ostream& log);

}  // namespace mid
