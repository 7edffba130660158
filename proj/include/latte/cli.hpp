#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace latte {

enum ExitCode : int {
  kExitOk = 0,
  kExitRuntime = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitIncompatible = 4,
  kExitTolerance = 5,
};

struct CliOptions {
  std::string command;
  std::vector<std::filesystem::path> configs;
  std::vector<std::string> overrides;  // section.key=value
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> workers;
};

const std::vector<std::string>& command_names();

/// Resolves the configuration, echoes it to <out>/resolved_config.json and
/// runs one subcommand. Never throws; failures map to ExitCode values.
int run_command(const CliOptions& options, std::ostream& out, std::ostream& log);

}  // namespace latte
