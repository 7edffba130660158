// latte: command-line front end. All work happens in run_command().
#include <CLI11.hpp>

#include <iostream>

#include "latte/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Latent trajectory embedding detector for diffusion-generated images"};
  app.require_subcommand(1);
  latte::CliOptions options;
  std::uint64_t seed = 0;
  std::string out;
  int workers = 1;
  app.add_option("--config", options.configs, "JSON config file(s), applied in order")->check(CLI::ExistingFile);
  app.add_option("--set", options.overrides, "Override one key: section.key=value (repeatable)");
  auto* seed_opt = app.add_option("--seed", seed, "Global seed");
  auto* out_opt = app.add_option("--out", out, "Output directory");
  auto* workers_opt = app.add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  app.fallthrough();

  const char* help[] = {
      "Train toy generators and write a balanced synthetic dataset",
      "Extract latent trajectories and store one container plus sidecar per image",
      "Train a detector on the train split, selecting on the val split",
      "Evaluate a checkpoint on the test split",
      "Cross-source evaluation matrix over eval.checkpoints",
      "Accuracy-vs-strength sweep over eval.perturbations",
      "Per-class correction heatmaps between consecutive timesteps",
      "Export fused embeddings as CSV and binary",
  };
  for (size_t i = 0; i < latte::command_names().size(); ++i) {
    app.add_subcommand(latte::command_names()[i], help[i]);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return latte::kExitUsage;
  }
  options.command = app.get_subcommands().front()->get_name();
  if (*seed_opt) options.seed = seed;
  if (*out_opt) options.out = out;
  if (*workers_opt) options.workers = workers;
  return latte::run_command(options, std::cout, std::cerr);
}
