#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <vector>

#include "latte/backend.hpp"
#include "latte/data.hpp"
#include "latte/model.hpp"
#include "latte/trajectory.hpp"

namespace latte {

struct TrajectoryConfig {
  int n = 5;
  std::vector<int> steps;  // explicit plan; overrides n when non-empty
  bool one_based = false;  // explicit steps are 1-based
  bool shared_eps = false;
  DenoiseMode mode = DenoiseMode::kCumulative;

  [[nodiscard]] TimestepPlan plan(int horizon) const;
  [[nodiscard]] ExtractOptions options() const { return {shared_eps, mode}; }
  [[nodiscard]] nlohmann::json to_json() const;
  static TrajectoryConfig from_json(const nlohmann::json& j);
};

/// Everything needed to turn a raw image into a detector Example.
struct FeatureSpec {
  const DenoiserBackend* backend = nullptr;
  TimestepPlan plan;
  ExtractOptions options;
  PreprocessConfig preprocess;  // size = backbone input size
  std::uint64_t seed = 0;
  std::optional<PerturbationSpec> perturbation;
};

/// eps seed of one image: depends on the id, not on its position in a list.
std::uint64_t trajectory_seed(std::uint64_t seed, const std::string& id);

struct ExampleSet {
  std::vector<Example> examples;
  std::vector<BatchFailure> failures;
};

/// Perturbation (if any) is applied to the RGB image before both the
/// trajectory and the backbone see it. Failed items are skipped and listed.
ExampleSet make_examples(std::span<const LabeledImage> images, const FeatureSpec& spec, int workers = 1);
Example make_example(const LabeledImage& image, const FeatureSpec& spec);

struct LoadedImages {
  std::vector<LabeledImage> images;
  std::vector<BatchFailure> failures;
};
/// Reads every record; unreadable files are reported, not fatal.
LoadedImages load_images(const DatasetManifest& manifest, std::span<const DatasetRecord> records, int workers = 1);

}  // namespace latte
