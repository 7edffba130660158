#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "latte/backbone.hpp"
#include "latte/fusion.hpp"
#include "latte/layers.hpp"
#include "latte/refiner.hpp"

namespace latte {

/// Which inputs feed the classifier. Variant names follow the component
/// ablation: A visual only, B latent only, C visual + latent, D all three.
struct Components {
  bool visual = true;
  bool latent = true;
  bool refine = true;

  void validate() const;
  [[nodiscard]] std::string name() const;
  static Components from_name(const std::string& variant);
  friend bool operator==(const Components&, const Components&) = default;
};

/// d lives in backbone.d and n in refiner.n; normalize() copies them into
/// the other sections.
struct ModelConfig {
  BackboneConfig backbone;
  RefinerConfig refiner;
  AggregationConfig aggregate;
  Components components;
  std::uint64_t init_seed = 0;

  void normalize();
  void validate() const;
  [[nodiscard]] int d() const { return backbone.d; }
  [[nodiscard]] int n() const { return refiner.n; }
  [[nodiscard]] int feature_width() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// One detector input: backbone-ready image plus the flattened trajectory.
struct Example {
  std::string id;
  int label = 0;
  std::string source;
  Image image;              // backbone input, preprocessed
  Eigen::MatrixXd latents;  // n x latent_size, plan order
};

class LatteModel {
 public:
  explicit LatteModel(ModelConfig config);
  LatteModel(ModelConfig config, ParameterSet params);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] ParameterSet& params() { return params_; }
  [[nodiscard]] const ParameterSet& params() const { return params_; }

  /// Fused embedding z for each example, (B x feature_width).
  template <typename Params>
  static ad::Var embed(ad::Tape& tape, Params& ps, const ModelConfig& config, std::span<const Example* const> batch);
  template <typename Params>
  static ad::Var logits(ad::Tape& tape, Params& ps, const ModelConfig& config, std::span<const Example* const> batch);

  /// Probabilities of class fake, evaluated in fixed chunks so the result does
  /// not depend on `workers`.
  [[nodiscard]] Eigen::VectorXd predict(std::span<const Example> examples, int workers = 1) const;
  [[nodiscard]] Eigen::MatrixXd embeddings(std::span<const Example> examples, int workers = 1) const;

  /// Per-timestep tokens after projection (and refinement, unless the
  /// variant skips it), one entry per example.
  [[nodiscard]] std::vector<RefinedTrajectory> refined_tokens(std::span<const Example> examples,
                                                              int workers = 1) const;
  /// Applies the fine_tune flag to backbone parameters.
  void apply_trainable();

  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = {}) const;
  /// Throws IncompatibleCheckpoint when the file is not a model checkpoint or
  /// its tensors do not match its recorded architecture.
  static LatteModel load(const std::filesystem::path& path, nlohmann::json* meta = nullptr);
  /// Same, and additionally requires the recorded architecture to equal `expected`.
  static LatteModel load_compatible(const std::filesystem::path& path, const ModelConfig& expected,
                                    nlohmann::json* meta = nullptr);

  static constexpr int kChunk = 64;

 private:
  void init_params();

  ModelConfig config_;
  ParameterSet params_;
};

}  // namespace latte
