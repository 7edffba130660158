#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <functional>
#include <string>
#include <vector>

#include "latte/autodiff.hpp"
#include "latte/backbone.hpp"
#include "latte/params.hpp"
#include "latte/trajectory.hpp"

namespace latte {

enum class RefineMode { kSeparate, kJoint };
RefineMode parse_refine_mode(const std::string& name);
std::string to_string(RefineMode mode);

struct RefinerConfig {
  int L = 2;
  int h = 8;
  int d = 512;
  RefineMode mode = RefineMode::kSeparate;
  int n = 5;
  int latent_size = 4 * 8 * 8;  // flattened latent width
  int ffn_mult = 4;
  bool literal_sqrt_d = false;  // scale scores by 1/sqrt(d) instead of 1/sqrt(d/h)

  void validate() const;
  [[nodiscard]] int stacks() const { return mode == RefineMode::kSeparate ? n : 1; }
  [[nodiscard]] double score_scale() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static RefinerConfig from_json(const nlohmann::json& j);
};

struct RefinedTrajectory {
  std::vector<Eigen::VectorXd> tokens;
  RefineMode mode = RefineMode::kSeparate;
};

/// Attention weights of every decoder layer, ordered stack-major.
struct RefineTrace {
  std::vector<ad::AttentionWeights> layers;
};

/// Registers refiner.proj plus refiner.stack{i}.layer{l}.{ln1,attn,ln2,ffn}
/// and refiner.stack{i}.norm. Joint mode has a single stack0.
void add_refiner_params(ParameterSet& ps, const RefinerConfig& config, Rng& rng);

/// (rows x latent_size) -> (rows x d) through refiner.proj.
template <typename Params>
ad::Var project_latents(ad::Tape& tape, Params& ps, ad::Var latents);

/// Refines image-major query tokens (B*n x d) against patch tokens
/// (B*N x d). Each query only attends to the patches of its own image.
template <typename Params>
ad::Var refine_forward(ad::Tape& tape, Params& ps, const RefinerConfig& config, ad::Var queries, ad::Var patches,
                       int batch, int num_patches, RefineTrace* trace = nullptr);

Eigen::VectorXd project_latent(const LatentTensor& latent, const ParameterSet& ps);

/// Refines already projected queries (n x d) against one image's patch tokens.
RefinedTrajectory refine_tokens(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& patch_tokens,
                                const RefinerConfig& config, const ParameterSet& ps, RefineTrace* trace = nullptr);

RefinedTrajectory refine(const Trajectory& trajectory, const VisualFeatures& visual, const RefinerConfig& config,
                         const ParameterSet& ps, RefineTrace* trace = nullptr);

struct GradCheckOptions {
  int num_patches = 4;
  std::uint64_t seed = 7;
  double step = 1e-5;
  bool zero_head = false;  // loss weights all zero, so every gradient is zero
  /// Applied to each analytic gradient before comparison (fault injection).
  std::function<void(const std::string& name, Eigen::MatrixXd& grad)> corrupt;
};

struct GradCheckBlock {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double tolerance = 0.0;
  [[nodiscard]] bool passed() const;
  [[nodiscard]] double max_rel_error() const;
  [[nodiscard]] std::vector<std::string> failures() const;
};

/// Central finite differences against the tape for every refiner block.
/// Relative error per entry is |a - f| / max(|a|, |f|, 1e-3 * block max).
GradCheckReport refiner_grad_check(const RefinerConfig& config, double tolerance, const GradCheckOptions& options = {});

}  // namespace latte
