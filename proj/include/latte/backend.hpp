#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "latte/params.hpp"
#include "latte/schedule.hpp"
#include "latte/tensor.hpp"

namespace latte {

/// Latent-space encoder plus noise predictor eps_theta(z_t, t).
///
/// Implementations are immutable after construction; every const method must
/// be safe to call concurrently. encode() is deterministic (posterior mean).
class DenoiserBackend {
 public:
  virtual ~DenoiserBackend() = default;

  [[nodiscard]] virtual LatentShape latent_shape() const = 0;
  [[nodiscard]] virtual const NoiseSchedule& schedule() const = 0;
  /// Side length of the square RGB input encode() expects.
  [[nodiscard]] virtual int image_size() const = 0;
  [[nodiscard]] virtual LatentTensor encode(const Image& image) const = 0;
  /// `t` is a zero-based schedule index.
  [[nodiscard]] virtual LatentTensor predict_noise(const LatentTensor& z_t, int t) const = 0;
  /// Stable identifier of the weights; recorded next to derived artifacts.
  [[nodiscard]] virtual std::string fingerprint() const = 0;
};

struct ToyBackendSpec {
  int image_size = 32;
  LatentShape latent{4, 8, 8};
  int encoder_hidden = 64;
  int width = 256;  // denoiser hidden width
  int depth = 2;    // denoiser hidden layers
  int time_embedding = 32;
  int ae_epochs = 30;
  int epochs = 40;  // denoiser epochs
  int batch_size = 64;
  double learning_rate = 2e-3;
  int patience = 8;
  double holdout_fraction = 0.1;
  double recon_threshold = 0.02;  // held-out per-pixel reconstruction MSE
  std::uint64_t seed = 0;
  NoiseSchedule schedule = default_schedule();

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static ToyBackendSpec from_json(const nlohmann::json& j);
};

/// Patch autoencoder + MLP noise predictor, small enough to train on a CPU.
///
/// The encoder maps each (image_size / latent.height)^2 RGB patch to one latent
/// pixel; latents are normalized per channel to zero mean and unit variance
/// over the training set.
class ToyBackend final : public DenoiserBackend {
 public:
  /// Randomly initialized backend, unit latent statistics.
  explicit ToyBackend(ToyBackendSpec spec);
  ToyBackend(ToyBackendSpec spec, ParameterSet params, Eigen::VectorXd latent_mean, Eigen::VectorXd latent_std);

  [[nodiscard]] LatentShape latent_shape() const override { return spec_.latent; }
  [[nodiscard]] const NoiseSchedule& schedule() const override { return spec_.schedule; }
  [[nodiscard]] int image_size() const override { return spec_.image_size; }
  [[nodiscard]] LatentTensor encode(const Image& image) const override;
  [[nodiscard]] LatentTensor predict_noise(const LatentTensor& z_t, int t) const override;
  [[nodiscard]] std::string fingerprint() const override;

  /// Rows are flattened latents; one timestep per row.
  [[nodiscard]] Eigen::MatrixXd predict_noise_rows(const Eigen::MatrixXd& z_rows, std::span<const int> t) const;
  [[nodiscard]] Eigen::MatrixXd encode_rows(std::span<const Image> images) const;
  [[nodiscard]] Image decode(const LatentTensor& z) const;
  [[nodiscard]] std::vector<Image> decode_rows(const Eigen::MatrixXd& z_rows) const;

  [[nodiscard]] const ToyBackendSpec& spec() const { return spec_; }
  [[nodiscard]] const ParameterSet& params() const { return params_; }
  [[nodiscard]] const Eigen::VectorXd& latent_mean() const { return latent_mean_; }
  [[nodiscard]] const Eigen::VectorXd& latent_std() const { return latent_std_; }

  void save(const std::filesystem::path& path) const;
  static std::shared_ptr<ToyBackend> load(const std::filesystem::path& path);

  // Building blocks shared with training; all work on batches.
  static void init_params(ParameterSet& ps, const ToyBackendSpec& spec, Rng& rng);
  static Eigen::MatrixXd patch_rows(const ToyBackendSpec& spec, std::span<const Image> images);
  static Eigen::MatrixXd time_embedding(int dim, std::span<const int> t);
  static Eigen::MatrixXd patches_to_latent_rows(const ToyBackendSpec& spec, const Eigen::MatrixXd& per_patch);

 private:
  ToyBackendSpec spec_;
  ParameterSet params_;
  Eigen::VectorXd latent_mean_;
  Eigen::VectorXd latent_std_;
};

struct ToyTrainingReport {
  std::vector<double> ae_losses;
  std::vector<double> denoise_losses;
  double holdout_denoise_mse = 0.0;
  double holdout_zero_mse = 0.0;  // zero-predictor baseline
  double holdout_recon_mse = 0.0;
  bool converged = true;
  std::vector<std::string> warnings;

  [[nodiscard]] bool ok() const { return warnings.empty(); }
  [[nodiscard]] nlohmann::json to_json() const;
};

struct TrainedToyBackend {
  std::shared_ptr<ToyBackend> backend;
  ToyTrainingReport report;
};

/// Trains the autoencoder, then the noise predictor on frozen latents.
/// Deterministic for a fixed spec (including seed) and image list.
TrainedToyBackend train_toy_backend(const ToyBackendSpec& spec, std::span<const Image> images);

/// Generates images by deterministic DDIM-style iteration of
/// single_step_denoise along `steps` evenly spaced timesteps, then decodes.
/// Image i depends only on (seed, i), not on count.
std::vector<Image> sample_toy_fakes(const ToyBackend& backend, int count, int steps, std::uint64_t seed,
                                    double clip = 4.0);

/// Mean per-pixel squared error of decode(encode(x)) against x.
double reconstruction_error(const ToyBackend& backend, std::span<const Image> images);

/// Resolves `backend.kind`: "toy" loads `checkpoint`; "external:<path>"
/// loads an adapter checkpoint from <path> and runs the contract suite.
std::shared_ptr<const DenoiserBackend> load_backend(const std::string& kind, const std::filesystem::path& checkpoint);

/// Shape, determinism and finiteness checks every backend must pass.
/// Returns a list of violations (empty = pass).
std::vector<std::string> check_backend_contract(const DenoiserBackend& backend, std::uint64_t seed = 7);

}  // namespace latte
