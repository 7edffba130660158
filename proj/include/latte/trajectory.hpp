#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latte/backend.hpp"
#include "latte/tensor.hpp"

namespace latte {

/// Schedule indices to visit, strictly descending (noisiest first).
struct TimestepPlan {
  std::vector<int> steps;

  [[nodiscard]] int n() const { return static_cast<int>(steps.size()); }
  /// Throws unless strictly descending, non-empty and inside [0, horizon).
  void validate(int horizon) const;
  friend bool operator==(const TimestepPlan&, const TimestepPlan&) = default;
};

/// n = 5 gives [981, 741, 521, 261, 1] and n = 1 gives [521] for a
/// 1000-step horizon. Other n interpolate evenly between the endpoints
/// 981 and 1, rounding to nearest with ties toward the larger step. Other
/// horizons scale 981 and 521 by horizon / 1000; the clean end stays at 1.
TimestepPlan select_timesteps(int n, int horizon = 1000);

/// Plan from explicit steps; one_based subtracts 1 from every entry.
TimestepPlan plan_from_steps(std::vector<int> steps, int horizon, bool one_based = false);

struct Trajectory {
  std::vector<LatentTensor> latents;  // plan order
  TimestepPlan plan;
  std::uint64_t seed = 0;
};

struct ExtractOptions {
  bool shared_eps = false;  // one eps draw reused at every timestep
  DenoiseMode mode = DenoiseMode::kCumulative;
};

/// Error with the timestep that failed.
class TrajectoryError : public Error {
 public:
  TrajectoryError(int timestep, const std::string& what)
      : Error("timestep " + std::to_string(timestep) + ": " + what), timestep_(timestep) {}
  [[nodiscard]] int timestep() const { return timestep_; }

 private:
  int timestep_;
};

/// Forward-noise the encoded image to each planned timestep with a fresh
/// seeded eps, then take one noise-prediction step back.
Trajectory extract_trajectory(const Image& image, const TimestepPlan& plan, const DenoiserBackend& backend,
                              std::uint64_t seed, const ExtractOptions& options = {});

struct BatchFailure {
  size_t index = 0;
  std::string id;
  std::string message;
};

struct BatchResult {
  std::vector<std::optional<Trajectory>> trajectories;  // one slot per input
  std::vector<BatchFailure> failures;
};

/// Element-wise extract_trajectory with explicit per-image seeds. Failures
/// are recorded and the batch continues. Results do not depend on `workers`.
BatchResult batch_extract(std::span<const Image> images, std::span<const std::uint64_t> seeds,
                          const TimestepPlan& plan, const DenoiserBackend& backend, const ExtractOptions& options = {},
                          int workers = 1, std::span<const std::string> ids = {});

/// Seeds derived as derive_seed(seed, image index).
BatchResult batch_extract(std::span<const Image> images, const TimestepPlan& plan, const DenoiserBackend& backend,
                          std::uint64_t seed, const ExtractOptions& options = {}, int workers = 1,
                          std::span<const std::string> ids = {});

/// Binary container of latents plus a JSON sidecar
/// {image_id, plan, seed, backend}.
void save_trajectory(const Trajectory& trajectory, const std::string& image_id, const std::string& backend_fingerprint,
                     const std::filesystem::path& container_path, const std::filesystem::path& sidecar_path);
Trajectory load_trajectory(const std::filesystem::path& container_path);

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn);

}  // namespace latte
