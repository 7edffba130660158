#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <optional>
#include <string>

#include "latte/tensor.hpp"

namespace latte {

/// Per-step beta/alpha/alpha-bar tables of a discrete diffusion chain.
///
/// Indices are zero-based: alpha_bar(0) = alpha(0). Immutable after
/// construction; the constructor validates every table invariant.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(Eigen::VectorXd betas);

  [[nodiscard]] int num_steps() const { return static_cast<int>(betas_.size()); }
  [[nodiscard]] double beta(int t) const { return betas_[check(t)]; }
  [[nodiscard]] double alpha(int t) const { return alphas_[check(t)]; }
  [[nodiscard]] double alpha_bar(int t) const { return alpha_bars_[check(t)]; }

  [[nodiscard]] const Eigen::VectorXd& betas() const { return betas_; }
  [[nodiscard]] const Eigen::VectorXd& alphas() const { return alphas_; }
  [[nodiscard]] const Eigen::VectorXd& alpha_bars() const { return alpha_bars_; }

  /// Set when the schedule came from build_linear_schedule.
  [[nodiscard]] std::optional<std::pair<double, double>> linear_range() const { return linear_range_; }

  [[nodiscard]] nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

  friend bool operator==(const NoiseSchedule& a, const NoiseSchedule& b) { return a.betas_ == b.betas_; }

 private:
  friend NoiseSchedule build_linear_schedule(int, double, double);
  int check(int t) const;

  Eigen::VectorXd betas_;
  Eigen::VectorXd alphas_;
  Eigen::VectorXd alpha_bars_;
  std::optional<std::pair<double, double>> linear_range_;
};

/// Linearly spaced betas from beta_start to beta_end inclusive.
NoiseSchedule build_linear_schedule(int num_steps, double beta_start, double beta_end);

/// 1000 steps, beta 1e-4 .. 2e-2.
NoiseSchedule default_schedule();

enum class DenoiseMode {
  kCumulative,  // z_t - sqrt(1 - alpha_bar_t) * eps
  kLiteral,     // z_t - sqrt(1 - alpha_t) * eps
};

DenoiseMode parse_denoise_mode(const std::string& name);
std::string to_string(DenoiseMode mode);

namespace detail {
template <typename Scalar>
void require_same_shape(const BasicLatent<Scalar>& a, const BasicLatent<Scalar>& b, const char* what) {
  if (!(a.shape == b.shape) || a.data.size() != b.data.size()) {
    throw InvalidArgument(std::string(what) + ": shape mismatch " + to_string(a.shape) + " vs " +
                          to_string(b.shape));
  }
}
}  // namespace detail

/// Closed-form forward noising: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.
template <typename Scalar>
BasicLatent<Scalar> forward_noise(const BasicLatent<Scalar>& z0, int t, const BasicLatent<Scalar>& eps,
                                  const NoiseSchedule& schedule) {
  detail::require_same_shape(z0, eps, "forward_noise");
  const double ab = schedule.alpha_bar(t);
  const auto signal = static_cast<Scalar>(std::sqrt(ab));
  const auto noise = static_cast<Scalar>(std::sqrt(1.0 - ab));
  return BasicLatent<Scalar>(z0.shape, signal * z0.data + noise * eps.data);
}

/// One noise-prediction correction of z_t, no rescaling by 1/sqrt(ab_t).
template <typename Scalar>
BasicLatent<Scalar> single_step_denoise(const BasicLatent<Scalar>& z_t, int t, const BasicLatent<Scalar>& eps_pred,
                                        const NoiseSchedule& schedule,
                                        DenoiseMode mode = DenoiseMode::kCumulative) {
  detail::require_same_shape(z_t, eps_pred, "single_step_denoise");
  double coeff = 0.0;
  switch (mode) {
    case DenoiseMode::kCumulative:
      coeff = std::sqrt(1.0 - schedule.alpha_bar(t));
      break;
    case DenoiseMode::kLiteral:
      coeff = std::sqrt(1.0 - schedule.alpha(t));
      break;
    default:
      throw InvalidArgument("single_step_denoise: unknown mode");
  }
  return BasicLatent<Scalar>(z_t.shape, z_t.data - static_cast<Scalar>(coeff) * eps_pred.data);
}

}  // namespace latte
