#include "latte/schedule.hpp"

namespace latte {

std::string to_string(const LatentShape& shape) {
  return "(" + std::to_string(shape.channels) + "," + std::to_string(shape.height) + "," +
         std::to_string(shape.width) + ")";
}

NoiseSchedule::NoiseSchedule(Eigen::VectorXd betas) : betas_(std::move(betas)) {
  const Eigen::Index n = betas_.size();
  if (n < 1) throw InvalidArgument("noise schedule needs at least one step");
  alphas_.resize(n);
  alpha_bars_.resize(n);
  double running = 1.0;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double b = betas_[t];
    if (!(b > 0.0 && b < 1.0)) {
      throw InvalidArgument("beta[" + std::to_string(t) + "] = " + std::to_string(b) + " outside (0, 1)");
    }
    alphas_[t] = 1.0 - b;
    running *= alphas_[t];
    alpha_bars_[t] = running;
  }
  if (!(alpha_bars_[n - 1] > 0.0)) throw InvalidArgument("alpha_bar underflowed to zero");
}

int NoiseSchedule::check(int t) const {
  if (t < 0 || t >= num_steps()) {
    throw InvalidArgument("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_steps()) + ")");
  }
  return t;
}

NoiseSchedule build_linear_schedule(int num_steps, double beta_start, double beta_end) {
  if (num_steps < 1) throw InvalidArgument("num_steps must be positive");
  if (!(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0)) {
    throw InvalidArgument("beta_start and beta_end must lie in (0, 1)");
  }
  if (beta_start > beta_end) throw InvalidArgument("beta_start must not exceed beta_end");
  Eigen::VectorXd betas(num_steps);
  if (num_steps == 1) {
    betas[0] = beta_start;
  } else {
    for (int t = 0; t < num_steps; ++t) {
      betas[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t) / (num_steps - 1);
    }
  }
  NoiseSchedule s(std::move(betas));
  s.linear_range_ = std::make_pair(beta_start, beta_end);
  return s;
}

NoiseSchedule default_schedule() { return build_linear_schedule(1000, 1e-4, 2e-2); }

nlohmann::json NoiseSchedule::to_json() const {
  if (linear_range_) {
    return {{"num_steps", num_steps()}, {"beta_start", linear_range_->first}, {"beta_end", linear_range_->second}};
  }
  return {{"betas", std::vector<double>(betas_.data(), betas_.data() + betas_.size())}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  if (j.contains("betas")) {
    const auto values = j.at("betas").get<std::vector<double>>();
    return NoiseSchedule(Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size())));
  }
  return build_linear_schedule(j.at("num_steps").get<int>(), j.at("beta_start").get<double>(),
                               j.at("beta_end").get<double>());
}

DenoiseMode parse_denoise_mode(const std::string& name) {
  if (name == "cumulative") return DenoiseMode::kCumulative;
  if (name == "literal") return DenoiseMode::kLiteral;
  throw InvalidArgument("unknown denoise mode '" + name + "'");
}

std::string to_string(DenoiseMode mode) {
  return mode == DenoiseMode::kLiteral ? "literal" : "cumulative";
}

}  // namespace latte
