#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <string>

#include "latte/autodiff.hpp"
#include "latte/params.hpp"
#include "latte/refiner.hpp"

namespace latte {

enum class AggregateMode { kAverage, kWeighted, kCls };
AggregateMode parse_aggregate_mode(const std::string& name);
std::string to_string(AggregateMode mode);

struct AggregationConfig {
  AggregateMode mode = AggregateMode::kAverage;
  bool cls_positional = false;
  int d = 512;
  int n = 5;
  int heads = 8;   // CLS encoder only
  int layers = 2;  // CLS encoder only

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static AggregationConfig from_json(const nlohmann::json& j);
};

/// Registers aggregate.* for the configured mode (nothing for average).
void add_aggregate_params(ParameterSet& ps, const AggregationConfig& config, Rng& rng);
/// classifier.{weight,bias} mapping `width` features to one logit. Starts at
/// zero weights so the initial prediction is 0.5.
void add_classifier_params(ParameterSet& ps, int width);

/// Image-major tokens (B*n x d) -> (B x d).
template <typename Params>
ad::Var aggregate_forward(ad::Tape& tape, Params& ps, const AggregationConfig& config, ad::Var tokens, int batch,
                          ad::Var* gate_weights = nullptr);

/// (B x w) -> (B x 1) logits.
template <typename Params>
ad::Var classifier_forward(ad::Tape& tape, Params& ps, ad::Var features);

Eigen::VectorXd aggregate(const RefinedTrajectory& tokens, const AggregationConfig& config, const ParameterSet& ps);
/// Softmax gate weights of weighted mode, one per token.
Eigen::VectorXd gate_weights(const RefinedTrajectory& tokens, const AggregationConfig& config, const ParameterSet& ps);
/// [agg | global].
Eigen::VectorXd fuse(const Eigen::VectorXd& agg, const Eigen::VectorXd& global_token);
double classify_logit(const Eigen::VectorXd& z, const ParameterSet& ps);
double classify(const Eigen::VectorXd& z, const ParameterSet& ps);

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
/// Strictly greater than 0.5 predicts fake.
inline int predict_label(double probability) { return probability > 0.5 ? 1 : 0; }

}  // namespace latte
