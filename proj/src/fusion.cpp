#include "latte/fusion.hpp"

#include <cmath>

#include "latte/layers.hpp"

namespace latte {

AggregateMode parse_aggregate_mode(const std::string& name) {
  if (name == "average") return AggregateMode::kAverage;
  if (name == "weighted") return AggregateMode::kWeighted;
  if (name == "cls") return AggregateMode::kCls;
  throw InvalidArgument("unknown aggregate mode '" + name + "' (expected average, weighted or cls)");
}

std::string to_string(AggregateMode mode) {
  switch (mode) {
    case AggregateMode::kAverage: return "average";
    case AggregateMode::kWeighted: return "weighted";
    case AggregateMode::kCls: return "cls";
  }
  return "?";
}

void AggregationConfig::validate() const {
  if (d < 1 || n < 1) throw InvalidArgument("aggregate.d and aggregate.n must be positive");
  if (mode == AggregateMode::kCls && (heads < 1 || d % heads != 0 || layers < 1)) {
    throw InvalidArgument("cls aggregation needs d divisible by heads and layers >= 1");
  }
}

nlohmann::json AggregationConfig::to_json() const {
  return {{"mode", to_string(mode)}, {"cls_positional", cls_positional}, {"d", d},
          {"n", n},                  {"heads", heads},                   {"layers", layers}};
}

AggregationConfig AggregationConfig::from_json(const nlohmann::json& j) {
  AggregationConfig c;
  c.mode = parse_aggregate_mode(j.value("mode", to_string(c.mode)));
  c.cls_positional = j.value("cls_positional", c.cls_positional);
  c.d = j.value("d", c.d);
  c.n = j.value("n", c.n);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  return c;
}

void add_aggregate_params(ParameterSet& ps, const AggregationConfig& config, Rng& rng) {
  config.validate();
  switch (config.mode) {
    case AggregateMode::kAverage:
      return;
    case AggregateMode::kWeighted:
      nn::add_linear(ps, "aggregate.gate", config.d, 1, rng);
      return;
    case AggregateMode::kCls:
      ps.add("aggregate.cls", rng.normal_matrix(1, config.d, 0.02));
      if (config.cls_positional) ps.add("aggregate.pos", rng.normal_matrix(config.n + 1, config.d, 0.02));
      for (int l = 0; l < config.layers; ++l) {
        const std::string p = "aggregate.layer" + std::to_string(l);
        nn::add_layer_norm(ps, p + ".ln1", config.d);
        nn::add_attention(ps, p + ".attn", config.d, rng);
        nn::add_layer_norm(ps, p + ".ln2", config.d);
        nn::add_feed_forward(ps, p + ".ffn", config.d, 4 * config.d, rng);
      }
      nn::add_layer_norm(ps, "aggregate.norm", config.d);
      return;
  }
}

void add_classifier_params(ParameterSet& ps, int width) {
  ps.add("classifier.weight", ad::Matrix::Zero(width, 1));
  ps.add("classifier.bias", ad::Matrix::Zero(1, 1));
}

template <typename Params>
ad::Var aggregate_forward(ad::Tape& tape, Params& ps, const AggregationConfig& config, ad::Var tokens, int batch,
                          ad::Var* gate_out) {
  const int n = config.n;
  if (n < 1 || tokens.rows() != Eigen::Index{batch} * n || tokens.cols() != config.d) {
    throw InvalidArgument("aggregate: expected " + std::to_string(batch * n) + " tokens of width " +
                          std::to_string(config.d));
  }
  switch (config.mode) {
    case AggregateMode::kAverage:
      return ad::group_mean_rows(tokens, n);
    case AggregateMode::kWeighted: {
      if (!ps.contains("aggregate.gate.weight")) throw InvalidArgument("weighted aggregation parameters missing");
      ad::Var w = ad::group_softmax(nn::linear(tape, ps, "aggregate.gate", tokens), n);
      if (gate_out != nullptr) *gate_out = w;
      return ad::group_weighted_sum(tokens, w, n);
    }
    case AggregateMode::kCls: {
      if (!ps.contains("aggregate.cls")) throw InvalidArgument("cls aggregation parameters missing");
      const int len = n + 1;
      ad::Var cls = ad::tile_rows(tape.parameter(ps.at("aggregate.cls")), batch);
      // Rows [0, B) are CLS tokens, rows [B, B + B*n) the trajectory tokens.
      std::vector<int> order(static_cast<size_t>(batch) * len);
      for (int b = 0; b < batch; ++b) {
        order[b * len] = b;
        for (int k = 0; k < n; ++k) order[b * len + 1 + k] = batch + b * n + k;
      }
      ad::Var x = ad::gather_rows(ad::concat_rows({cls, tokens}), order);
      if (config.cls_positional) {
        if (!ps.contains("aggregate.pos")) throw InvalidArgument("positional embeddings missing");
        x = ad::add(x, ad::tile_rows(tape.parameter(ps.at("aggregate.pos")), batch));
      }
      const double scale = 1.0 / std::sqrt(static_cast<double>(config.d) / config.heads);
      for (int l = 0; l < config.layers; ++l) {
        const std::string p = "aggregate.layer" + std::to_string(l);
        ad::Var h = nn::layer_norm(tape, ps, p + ".ln1", x);
        x = ad::add(x, nn::multi_head_attention(tape, ps, p + ".attn", h, h, config.heads, len, len, scale));
        x = ad::add(x, nn::feed_forward(tape, ps, p + ".ffn", nn::layer_norm(tape, ps, p + ".ln2", x)));
      }
      std::vector<int> heads(batch);
      for (int b = 0; b < batch; ++b) heads[b] = b * len;
      return nn::layer_norm(tape, ps, "aggregate.norm", ad::gather_rows(x, heads));
    }
  }
  throw InvalidArgument("bad aggregate mode");
}

template <typename Params>
ad::Var classifier_forward(ad::Tape& tape, Params& ps, ad::Var features) {
  if (features.cols() != ps.at("classifier.weight").value.rows()) {
    throw InvalidArgument("classifier expects width " + std::to_string(ps.at("classifier.weight").value.rows()) +
                          ", got " + std::to_string(features.cols()));
  }
  return nn::linear(tape, ps, "classifier", features);
}

template ad::Var aggregate_forward(ad::Tape&, ParameterSet&, const AggregationConfig&, ad::Var, int, ad::Var*);
template ad::Var aggregate_forward(ad::Tape&, const ParameterSet&, const AggregationConfig&, ad::Var, int, ad::Var*);
template ad::Var classifier_forward(ad::Tape&, ParameterSet&, ad::Var);
template ad::Var classifier_forward(ad::Tape&, const ParameterSet&, ad::Var);

namespace {
Eigen::MatrixXd token_matrix(const RefinedTrajectory& tokens) {
  if (tokens.tokens.empty()) throw InvalidArgument("aggregate: empty token list");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(tokens.tokens.size()), tokens.tokens.front().size());
  for (size_t i = 0; i < tokens.tokens.size(); ++i) {
    if (tokens.tokens[i].size() != m.cols()) throw InvalidArgument("aggregate: tokens differ in width");
    m.row(static_cast<Eigen::Index>(i)) = tokens.tokens[i].transpose();
  }
  return m;
}
}  // namespace

Eigen::VectorXd aggregate(const RefinedTrajectory& tokens, const AggregationConfig& config, const ParameterSet& ps) {
  ad::Tape tape(false);
  const Eigen::MatrixXd m = token_matrix(tokens);
  return aggregate_forward(tape, ps, config, tape.constant(m), 1).value().row(0).transpose();
}

Eigen::VectorXd gate_weights(const RefinedTrajectory& tokens, const AggregationConfig& config, const ParameterSet& ps) {
  if (config.mode != AggregateMode::kWeighted) throw InvalidArgument("gate_weights needs weighted mode");
  ad::Tape tape(false);
  ad::Var w;
  aggregate_forward(tape, ps, config, tape.constant(token_matrix(tokens)), 1, &w);
  return w.value().col(0);
}

Eigen::VectorXd fuse(const Eigen::VectorXd& agg, const Eigen::VectorXd& global_token) {
  if (agg.size() != global_token.size()) {
    throw InvalidArgument("fuse: widths differ (" + std::to_string(agg.size()) + " vs " +
                          std::to_string(global_token.size()) + ")");
  }
  Eigen::VectorXd z(agg.size() * 2);
  z << agg, global_token;
  return z;
}

double classify_logit(const Eigen::VectorXd& z, const ParameterSet& ps) {
  const auto& w = ps.at("classifier.weight").value;
  if (z.size() != w.rows()) throw InvalidArgument("classify: width mismatch");
  return z.dot(w.col(0)) + ps.at("classifier.bias").value(0, 0);
}

double classify(const Eigen::VectorXd& z, const ParameterSet& ps) { return sigmoid(classify_logit(z, ps)); }

}  // namespace latte
