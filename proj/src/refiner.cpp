#include "latte/refiner.hpp"

#include <algorithm>
#include <cmath>

#include "latte/layers.hpp"

namespace latte {

RefineMode parse_refine_mode(const std::string& name) {
  if (name == "separate") return RefineMode::kSeparate;
  if (name == "joint") return RefineMode::kJoint;
  throw InvalidArgument("unknown refiner mode '" + name + "' (expected separate or joint)");
}

std::string to_string(RefineMode mode) { return mode == RefineMode::kSeparate ? "separate" : "joint"; }

void RefinerConfig::validate() const {
  if (L < 1) throw InvalidArgument("refiner.L must be >= 1");
  if (n < 1) throw InvalidArgument("refiner.n must be >= 1");
  if (h < 1 || d < 1 || d % h != 0) throw InvalidArgument("refiner.d must be divisible by refiner.h");
  if (latent_size < 1 || ffn_mult < 1) throw InvalidArgument("refiner sizes must be positive");
}

double RefinerConfig::score_scale() const {
  return 1.0 / std::sqrt(literal_sqrt_d ? static_cast<double>(d) : static_cast<double>(d) / h);
}

nlohmann::json RefinerConfig::to_json() const {
  return {{"L", L},   {"h", h},
          {"d", d},   {"mode", to_string(mode)},
          {"n", n},   {"latent_size", latent_size},
          {"ffn_mult", ffn_mult}, {"literal_sqrt_d", literal_sqrt_d}};
}

RefinerConfig RefinerConfig::from_json(const nlohmann::json& j) {
  RefinerConfig c;
  c.L = j.value("L", c.L);
  c.h = j.value("h", c.h);
  c.d = j.value("d", c.d);
  c.mode = parse_refine_mode(j.value("mode", to_string(c.mode)));
  c.n = j.value("n", c.n);
  c.latent_size = j.value("latent_size", c.latent_size);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.literal_sqrt_d = j.value("literal_sqrt_d", c.literal_sqrt_d);
  return c;
}

namespace {
std::string layer_prefix(int stack, int layer) {
  return "refiner.stack" + std::to_string(stack) + ".layer" + std::to_string(layer);
}
}  // namespace

void add_refiner_params(ParameterSet& ps, const RefinerConfig& config, Rng& rng) {
  config.validate();
  nn::add_linear(ps, "refiner.proj", config.latent_size, config.d, rng);
  for (int s = 0; s < config.stacks(); ++s) {
    for (int l = 0; l < config.L; ++l) {
      const std::string p = layer_prefix(s, l);
      nn::add_layer_norm(ps, p + ".ln1", config.d);
      nn::add_attention(ps, p + ".attn", config.d, rng);
      nn::add_layer_norm(ps, p + ".ln2", config.d);
      nn::add_feed_forward(ps, p + ".ffn", config.d, config.ffn_mult * config.d, rng);
    }
    nn::add_layer_norm(ps, "refiner.stack" + std::to_string(s) + ".norm", config.d);
  }
}

template <typename Params>
ad::Var project_latents(ad::Tape& tape, Params& ps, ad::Var latents) {
  const auto& w = ps.at("refiner.proj.weight").value;
  if (latents.cols() != w.rows()) {
    throw InvalidArgument("latent width " + std::to_string(latents.cols()) + " does not match projection input " +
                          std::to_string(w.rows()));
  }
  return nn::linear(tape, ps, "refiner.proj", latents);
}

namespace {

/// One decoder stack over (G*nq x d) queries.
template <typename Params>
ad::Var run_stack(ad::Tape& tape, Params& ps, const RefinerConfig& config, int stack, ad::Var x, ad::Var memory, int nq,
                  int nk, RefineTrace* trace) {
  for (int l = 0; l < config.L; ++l) {
    const std::string p = layer_prefix(stack, l);
    ad::AttentionWeights* record = nullptr;
    if (trace != nullptr) record = &trace->layers.emplace_back();
    ad::Var a = nn::multi_head_attention(tape, ps, p + ".attn", nn::layer_norm(tape, ps, p + ".ln1", x), memory,
                                         config.h, nq, nk, config.score_scale(), record);
    x = ad::add(x, a);
    x = ad::add(x, nn::feed_forward(tape, ps, p + ".ffn", nn::layer_norm(tape, ps, p + ".ln2", x)));
    if (!x.value().allFinite()) {
      throw NumericalError("refiner stack " + std::to_string(stack) + " layer " + std::to_string(l) +
                           ": non-finite activations");
    }
  }
  return nn::layer_norm(tape, ps, "refiner.stack" + std::to_string(stack) + ".norm", x);
}

}  // namespace

template <typename Params>
ad::Var refine_forward(ad::Tape& tape, Params& ps, const RefinerConfig& config, ad::Var queries, ad::Var patches,
                       int batch, int num_patches, RefineTrace* trace) {
  config.validate();
  const int n = config.n;
  if (queries.rows() != Eigen::Index{batch} * n || queries.cols() != config.d) {
    throw InvalidArgument("refine: expected " + std::to_string(batch * n) + " query tokens of width " +
                          std::to_string(config.d) + ", got " + std::to_string(queries.rows()) + "x" +
                          std::to_string(queries.cols()));
  }
  if (num_patches < 1 || patches.rows() != Eigen::Index{batch} * num_patches || patches.cols() != config.d) {
    throw InvalidArgument("refine: patch tokens must be (B*N x d) with d = " + std::to_string(config.d));
  }
  if (config.mode == RefineMode::kJoint) return run_stack(tape, ps, config, 0, queries, patches, n, num_patches, trace);

  std::vector<ad::Var> per_step;
  per_step.reserve(n);
  for (int k = 0; k < n; ++k) {
    std::vector<int> rows(batch);
    for (int b = 0; b < batch; ++b) rows[b] = b * n + k;
    ad::Var q = n == 1 ? queries : ad::gather_rows(queries, rows);
    per_step.push_back(run_stack(tape, ps, config, k, q, patches, 1, num_patches, trace));
  }
  if (n == 1) return per_step.front();
  ad::Var stacked = ad::concat_rows(per_step);  // step-major
  std::vector<int> order(static_cast<size_t>(batch) * n);
  for (int b = 0; b < batch; ++b)
    for (int k = 0; k < n; ++k) order[b * n + k] = k * batch + b;
  return ad::gather_rows(stacked, order);
}

template ad::Var project_latents(ad::Tape&, ParameterSet&, ad::Var);
template ad::Var project_latents(ad::Tape&, const ParameterSet&, ad::Var);
template ad::Var refine_forward(ad::Tape&, ParameterSet&, const RefinerConfig&, ad::Var, ad::Var, int, int,
                                RefineTrace*);
template ad::Var refine_forward(ad::Tape&, const ParameterSet&, const RefinerConfig&, ad::Var, ad::Var, int, int,
                                RefineTrace*);

Eigen::VectorXd project_latent(const LatentTensor& latent, const ParameterSet& ps) {
  ad::Tape tape(false);
  ad::Var x = tape.constant(latent.data.transpose());
  return project_latents(tape, ps, x).value().row(0).transpose();
}

RefinedTrajectory refine_tokens(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& patch_tokens,
                                const RefinerConfig& config, const ParameterSet& ps, RefineTrace* trace) {
  ad::Tape tape(false);
  ad::Var out = refine_forward(tape, ps, config, tape.constant(queries), tape.constant(patch_tokens), 1,
                               static_cast<int>(patch_tokens.rows()), trace);
  RefinedTrajectory r;
  r.mode = config.mode;
  for (Eigen::Index i = 0; i < out.rows(); ++i) r.tokens.emplace_back(out.value().row(i).transpose());
  return r;
}

RefinedTrajectory refine(const Trajectory& trajectory, const VisualFeatures& visual, const RefinerConfig& config,
                         const ParameterSet& ps, RefineTrace* trace) {
  if (static_cast<int>(trajectory.latents.size()) != config.n) {
    throw InvalidArgument("trajectory length " + std::to_string(trajectory.latents.size()) +
                          " does not match refiner.n = " + std::to_string(config.n));
  }
  if (visual.d() != config.d || visual.patch_tokens.cols() != config.d) {
    throw InvalidArgument("visual width " + std::to_string(visual.d()) + " does not match refiner.d");
  }
  Eigen::MatrixXd lat(config.n, config.latent_size);
  for (int k = 0; k < config.n; ++k) {
    if (trajectory.latents[k].data.size() != config.latent_size) {
      throw InvalidArgument("latent size does not match refiner.latent_size");
    }
    lat.row(k) = trajectory.latents[k].data.transpose();
  }
  ad::Tape tape(false);
  const Eigen::MatrixXd q = project_latents(tape, ps, tape.constant(lat)).value();
  return refine_tokens(q, visual.patch_tokens, config, ps, trace);
}

bool GradCheckReport::passed() const {
  return std::all_of(blocks.begin(), blocks.end(), [](const GradCheckBlock& b) { return b.passed; });
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& b : blocks) m = std::max(m, b.max_rel_error);
  return m;
}

std::vector<std::string> GradCheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& b : blocks) {
    if (!b.passed) out.push_back(b.name + " (max rel error " + std::to_string(b.max_rel_error) + ")");
  }
  return out;
}

GradCheckReport refiner_grad_check(const RefinerConfig& config, double tolerance, const GradCheckOptions& options) {
  config.validate();
  if (config.d > 16 || config.L > 2 || options.num_patches > 4) {
    throw InvalidArgument("refiner_grad_check needs a tiny config (d <= 16, N <= 4, L <= 2)");
  }
  Rng rng(options.seed);
  ParameterSet ps;
  add_refiner_params(ps, config, rng);
  // Perturb the LayerNorm affines so their gradients are not degenerate.
  for (auto& [name, p] : ps.entries()) {
    if (name.find(".gamma") != std::string::npos || name.find(".beta") != std::string::npos ||
        name.find(".bias") != std::string::npos) {
      p.value += rng.normal_matrix(p.value.rows(), p.value.cols(), 0.1);
    }
  }
  const int batch = 2;
  const Eigen::MatrixXd latents = rng.normal_matrix(Eigen::Index{batch} * config.n, config.latent_size);
  const Eigen::MatrixXd patches = rng.normal_matrix(Eigen::Index{batch} * options.num_patches, config.d);
  Eigen::MatrixXd head = rng.normal_matrix(Eigen::Index{batch} * config.n, config.d);
  if (options.zero_head) head.setZero();

  auto loss = [&](bool backward) {
    ad::Tape tape(backward);
    ad::Var q = project_latents(tape, ps, tape.constant(latents));
    ad::Var out = refine_forward(tape, ps, config, q, tape.constant(patches), batch, options.num_patches);
    ad::Var l = ad::sum_all(ad::hadamard(ad::tanh(out), tape.constant(head)));
    if (backward) tape.backward(l);
    return l.value()(0, 0);
  };

  ps.zero_grad();
  loss(true);
  std::vector<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> grads;  // analytic, numeric
  double global_max = 0.0;
  for (auto& [name, p] : ps.entries()) {
    Eigen::MatrixXd analytic = p.grad;
    if (options.corrupt) options.corrupt(name, analytic);
    Eigen::MatrixXd numeric(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& v = p.value.data()[i];
      const double saved = v;
      v = saved + options.step;
      const double up = loss(false);
      v = saved - options.step;
      const double down = loss(false);
      v = saved;
      numeric.data()[i] = (up - down) / (2 * options.step);
    }
    global_max = std::max({global_max, analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff()});
    grads.emplace_back(std::move(analytic), std::move(numeric));
  }

  // Gradients that vanish analytically (key biases under softmax shift
  // invariance) leave only difference roundoff, so the denominator is floored
  // relative to the block and to the largest gradient anywhere.
  GradCheckReport report;
  report.tolerance = tolerance;
  size_t idx = 0;
  for (const auto& [name, p] : ps.entries()) {
    const auto& [analytic, numeric] = grads[idx++];
    GradCheckBlock block;
    block.name = name;
    block.max_abs_grad = std::max(analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff());
    const double floor = std::max({1e-3 * block.max_abs_grad, 1e-6 * global_max, 1e-12});
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
      const double a = analytic.data()[i];
      const double f = numeric.data()[i];
      const double scale = std::max({std::abs(a), std::abs(f), floor});
      block.max_rel_error = std::max(block.max_rel_error, std::abs(a - f) / scale);
    }
    if (block.max_abs_grad == 0.0) block.max_rel_error = 0.0;
    block.passed = block.max_rel_error <= tolerance;
    report.blocks.push_back(std::move(block));
  }
  return report;
}

}  // namespace latte
