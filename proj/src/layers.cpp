#include "latte/layers.hpp"

#include <cmath>

namespace latte::nn {

void add_linear(ParameterSet& ps, const std::string& prefix, int in, int out, Rng& rng, bool bias) {
  // Xavier-uniform-like scale via normal draws.
  const double stddev = std::sqrt(2.0 / (in + out));
  ps.add(prefix + ".weight", rng.normal_matrix(in, out, stddev));
  if (bias) ps.add(prefix + ".bias", ad::Matrix::Zero(1, out));
}

void add_layer_norm(ParameterSet& ps, const std::string& prefix, int width) {
  ps.add(prefix + ".gamma", ad::Matrix::Ones(1, width));
  ps.add(prefix + ".beta", ad::Matrix::Zero(1, width));
}

void add_feed_forward(ParameterSet& ps, const std::string& prefix, int width, int hidden, Rng& rng) {
  add_linear(ps, prefix + ".fc1", width, hidden, rng);
  add_linear(ps, prefix + ".fc2", hidden, width, rng);
}

void add_attention(ParameterSet& ps, const std::string& prefix, int width, Rng& rng) {
  for (const char* name : {".q", ".k", ".v", ".o"}) add_linear(ps, prefix + name, width, width, rng);
}

}  // namespace latte::nn
