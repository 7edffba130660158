#pragma once

#include <string>

#include "latte/autodiff.hpp"
#include "latte/params.hpp"
#include "latte/random.hpp"

namespace latte::nn {

using ad::Tape;
using ad::Var;

// Parameter registration. Weights are stored (in x out) so y = x W + b.
void add_linear(ParameterSet& ps, const std::string& prefix, int in, int out, Rng& rng, bool bias = true);
void add_layer_norm(ParameterSet& ps, const std::string& prefix, int width);
void add_feed_forward(ParameterSet& ps, const std::string& prefix, int width, int hidden, Rng& rng);
void add_attention(ParameterSet& ps, const std::string& prefix, int width, Rng& rng);

// Forward helpers accept a const ParameterSet for inference (no gradients)
// or a mutable one for training.

template <typename Params>
Var linear(Tape& tape, Params& ps, const std::string& prefix, Var x) {
  Var y = ad::matmul(x, tape.parameter(ps.at(prefix + ".weight")));
  const std::string bias = prefix + ".bias";
  if (ps.contains(bias)) y = ad::add_row(y, tape.parameter(ps.at(bias)));
  return y;
}

template <typename Params>
Var layer_norm(Tape& tape, Params& ps, const std::string& prefix, Var x) {
  return ad::layer_norm(x, tape.parameter(ps.at(prefix + ".gamma")), tape.parameter(ps.at(prefix + ".beta")));
}

/// fc1 -> GELU -> fc2.
template <typename Params>
Var feed_forward(Tape& tape, Params& ps, const std::string& prefix, Var x) {
  return linear(tape, ps, prefix + ".fc2", ad::gelu(linear(tape, ps, prefix + ".fc1", x)));
}

/// Multi-head attention with q/k/v/o projections. query is (G*nq x d),
/// memory is (G*nk x d); each group attends only within itself.
template <typename Params>
Var multi_head_attention(Tape& tape, Params& ps, const std::string& prefix, Var query, Var memory, int heads, int nq,
                         int nk, double score_scale, ad::AttentionWeights* record = nullptr) {
  Var q = linear(tape, ps, prefix + ".q", query);
  Var k = linear(tape, ps, prefix + ".k", memory);
  Var v = linear(tape, ps, prefix + ".v", memory);
  Var mixed = ad::attention(q, k, v, heads, nq, nk, score_scale, record);
  return linear(tape, ps, prefix + ".o", mixed);
}

}  // namespace latte::nn
