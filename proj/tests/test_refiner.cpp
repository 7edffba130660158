#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "latte/error.hpp"
#include "latte/refiner.hpp"
#include "support.hpp"

using namespace latte;

namespace {

RefinerConfig tiny(int n = 3, RefineMode mode = RefineMode::kSeparate) {
  RefinerConfig c;
  c.L = 2;
  c.h = 2;
  c.d = 8;
  c.n = n;
  c.latent_size = 12;
  c.mode = mode;
  return c;
}

ParameterSet refiner_params(const RefinerConfig& c, std::uint64_t seed = 1) {
  ParameterSet ps;
  Rng rng(seed);
  add_refiner_params(ps, c, rng);
  // Non-trivial affines and biases so every block participates.
  for (auto& [name, p] : ps.entries()) {
    if (name.find(".proj.") == std::string::npos) p.value += rng.normal_matrix(p.value.rows(), p.value.cols(), 0.1);
  }
  return ps;
}

double max_abs(const RefinedTrajectory& a, const RefinedTrajectory& b) {
  double m = 0;
  for (size_t i = 0; i < a.tokens.size(); ++i) m = std::max(m, (a.tokens[i] - b.tokens[i]).cwiseAbs().maxCoeff());
  return m;
}

}  // namespace

TEST(ProjectLatent, NaiveLoopZeroAndIdentity) {
  RefinerConfig c = tiny();
  ParameterSet ps = refiner_params(c);
  ps.at("refiner.proj.bias").value = Rng(4).normal_matrix(1, c.d);
  Rng rng(2);
  const LatentTensor z({3, 2, 2}, rng.normal_vector(12));
  const Eigen::VectorXd out = project_latent(z, ps);
  const auto& w = ps.at("refiner.proj.weight").value;
  const auto& b = ps.at("refiner.proj.bias").value;
  for (int j = 0; j < c.d; ++j) {
    double acc = b(0, j);
    for (int i = 0; i < 12; ++i) acc += z.data[i] * w(i, j);
    EXPECT_NEAR(out[j], acc, 1e-13);
  }

  ps.at("refiner.proj.bias").value.setZero();
  EXPECT_EQ(project_latent(LatentTensor({3, 2, 2}), ps).cwiseAbs().maxCoeff(), 0.0);

  RefinerConfig sq = tiny();
  sq.latent_size = sq.d;
  ParameterSet id = refiner_params(sq);
  id.at("refiner.proj.weight").value.setIdentity();
  id.at("refiner.proj.bias").value.setZero();
  const LatentTensor x({2, 2, 2}, rng.normal_vector(8));
  EXPECT_EQ(project_latent(x, id), x.data);
  EXPECT_THROW(project_latent(LatentTensor({1, 1, 1}), ps), InvalidArgument);
}

TEST(Refine, SingletonPatchGetsFullWeight) {
  const RefinerConfig c = tiny();
  const ParameterSet ps = refiner_params(c);
  Rng rng(3);
  RefineTrace trace;
  static_cast<void>(refine_tokens(rng.normal_matrix(c.n, c.d), rng.normal_matrix(1, c.d), c, ps, &trace));
  ASSERT_EQ(trace.layers.size(), static_cast<size_t>(c.n * c.L));
  for (const auto& layer : trace.layers)
    for (const auto& block : layer.blocks) EXPECT_EQ(block(0, 0), 1.0);
}

TEST(Refine, AttentionRowsSumToOne) {
  for (RefineMode mode : {RefineMode::kSeparate, RefineMode::kJoint}) {
    const RefinerConfig c = tiny(4, mode);
    const ParameterSet ps = refiner_params(c);
    Rng rng(5);
    RefineTrace trace;
    static_cast<void>(refine_tokens(rng.normal_matrix(c.n, c.d) * 3, rng.normal_matrix(7, c.d) * 3, c, ps, &trace));
    for (const auto& layer : trace.layers)
      for (const auto& block : layer.blocks) {
        EXPECT_EQ(block.cols(), 7);
        EXPECT_LE((block.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
        EXPECT_GE(block.minCoeff(), 0.0);
      }
  }
}

TEST(Refine, PatchPermutationInvariance) {
  for (RefineMode mode : {RefineMode::kSeparate, RefineMode::kJoint}) {
    const RefinerConfig c = tiny(3, mode);
    const ParameterSet ps = refiner_params(c);
    Rng rng(6);
    const Eigen::MatrixXd q = rng.normal_matrix(c.n, c.d);
    const Eigen::MatrixXd v = rng.normal_matrix(9, c.d);
    std::vector<int> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Eigen::MatrixXd shuffled(9, c.d);
    for (int i = 0; i < 9; ++i) shuffled.row(i) = v.row(perm[i]);
    EXPECT_LE(max_abs(refine_tokens(q, v, c, ps), refine_tokens(q, shuffled, c, ps)), 1e-12);
  }
}

TEST(Refine, SeparateAndJointAgreeAtSingleStep) {
  const RefinerConfig sep = tiny(1, RefineMode::kSeparate);
  const RefinerConfig joint = tiny(1, RefineMode::kJoint);
  const ParameterSet ps = refiner_params(sep);
  EXPECT_EQ(ps.size(), refiner_params(joint).size());
  Rng rng(8);
  const Eigen::MatrixXd q = rng.normal_matrix(1, 8), v = rng.normal_matrix(5, 8);
  EXPECT_LE(max_abs(refine_tokens(q, v, sep, ps), refine_tokens(q, v, joint, ps)), 1e-15);
}

TEST(Refine, StackIOnlyAffectsTokenI) {
  const RefinerConfig c = tiny(4);
  ParameterSet ps = refiner_params(c);
  Rng rng(9);
  const Eigen::MatrixXd q = rng.normal_matrix(c.n, c.d), v = rng.normal_matrix(6, c.d);
  const RefinedTrajectory base = refine_tokens(q, v, c, ps);
  for (int s = 0; s < c.n; ++s) {
    ParameterSet changed = ps;
    changed.at("refiner.stack" + std::to_string(s) + ".layer0.attn.v.weight").value.array() += 0.5;
    const RefinedTrajectory out = refine_tokens(q, v, c, changed);
    for (int k = 0; k < c.n; ++k) {
      const double diff = (out.tokens[k] - base.tokens[k]).cwiseAbs().maxCoeff();
      if (k == s) {
        EXPECT_GT(diff, 1e-6);
      } else {
        EXPECT_EQ(diff, 0.0) << "stack " << s << " token " << k;
      }
    }
  }
}

TEST(Refine, ScalingInputsStaysFinite) {
  const RefinerConfig c = tiny(3);
  const ParameterSet ps = refiner_params(c);
  Rng rng(10);
  const Eigen::MatrixXd q = rng.normal_matrix(c.n, c.d), v = rng.normal_matrix(5, c.d);
  RefinedTrajectory prev;
  for (double f = 1e-3; f <= 1e3 * (1 + 1e-9); f *= std::sqrt(10.0)) {
    const RefinedTrajectory out = refine_tokens(q * f, v * f, c, ps);
    for (const auto& t : out.tokens) EXPECT_TRUE(t.allFinite()) << f;
    // A 1% change in scale moves the output by a small amount.
    const RefinedTrajectory near = refine_tokens(q * f * 1.01, v * f * 1.01, c, ps);
    EXPECT_LT(max_abs(out, near), 1.0) << f;
  }
}

TEST(Refine, BatchedForwardMatchesPerImage) {
  const RefinerConfig c = tiny(3);
  const ParameterSet ps = refiner_params(c);
  Rng rng(11);
  const Eigen::MatrixXd q = rng.normal_matrix(2 * c.n, c.d), v = rng.normal_matrix(2 * 4, c.d);
  ad::Tape tape(false);
  const Eigen::MatrixXd both = refine_forward(tape, ps, c, tape.constant(q), tape.constant(v), 2, 4).value();
  for (int b = 0; b < 2; ++b) {
    const RefinedTrajectory one = refine_tokens(q.middleRows(b * c.n, c.n), v.middleRows(b * 4, 4), c, ps);
    for (int k = 0; k < c.n; ++k) {
      EXPECT_LE((both.row(b * c.n + k).transpose() - one.tokens[k]).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Refine, ShapeErrorsAndConfig) {
  const RefinerConfig c = tiny(3);
  const ParameterSet ps = refiner_params(c);
  EXPECT_THROW(refine_tokens(Eigen::MatrixXd::Zero(2, 8), Eigen::MatrixXd::Zero(4, 8), c, ps), InvalidArgument);
  EXPECT_THROW(refine_tokens(Eigen::MatrixXd::Zero(3, 8), Eigen::MatrixXd::Zero(4, 6), c, ps), InvalidArgument);
  RefinerConfig bad = c;
  bad.h = 3;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = c;
  bad.L = 0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  EXPECT_DOUBLE_EQ(c.score_scale(), 1.0 / 2.0);
  RefinerConfig lit = c;
  lit.literal_sqrt_d = true;
  EXPECT_DOUBLE_EQ(lit.score_scale(), 1.0 / std::sqrt(8.0));
  EXPECT_EQ(RefinerConfig::from_json(lit.to_json()).to_json(), lit.to_json());
}

TEST(Refine, NonFiniteInputReportsLayer) {
  const RefinerConfig c = tiny(2);
  const ParameterSet ps = refiner_params(c);
  Eigen::MatrixXd q = Eigen::MatrixXd::Ones(2, 8);
  q(1, 0) = std::nan("");
  try {
    static_cast<void>(refine_tokens(q, Eigen::MatrixXd::Ones(3, 8), c, ps));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("stack 1 layer 0"), std::string::npos) << e.what();
  }
}

TEST(GradCheck, PassesAtTinyConfig) {
  for (RefineMode mode : {RefineMode::kSeparate, RefineMode::kJoint}) {
    RefinerConfig c;
    c.d = 8;
    c.h = 2;
    c.L = 1;
    c.n = 2;
    c.latent_size = 6;
    c.mode = mode;
    const GradCheckReport r = refiner_grad_check(c, 1e-4);
    EXPECT_TRUE(r.passed()) << r.max_rel_error();
    EXPECT_LE(r.max_rel_error(), 1e-4);
    EXPECT_GT(r.blocks.size(), 10u);
  }
}

TEST(GradCheck, ZeroHeadGivesZeroGradients) {
  RefinerConfig c = tiny(2);
  c.L = 1;
  GradCheckOptions opt;
  opt.zero_head = true;
  const GradCheckReport r = refiner_grad_check(c, 1e-4, opt);
  EXPECT_TRUE(r.passed());
  for (const auto& b : r.blocks) EXPECT_EQ(b.max_abs_grad, 0.0) << b.name;
}

TEST(GradCheck, CorruptedOutputProjectionFails) {
  RefinerConfig c = tiny(1);
  c.L = 1;
  GradCheckOptions opt;
  opt.corrupt = [](const std::string& name, Eigen::MatrixXd& g) {
    if (name.ends_with("attn.o.weight")) g(0, 0) += 0.05;
  };
  const GradCheckReport r = refiner_grad_check(c, 1e-4, opt);
  EXPECT_FALSE(r.passed());
  ASSERT_EQ(r.failures().size(), 1u);
  EXPECT_NE(r.failures()[0].find("attn.o.weight"), std::string::npos);
}

TEST(GradCheck, RejectsLargeConfig) {
  RefinerConfig c = tiny(1);
  c.d = 32;
  c.h = 4;
  EXPECT_THROW(refiner_grad_check(c, 1e-4), InvalidArgument);
}
