#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "latte/error.hpp"
#include "latte/train_eval.hpp"
#include "support.hpp"

using namespace latte;

namespace {

// Exact rational p/q with 64-bit parts; enough for rankings of <= 6 items.
struct Frac {
  long p = 0, q = 1;
  Frac operator+(Frac o) const {
    Frac r{p * o.q + o.p * q, q * o.q};
    const long g = std::gcd(r.p, r.q);
    return {r.p / g, r.q / g};
  }
  Frac operator*(Frac o) const {
    Frac r{p * o.p, q * o.q};
    const long g = std::gcd(r.p, r.q);
    return {r.p / g, r.q / g};
  }
  double value() const { return static_cast<double>(p) / static_cast<double>(q); }
};

// Area under the step precision-recall curve: sum over cutoffs k of
// (recall_k - recall_{k-1}) * precision_k.
Frac pr_curve_ap(const std::vector<int>& ranked_labels) {
  long positives = std::count(ranked_labels.begin(), ranked_labels.end(), 1);
  Frac ap;
  long hits = 0;
  Frac prev_recall;
  for (size_t k = 0; k < ranked_labels.size(); ++k) {
    hits += ranked_labels[k];
    const Frac recall{hits, positives};
    const Frac precision{hits, static_cast<long>(k + 1)};
    ap = ap + (recall + Frac{-prev_recall.p, prev_recall.q}) * precision;
    prev_recall = recall;
  }
  return ap;
}

}  // namespace

TEST(AveragePrecision, MatchesRationalOracleOnAllSmallRankings) {
  double worst = 0;
  long cases = 0;
  for (int m = 1; m <= 6; ++m) {
    std::vector<int> perm(m);
    for (int mask = 0; mask < (1 << m); ++mask) {
      std::vector<int> labels(m);
      for (int i = 0; i < m; ++i) labels[i] = (mask >> i) & 1;
      if (mask == 0) continue;
      std::iota(perm.begin(), perm.end(), 0);
      do {
        // perm[i] is the rank of item i; higher rank = higher score.
        Eigen::VectorXd scores(m);
        std::vector<int> ranked(m);
        for (int i = 0; i < m; ++i) {
          scores[i] = 0.05 + 0.1 * perm[i];
          ranked[m - 1 - perm[i]] = labels[i];
        }
        const double ap = average_precision(scores, labels);
        worst = std::max(worst, std::abs(ap - pr_curve_ap(ranked).value()));
        ++cases;
      } while (std::next_permutation(perm.begin(), perm.end()));
    }
  }
  EXPECT_EQ(cases, 1L + 3 * 2 + 7 * 6 + 15 * 24 + 31 * 120 + 63 * 720);
  EXPECT_LE(worst, 1e-15);
}

TEST(AveragePrecision, WorkedExampleAndEdges) {
  Eigen::VectorXd s(4);
  s << 0.9, 0.8, 0.7, 0.6;
  const std::vector<int> y{1, 0, 1, 0};
  EXPECT_NEAR(average_precision(s, y), 0.5 * (1.0 + 2.0 / 3.0), 1e-12);
  EXPECT_NEAR(average_precision(s, y), 0.8333, 1e-4);

  const std::vector<int> perfect{1, 1, 0, 0};
  EXPECT_EQ(average_precision(s, perfect), 1.0);
  EXPECT_EQ(accuracy(s, perfect), 0.5);
  Eigen::VectorXd hard(4);
  hard << 1.0, 1.0, 0.0, 0.0;
  EXPECT_EQ(accuracy(hard, perfect), 1.0);
  EXPECT_EQ(average_precision(hard, perfect), 1.0);
  EXPECT_EQ(average_precision(s, std::vector<int>{0, 0, 0, 0}), 0.0);
}

TEST(AveragePrecision, TiesBreakByAscendingId) {
  Eigen::VectorXd s = Eigen::VectorXd::Constant(3, 0.5);
  const std::vector<int> y{0, 1, 0};
  // Ranked by id: a(0) b(1) c(0) -> one positive at rank 2.
  EXPECT_DOUBLE_EQ(average_precision(s, y, std::vector<std::string>{"b", "a", "c"}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(s, y, std::vector<std::string>{"a", "b", "c"}), 0.5);
  EXPECT_DOUBLE_EQ(average_precision(s, y, std::vector<std::string>{"a", "c", "b"}), 1.0 / 3.0);
}

TEST(Metrics, InvarianceUnderTransforms) {
  Rng rng(4);
  Eigen::VectorXd p(40);
  std::vector<int> y(40);
  for (int i = 0; i < 40; ++i) {
    y[i] = i % 3 == 0;
    p[i] = rng.uniform();
  }
  const double ap = average_precision(p, y);
  // Strictly monotone transforms leave AP unchanged.
  const Eigen::VectorXd logit = (p.array() / (1 - p.array())).log();
  EXPECT_DOUBLE_EQ(average_precision(logit, y), ap);
  EXPECT_DOUBLE_EQ(average_precision(p.array().cube(), y), ap);
  // Threshold-preserving transforms leave accuracy unchanged.
  const Eigen::VectorXd squashed = 0.5 + 0.1 * (p.array() - 0.5);
  EXPECT_EQ(accuracy(squashed, y), accuracy(p, y));
  EXPECT_EQ(accuracy(Eigen::VectorXd::Constant(4, 0.5), std::vector<int>{0, 1, 0, 1}), 0.5);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  const auto& tr = test::fixture_examples("train");
  LatteModel model(test::small_model_config());
  const auto before = model.params().checksum();
  TrainConfig c;
  c.learning_rate = 0;
  c.weight_decay = 0.1;
  c.max_epochs = 1;
  train(model, tr, test::fixture_examples("val"), c);
  EXPECT_EQ(model.params().checksum(), before);
}

TEST(Train, FirstBatchLossMatchesScalarBce) {
  const auto& tr = test::fixture_examples("train");
  LatteModel model(test::small_model_config());
  Rng rng(5);
  for (auto& [name, p] : model.params().entries()) {
    if (name.starts_with("classifier.")) p.value = rng.normal_matrix(p.value.rows(), p.value.cols(), 0.3);
  }
  const LatteModel initial = model;
  TrainConfig c;
  c.max_epochs = 1;
  const TrainResult r = train(model, tr, test::fixture_examples("val"), c);
  ASSERT_EQ(r.first_batch_ids.size(), 32u);
  std::vector<Example> batch;
  for (const auto& id : r.first_batch_ids) {
    batch.push_back(*std::find_if(tr.begin(), tr.end(), [&](const Example& e) { return e.id == id; }));
  }
  const Eigen::VectorXd p = initial.predict(batch);
  double bce = 0;
  for (size_t i = 0; i < batch.size(); ++i) {
    bce -= batch[i].label == 1 ? std::log(p[i]) : std::log(1 - p[i]);
  }
  EXPECT_NEAR(r.first_batch_loss, bce / batch.size(), 1e-10);
}

TEST(Train, LogSelectsBestEpochAndIsDeterministic) {
  const auto& tr = test::fixture_examples("train");
  const auto& val = test::fixture_examples("val");
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.max_epochs = 4;
  LatteModel a(test::small_model_config()), b(test::small_model_config());
  const TrainResult ra = train(a, tr, val, c);
  const TrainResult rb = train(b, tr, val, c, 4);
  EXPECT_EQ(a.params().checksum(), b.params().checksum());
  EXPECT_EQ(ra.to_json(), rb.to_json());
  double best = -1;
  for (const auto& e : ra.log) best = std::max(best, e.val.accuracy);
  EXPECT_EQ(ra.best_val.accuracy, best);
  EXPECT_EQ(ra.log[ra.best_epoch].val.accuracy, best);
  EXPECT_EQ(evaluate(a, val).accuracy, best);
  EXPECT_DOUBLE_EQ(ra.log[0].learning_rate, 1e-3);
}

TEST(Train, EarlyStopsAfterPatience) {
  const auto& tr = test::fixture_examples("train");
  TrainConfig c;
  c.learning_rate = 0;
  c.max_epochs = 10;
  c.patience = 2;
  LatteModel m(test::small_model_config());
  const TrainResult r = train(m, tr, test::fixture_examples("val"), c);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.log.size(), 3u);
  EXPECT_EQ(r.best_epoch, 0);
}

TEST(Train, SingleClassAndEmptySetsRejected) {
  std::vector<Example> reals;
  for (const auto& e : test::fixture_examples("train")) {
    if (e.label == 0) reals.push_back(e);
  }
  LatteModel m(test::small_model_config());
  EXPECT_THROW(train(m, reals, test::fixture_examples("val"), TrainConfig{}), InvalidArgument);
  EXPECT_THROW(train(m, {}, test::fixture_examples("val"), TrainConfig{}), InvalidArgument);
  EXPECT_THROW(evaluate(m, {}), InvalidArgument);
}

TEST(Train, NonFiniteLossAbortsWithLastGoodState) {
  std::vector<Example> tr = test::fixture_examples("train");
  for (auto& e : tr) e.latents(0, 0) = std::nan("");
  LatteModel m(test::small_model_config());
  const auto initial = m.params().checksum();
  try {
    train(m, tr, test::fixture_examples("val"), TrainConfig{});
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.last_good().checksum(), initial);
    EXPECT_EQ(m.params().checksum(), initial);
  }
  // Finite activations but a non-finite logit.
  LatteModel bad(test::small_model_config());
  bad.params().at("classifier.bias").value(0, 0) = std::nan("");
  EXPECT_THROW(train(bad, test::fixture_examples("train"), test::fixture_examples("val"), TrainConfig{}),
               TrainingDiverged);
}

TEST(Checkpoint, RoundTripReproducesMetricsBitwise) {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.max_epochs = 2;
  LatteModel m(test::small_model_config());
  train(m, test::fixture_examples("train"), test::fixture_examples("val"), c);
  const auto path = test::scratch_dir("ckpt") / "m.ltc";
  m.save(path, {{"epoch", 1}});
  nlohmann::json meta;
  const LatteModel back = LatteModel::load_compatible(path, m.config(), &meta);
  EXPECT_EQ(meta["epoch"], 1);
  const auto& te = test::fixture_examples("test");
  const Eigen::VectorXd p0 = m.predict(te), p1 = back.predict(te, 3);
  EXPECT_EQ(std::memcmp(p0.data(), p1.data(), sizeof(double) * p0.size()), 0);
  EXPECT_EQ(evaluate(m, te).to_json(), evaluate(back, te).to_json());

  ModelConfig other = m.config();
  other.refiner.L = 2;
  EXPECT_THROW(LatteModel::load_compatible(path, other), IncompatibleCheckpoint);
}

TEST(CrossMatrix, SingleSourceDuplicationAndGaps) {
  LatteModel m(test::small_model_config());
  const auto& te = test::fixture_examples("test");
  const EvalReport one = cross_matrix({{"toy", &m}}, {{"toy", te}});
  EXPECT_EQ(one.records.size(), 1u);
  EXPECT_FALSE(one.off_diagonal_mean().has_value());
  EXPECT_TRUE(one.diagonal_mean().has_value());

  const EvalReport dup = cross_matrix({{"a", &m}, {"b", &m}}, {{"a", te}, {"b", te}});
  EXPECT_EQ(dup.find("a", "a")->metrics.to_json(), dup.find("a", "b")->metrics.to_json());
  EXPECT_EQ(dup.row_means().at("a"), dup.row_means().at("b"));
  EXPECT_EQ(*dup.diagonal_mean(), *dup.off_diagonal_mean());

  const EvalReport gap = cross_matrix({{"a", &m}, {"b", nullptr}}, {{"a", te}, {"b", te}});
  EXPECT_EQ(gap.records.size(), 2u);
  EXPECT_FALSE(gap.gaps.empty());
  const std::string csv = gap.to_csv();
  EXPECT_NE(csv.find("train\\test"), std::string::npos);
  EXPECT_NE(csv.find("mean"), std::string::npos);
}

TEST(CrossMatrix, InDomainBeatsCrossDomainForTwoToyGenerators) {
  // A second generator: same architecture, different seed.
  const auto& f = test::toy_fixture();
  const TrainedToyBackend other = train_toy_backend(test::quick_spec(2), test::procedural_set(300, 11));
  SynthSpec spec;
  spec.count = 160;
  spec.seed = 6;
  spec.sample_steps = 20;
  spec.source = "toy2";
  const auto data2 = synth_toy_dataset(spec, other.backend.get());
  // Both sources are featurized through the same (first) backend so one
  // detector architecture sees both.
  auto featurize = [&](const std::vector<LabeledImage>& all, const std::string& split) {
    return make_examples(test::split_of(all, split), test::fixture_feature_spec(), 4).examples;
  };
  std::map<std::string, std::vector<Example>> tests{{"toy", test::fixture_examples("test")},
                                                   {"toy2", featurize(data2, "test")}};
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.max_epochs = 6;
  LatteModel m1(test::small_model_config()), m2(test::small_model_config());
  train(m1, test::fixture_examples("train"), test::fixture_examples("val"), c);
  train(m2, featurize(data2, "train"), featurize(data2, "val"), c);
  const EvalReport r = cross_matrix({{"toy", &m1}, {"toy2", &m2}}, tests, 4);
  ASSERT_EQ(r.records.size(), 4u);
  EXPECT_GE(*r.diagonal_mean(), *r.off_diagonal_mean()) << r.to_csv();
  static_cast<void>(f);
}
