// Acceptance run: one PASS/FAIL line per criterion, details indented below it.
// Exit status is the number of failed criteria.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "latte/analysis.hpp"
#include "latte/backend.hpp"
#include "latte/cli.hpp"
#include "latte/config.hpp"
#include "latte/data.hpp"
#include "latte/fusion.hpp"
#include "latte/model.hpp"
#include "latte/pipeline.hpp"
#include "latte/refiner.hpp"
#include "latte/schedule.hpp"
#include "latte/train_eval.hpp"
#include "latte/trajectory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace latte;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::string summary;
  std::vector<std::string> details;
};

// ---------------------------------------------------------------- 1, 2

Outcome schedule_round_trip() {
  const auto t0 = Clock::now();
  const NoiseSchedule s = default_schedule();
  Rng rng(1);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const LatentShape shape{4, 8, 8};
    const LatentTensor z0(shape, rng.normal_vector(shape.size()) * rng.uniform(0.1, 10.0));
    const LatentTensor eps(shape, rng.normal_vector(shape.size()));
    const int t = rng.uniform_int(0, s.num_steps() - 1);
    const LatentTensor out = single_step_denoise(forward_noise(z0, t, eps, s), t, eps, s);
    const Eigen::VectorXd want = std::sqrt(s.alpha_bar(t)) * z0.data;
    worst = std::max(worst, (out.data - want).norm() / want.norm());
  }
  const double secs = since(t0);
  return {worst <= 1e-5 && secs < 1.0,
          "max relative error " + num(worst) + " over 100 cases (<= 1e-5), " + num(secs, 3) + " s (< 1 s)",
          {}};
}

Outcome monte_carlo_variance() {
  const auto t0 = Clock::now();
  const NoiseSchedule s = default_schedule();
  constexpr int kDraws = 100000;
  const LatentShape shape{1, 1, kDraws};
  Outcome o;
  o.pass = true;
  double worst = 0;
  for (int t : {10, 500, 990}) {
    Rng rng(derive_seed(2, static_cast<std::uint64_t>(t)));
    const LatentTensor z0(shape, rng.normal_vector(kDraws));
    const LatentTensor eps(shape, rng.normal_vector(kDraws));
    const Eigen::VectorXd x = forward_noise(z0, t, eps, s).data;
    const double mean = x.mean();
    const double var = (x.array() - mean).square().sum() / (kDraws - 1);
    worst = std::max(worst, std::abs(var - 1.0));
    o.details.push_back("t=" + std::to_string(t) + " alpha_bar " + num(s.alpha_bar(t)) + " variance " + num(var, 5));
  }
  const double secs = since(t0);
  o.pass = worst <= 0.02 && secs < 30.0;
  o.summary = "max |var - 1| " + num(worst) + " at 3 timesteps x 1e5 draws (<= 0.02), " + num(secs, 3) + " s (< 30 s)";
  return o;
}

// ---------------------------------------------------------------- 3, 4

Outcome refiner_gradients() {
  const auto t0 = Clock::now();
  Outcome o;
  double worst = 0;
  bool all = true;
  for (RefineMode mode : {RefineMode::kSeparate, RefineMode::kJoint}) {
    RefinerConfig c;
    c.d = 8;
    c.h = 2;
    c.L = 1;
    c.n = 3;
    c.latent_size = 6;
    c.mode = mode;
    GradCheckOptions opt;
    opt.num_patches = 4;
    const GradCheckReport r = refiner_grad_check(c, 1e-4, opt);
    worst = std::max(worst, r.max_rel_error());
    all = all && r.passed();
    o.details.push_back(to_string(mode) + ": " + std::to_string(r.blocks.size()) + " blocks, max rel error " +
                        num(r.max_rel_error()));
    for (const auto& f : r.failures()) o.details.push_back("  failed " + f);
  }
  const double secs = since(t0);
  o.pass = all && worst <= 1e-4 && secs < 60.0;
  o.summary = "d=8 h=2 L=1 N=4: max relative error " + num(worst) + " (<= 1e-4), " + num(secs, 3) + " s (< 60 s)";
  return o;
}

ParameterSet random_refiner(const RefinerConfig& c, std::uint64_t seed) {
  ParameterSet ps;
  Rng rng(seed);
  add_refiner_params(ps, c, rng);
  for (auto& [name, p] : ps.entries()) p.value += rng.normal_matrix(p.value.rows(), p.value.cols(), 0.2);
  return ps;
}

double token_diff(const RefinedTrajectory& a, const RefinedTrajectory& b) {
  double m = 0;
  for (size_t i = 0; i < a.tokens.size(); ++i) m = std::max(m, (a.tokens[i] - b.tokens[i]).cwiseAbs().maxCoeff());
  return m;
}

Outcome attention_properties() {
  Outcome o;
  double row_err = 0;
  double single_err = 0;
  double perm_err = 0;
  for (RefineMode mode : {RefineMode::kSeparate, RefineMode::kJoint}) {
    RefinerConfig c;
    c.d = 16;
    c.h = 4;
    c.L = 2;
    c.n = 5;
    c.latent_size = 8;
    c.mode = mode;
    const ParameterSet ps = random_refiner(c, 4);
    Rng rng(5);
    const Eigen::MatrixXd q = rng.normal_matrix(c.n, c.d, 3.0);
    const Eigen::MatrixXd v = rng.normal_matrix(16, c.d, 3.0);

    RefineTrace trace;
    const RefinedTrajectory base = refine_tokens(q, v, c, ps, &trace);
    for (const auto& layer : trace.layers)
      for (const auto& b : layer.blocks) row_err = std::max(row_err, (b.rowwise().sum().array() - 1.0).abs().maxCoeff());

    RefineTrace one;
    static_cast<void>(refine_tokens(q, v.topRows(1), c, ps, &one));
    for (const auto& layer : one.layers)
      for (const auto& b : layer.blocks) single_err = std::max(single_err, std::abs(b(0, 0) - 1.0));

    std::vector<int> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Eigen::MatrixXd shuffled(16, c.d);
    for (int i = 0; i < 16; ++i) shuffled.row(i) = v.row(perm[i]);
    perm_err = std::max(perm_err, token_diff(base, refine_tokens(q, shuffled, c, ps)));
  }
  o.pass = row_err <= 1e-6 && single_err == 0.0 && perm_err <= 1e-6;
  o.summary = "row sums within " + num(row_err) + " (<= 1e-6), singleton weight error " + num(single_err) +
              " (exact), patch permutation " + num(perm_err) + " (<= 1e-6)";
  return o;
}

// ---------------------------------------------------------------- 5, 6, 7

Outcome pooling_properties() {
  Rng rng(6);
  RefinedTrajectory t;
  for (int i = 0; i < 5; ++i) t.tokens.push_back(rng.normal_vector(16));
  RefinedTrajectory p;
  for (int i : {3, 0, 4, 1, 2}) p.tokens.push_back(t.tokens[i]);

  AggregationConfig avg;
  avg.d = 16;
  avg.n = 5;
  avg.heads = 4;
  const ParameterSet none;
  const bool avg_exact = aggregate(t, avg, none) == aggregate(p, avg, none);

  AggregationConfig w = avg;
  w.mode = AggregateMode::kWeighted;
  ParameterSet wp;
  Rng wr(7);
  add_aggregate_params(wp, w, wr);
  for (auto& [name, e] : wp.entries()) e.value.setZero();
  const double gate_err = (aggregate(t, w, wp) - aggregate(t, avg, none)).cwiseAbs().maxCoeff();

  AggregationConfig cls = avg;
  cls.mode = AggregateMode::kCls;
  cls.cls_positional = true;
  ParameterSet cp;
  Rng cr(8);
  add_aggregate_params(cp, cls, cr);
  const double cls_diff = (aggregate(t, cls, cp) - aggregate(p, cls, cp)).cwiseAbs().maxCoeff();

  Outcome o;
  o.pass = avg_exact && gate_err <= 1e-6 && cls_diff > 1e-6;
  o.summary = std::string("average permutation ") + (avg_exact ? "exact" : "NOT exact") + ", zero gate vs average " +
              num(gate_err) + " (<= 1e-6), CLS+positions under permutation " + num(cls_diff) + " (> 1e-6)";
  return o;
}

// Exact rational arithmetic for the precision-recall oracle.
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
  [[nodiscard]] double value() const { return static_cast<double>(p) / static_cast<double>(q); }
};

// Sum over cutoffs of (recall_k - recall_{k-1}) * precision_k on the step PR curve.
Frac pr_area(const std::vector<int>& ranked) {
  const long positives = std::count(ranked.begin(), ranked.end(), 1);
  Frac area;
  Frac prev;
  long hits = 0;
  for (size_t k = 0; k < ranked.size(); ++k) {
    hits += ranked[k];
    const Frac recall{hits, positives};
    area = area + (recall + Frac{-prev.p, prev.q}) * Frac{hits, static_cast<long>(k + 1)};
    prev = recall;
  }
  return area;
}

Outcome metric_oracles() {
  double worst = 0;
  long cases = 0;
  for (int m = 1; m <= 6; ++m) {
    for (int mask = 1; mask < (1 << m); ++mask) {
      std::vector<int> labels(m);
      for (int i = 0; i < m; ++i) labels[i] = (mask >> i) & 1;
      std::vector<int> rank(m);
      std::iota(rank.begin(), rank.end(), 0);
      do {
        Eigen::VectorXd scores(m);
        std::vector<int> ranked(m);
        for (int i = 0; i < m; ++i) {
          scores[i] = 0.05 + 0.1 * rank[i];
          ranked[m - 1 - rank[i]] = labels[i];
        }
        worst = std::max(worst, std::abs(average_precision(scores, labels) - pr_area(ranked).value()));
        ++cases;
      } while (std::next_permutation(rank.begin(), rank.end()));
    }
  }
  Eigen::VectorXd s(4);
  s << 0.9, 0.8, 0.7, 0.6;
  const double worked = average_precision(s, std::vector<int>{1, 0, 1, 0});
  const double worked_err = std::abs(worked - 5.0 / 6.0);
  Outcome o;
  // 1e-15 covers the last-bit rounding of summing doubles against an exact rational.
  o.pass = worst <= 1e-15 && worked_err <= 1e-9 && std::abs(worked - 0.8333) < 1e-4;
  o.summary = std::to_string(cases) + " labeled rankings of <= 6 items, max deviation from rational oracle " +
              num(worst) + "; worked case " + num(worked, 10) + " (0.8333 +- 1e-9 of 5/6)";
  return o;
}

Outcome heatmap_oracle() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const TimestepPlan plan = select_timesteps(5);
    const LatentShape shape{4, 8, 8};
    std::vector<Trajectory> ts(9);
    for (auto& t : ts) {
      t.plan = plan;
      for (int k = 0; k < plan.n(); ++k) t.latents.emplace_back(shape, rng.normal_vector(shape.size()));
    }
    const CorrectionHeatmap h = delta_heatmaps(ts);
    for (int k = 1; k < plan.n(); ++k)
      for (int y = 0; y < shape.height; ++y)
        for (int x = 0; x < shape.width; ++x) {
          double acc = 0;
          for (const auto& t : ts) {
            double sq = 0;
            for (int c = 0; c < shape.channels; ++c) {
              const double d = t.latents[k].at(c, y, x) - t.latents[k - 1].at(c, y, x);
              sq += d * d;
            }
            acc += std::sqrt(sq);
          }
          worst = std::max(worst, std::abs(h.maps[k - 1](y, x) - acc / static_cast<double>(ts.size())));
        }
  }
  return {worst <= 1e-6, "max deviation from per-pixel per-sample loop " + num(worst) + " over 5 batches (<= 1e-6)", {}};
}

// ---------------------------------------------------------------- 8, 9, 10

struct Desk {
  json config = default_config();
  std::shared_ptr<ToyBackend> backend;
  std::vector<LabeledImage> train, val, test;
  double build_seconds = 0;
};

// Same recipe as `latte synth` with the default profile, run in-process.
Desk build_desk(std::uint64_t seed) {
  const auto t0 = Clock::now();
  Desk d;
  d.config["seed"] = seed;
  const json& s = d.config["data"]["synth"];
  ToyBackendSpec spec = backend_spec(d.config);
  spec.seed = derive_seed(seed, "generator", 0);
  std::vector<Image> procedural;
  for (int i = 0; i < d.config["backend"]["train_images"].get<int>(); ++i) {
    Rng rng(derive_seed(seed, "backend.images", static_cast<std::uint64_t>(i)));
    procedural.push_back(procedural_image(spec.image_size, rng));
  }
  d.backend = train_toy_backend(spec, procedural).backend;
  SynthSpec ss;
  ss.count = s["count"].get<int>();
  ss.image_size = spec.image_size;
  ss.seed = derive_seed(seed, "synth", fnv1a("toy"));
  ss.sample_steps = s["sample_steps"].get<int>();
  ss.source = "toy";
  ss.train_fraction = s["train_fraction"].get<double>();
  ss.val_fraction = s["val_fraction"].get<double>();
  for (auto& img : synth_toy_dataset(ss, d.backend.get())) {
    (img.split == "train" ? d.train : img.split == "val" ? d.val : d.test).push_back(std::move(img));
  }
  d.build_seconds = since(t0);
  return d;
}

struct Featurized {
  std::vector<Example> train, val, test;
};

FeatureSpec feature_spec(const Desk& d, int n) {
  FeatureSpec f;
  f.backend = d.backend.get();
  f.plan = select_timesteps(n, d.backend->schedule().num_steps());
  f.options = trajectory_config(d.config).options();
  f.preprocess = preprocess_config(d.config);
  f.seed = d.config["seed"].get<std::uint64_t>();
  return f;
}

Featurized featurize(const Desk& d, int n, int workers) {
  const FeatureSpec f = feature_spec(d, n);
  return {make_examples(d.train, f, workers).examples, make_examples(d.val, f, workers).examples,
          make_examples(d.test, f, workers).examples};
}

struct Variant {
  std::string name;
  int n = 5;
  std::string aggregate = "average";
  bool fine_tune = true;
  std::string components = "D";
};

json variant_config(const Desk& d, const Variant& v, std::uint64_t seed) {
  json c = d.config;
  c["seed"] = seed;
  c["trajectory"]["n"] = v.n;
  c["aggregate"]["mode"] = v.aggregate;
  c["backbone"]["fine_tune"] = v.fine_tune;
  c["model"]["components"] = v.components;
  return c;
}

Metrics fit(const json& c, const Featurized& f, int workers) {
  LatteModel model(model_config(c));
  static_cast<void>(train(model, f.train, f.val, train_config(c), workers));
  return evaluate(model, f.test, workers);
}

struct EndToEnd {
  Desk desk;
  Featurized features;
  std::unique_ptr<LatteModel> model;
  Metrics metrics;
};

Outcome end_to_end(EndToEnd& e, int workers) {
  const auto t0 = Clock::now();
  e.desk = build_desk(0);
  e.features = featurize(e.desk, 5, workers);
  e.model = std::make_unique<LatteModel>(model_config(e.desk.config));
  const TrainResult r = train(*e.model, e.features.train, e.features.val, train_config(e.desk.config), workers);
  e.metrics = evaluate(*e.model, e.features.test, workers);
  const double secs = since(t0);
  const size_t total = e.desk.train.size() + e.desk.val.size() + e.desk.test.size();
  Outcome o;
  o.pass = total >= 2000 && e.metrics.accuracy >= 0.90 && e.metrics.average_precision >= 0.95 && secs < 900;
  o.summary = std::to_string(total) + " images, test accuracy " + num(e.metrics.accuracy) + " (>= 0.90), AP " +
              num(e.metrics.average_precision) + " (>= 0.95), " + num(secs, 3) + " s (< 900 s)";
  o.details.push_back("backend + dataset " + num(e.desk.build_seconds, 3) + " s; best epoch " +
                      std::to_string(r.best_epoch) + " of " + std::to_string(r.log.size()) + ", val accuracy " +
                      num(r.best_val.accuracy));
  return o;
}

Outcome ablations(const EndToEnd& e, int workers) {
  const auto t0 = Clock::now();
  const Featurized t1 = featurize(e.desk, 1, workers);
  const std::vector<Variant> variants{{"D (T5, average, fine-tuned)"},
                                      {"T1", 1},
                                      {"weighted", 5, "weighted"},
                                      {"frozen", 5, "average", false},
                                      {"A (visual only)", 5, "average", true, "A"},
                                      {"B (latent only)", 5, "average", true, "B"}};
  std::vector<double> mean(variants.size(), 0.0);
  Outcome o;
  for (size_t v = 0; v < variants.size(); ++v) {
    std::string line = variants[v].name + ":";
    for (std::uint64_t seed : {0, 1, 2}) {
      json c = variant_config(e.desk, variants[v], seed);
      // Shorter runs than criterion 8 keep the 18 fits within a few minutes.
      c["train"]["max_epochs"] = 5;
      const Metrics m = fit(c, variants[v].n == 1 ? t1 : e.features, workers);
      mean[v] += m.accuracy / 3.0;
      line += " " + num(m.accuracy);
    }
    o.details.push_back(line + " -> mean " + num(mean[v]));
  }
  // (better, worse) pairs; an inversion only fails beyond 5 points.
  const std::vector<std::pair<size_t, size_t>> checks{{0, 1}, {0, 2}, {0, 3}, {0, 4}, {0, 5}};
  const std::vector<std::string> names{"T5 >= T1", "average >= weighted", "fine-tuned >= frozen", "D >= A", "D >= B"};
  bool hard_ok = true;
  int held = 0;
  double worst = 0;
  for (size_t i = 0; i < checks.size(); ++i) {
    const double gap = mean[checks[i].first] - mean[checks[i].second];
    const bool holds = gap >= 0;
    held += holds;
    hard_ok = hard_ok && gap >= -0.05;
    worst = std::max(worst, -gap);
    o.details.push_back(names[i] + ": " + (holds ? "holds" : "inverted") + " by " + num(std::abs(gap)));
  }
  o.pass = hard_ok;
  o.summary = std::to_string(held) + " of 5 trends hold over 3 seeds, worst inversion " + num(100 * worst, 3) +
              " points (fails beyond 5), " + num(since(t0), 3) + " s";
  return o;
}

Outcome robustness(const EndToEnd& e, int workers) {
  FeatureSpec f = feature_spec(e.desk, 5);
  auto run = [&](std::optional<PerturbationSpec> p) {
    f.perturbation = p;
    return evaluate(*e.model, make_examples(e.desk.test, f, workers).examples, workers);
  };
  const Metrics clean = run(std::nullopt);
  const Metrics blur0 = run(PerturbationSpec{PerturbationKind::kBlur, 0.0, 1});
  const Metrics crop1 = run(PerturbationSpec{PerturbationKind::kCropResize, 1.0, 1});
  const bool exact = clean.accuracy == e.metrics.accuracy && blur0.accuracy == clean.accuracy &&
                     crop1.accuracy == clean.accuracy && blur0.average_precision == clean.average_precision &&
                     crop1.average_precision == clean.average_precision;

  const json& sweep = e.desk.config["eval"]["perturbations"];
  auto table = [&] {
    std::ostringstream os;
    os << "kind,strength,accuracy\n";
    for (const auto& kind : e.desk.config["eval"]["kinds"]) {
      const PerturbationKind k = parse_perturbation_kind(kind.get<std::string>());
      for (double s : sweep[kind.get<std::string>()].get<std::vector<double>>()) {
        os << to_string(k) << ',' << s << ',' << json(run(PerturbationSpec{k, s, 9}).accuracy).dump() << '\n';
      }
    }
    return os.str();
  };
  const std::string first = table();
  const std::string second = table();

  Outcome o;
  std::istringstream is(first);
  std::string line;
  std::getline(is, line);
  size_t rows = 0;
  std::map<std::string, std::vector<double>> by_kind;
  while (std::getline(is, line)) {
    o.details.push_back(line);
    const auto a = line.find(',');
    const auto b = line.rfind(',');
    by_kind[line.substr(0, a)].push_back(std::stod(line.substr(b + 1)));
    ++rows;
  }
  for (const auto& [kind, acc] : by_kind) {
    const bool mono = std::is_sorted(acc.rbegin(), acc.rend());
    o.details.push_back(kind + " accuracy " + (mono ? "non-increasing" : "not monotone") + " in strength");
  }
  o.pass = exact && first == second && rows == 16;
  o.summary = std::string("blur 0 and crop 1 ") + (exact ? "reproduce" : "DO NOT reproduce") +
              " clean accuracy " + num(clean.accuracy) + " exactly; " + std::to_string(rows) + "-row sweep " +
              (first == second ? "identical" : "differs") + " across two seeded runs";
  return o;
}

// ---------------------------------------------------------------- 11

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Outcome cli_reproducibility() {
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / ("latte_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path tiny = root / "tiny.json";
  std::ofstream(tiny) << json{{"seed", 5},
                              {"backend", {{"train_images", 64}, {"ae_epochs", 3}, {"epochs", 3}}},
                              {"data", {{"synth", {{"count", 40}}}}},
                              {"train", {{"max_epochs", 2}}}}
                             .dump();
  const fs::path run_dir = root / "run";
  auto q = [](const fs::path& p) { return json(p.string()).dump(); };
  const std::vector<std::string> data = {"data.manifest=" + q(run_dir / "synth" / "data" / "manifest.jsonl"),
                                         "backend.checkpoint=" + q(run_dir / "synth" / "backend.ltc"),
                                         "eval.checkpoint=" + q(run_dir / "train" / "model.ltc"),
                                         "eval.checkpoints.toy=" + q(run_dir / "train" / "model.ltc")};
  const std::vector<std::string> commands = command_names();
  Outcome o;
  std::ostringstream sink;
  auto invoke = [&](const std::string& cmd, std::vector<fs::path> configs, std::vector<std::string> sets) {
    CliOptions opt;
    opt.command = cmd;
    opt.configs = std::move(configs);
    opt.overrides = std::move(sets);
    opt.out = (run_dir / cmd).string();
    return run_command(opt, sink, sink);
  };
  for (const auto& cmd : commands) {
    if (const int code = invoke(cmd, {tiny}, cmd == "synth" ? std::vector<std::string>{} : data); code != 0) {
      o.summary = "first run of " + cmd + " exited " + std::to_string(code);
      o.details.push_back(sink.str());
      fs::remove_all(root);
      return o;
    }
  }
  const fs::path saved = root / "saved";
  fs::rename(run_dir, saved);
  for (const auto& cmd : commands) {
    if (const int code = invoke(cmd, {saved / cmd / "resolved_config.json"}, {}); code != 0) {
      o.summary = "rerun of " + cmd + " exited " + std::to_string(code);
      fs::remove_all(root);
      return o;
    }
  }
  size_t files = 0;
  std::vector<std::string> differ;
  for (const auto& entry : fs::recursive_directory_iterator(saved)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), saved);
    const fs::path other = run_dir / rel;
    bool same = fs::exists(other);
    if (same && rel.filename() == "summary.json") {
      json a = json::parse(slurp(entry.path()));
      json b = json::parse(slurp(other));
      a.erase("wall_time_s");
      b.erase("wall_time_s");
      same = a == b;
    } else if (same) {
      same = slurp(entry.path()) == slurp(other);
    }
    if (!same) differ.push_back(rel.string());
    ++files;
  }
  fs::remove_all(root);
  for (const auto& d : differ) o.details.push_back("differs: " + d);
  o.pass = differ.empty() && files > 0;
  o.summary = std::to_string(commands.size()) + " commands rerun from their echoed configs, " + std::to_string(files) +
              " files compared, " + std::to_string(differ.size()) + " differ (wall_time_s excluded), " +
              num(since(t0), 3) + " s";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  int workers = 1;
  std::set<int> only;  // --only 1,2,7 runs a subset
  for (int i = 1; i + 1 < argc; ++i) {
    const std::string flag = argv[i];
    if (flag == "--workers") workers = std::max(1, std::atoi(argv[i + 1]));
    if (flag == "--only") {
      std::istringstream is(argv[i + 1]);
      for (std::string id; std::getline(is, id, ',');) only.insert(std::stoi(id));
    }
  }

  int failed = 0;
  int ran = 0;
  auto report = [&](int id, const std::function<Outcome()>& fn) {
    if (!only.empty() && !only.count(id) && !(id == 8 && (only.count(9) || only.count(10)))) return;
    ++ran;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& ex) {
      o.pass = false;
      o.summary = std::string("threw: ") + ex.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << std::setw(2) << id << ": " << o.summary << '\n';
    for (const auto& d : o.details) std::cout << "      " << d << '\n';
    std::cout.flush();
  };

  report(1, schedule_round_trip);
  report(2, monte_carlo_variance);
  report(3, refiner_gradients);
  report(4, attention_properties);
  report(5, pooling_properties);
  report(6, metric_oracles);
  report(7, heatmap_oracle);
  EndToEnd e;
  bool desk_ok = false;
  report(8, [&] {
    Outcome o = end_to_end(e, workers);
    desk_ok = e.model != nullptr;
    return o;
  });
  report(9, [&] { return desk_ok ? ablations(e, workers) : Outcome{false, "needs criterion 8's dataset", {}}; });
  report(10, [&] { return desk_ok ? robustness(e, workers) : Outcome{false, "needs criterion 8's model", {}}; });
  report(11, cli_reproducibility);
  std::cout << (ran - failed) << " of " << ran << " criteria passed\n";
  return failed;
}
