#include "latte/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "latte/analysis.hpp"
#include "latte/config.hpp"
#include "latte/image_io.hpp"

namespace latte {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"synth",    "extract", "train", "eval",
                                              "matrix",   "perturb-eval", "heatmap", "embed"};
  return names;
}

namespace {

/// Raised when per-item failures exceed data.failure_tolerance.
class ToleranceExceeded : public Error {
 public:
  using Error::Error;
};

struct Context {
  json config;
  fs::path out;
  int workers = 1;
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void info(const std::string& msg) const { *log << "[latte] " << msg << '\n'; }
  [[nodiscard]] const json& at(const std::string& section) const { return config.at(section); }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// summary.json is the only artifact with wall-clock content.
void write_summary(const Context& ctx, const std::string& command, json summary) {
  summary["command"] = command;
  summary["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  write_json(ctx.out / "summary.json", summary);
}

json failures_json(const std::vector<BatchFailure>& failures) {
  json arr = json::array();
  for (const auto& f : failures) arr.push_back({{"id", f.id}, {"message", f.message}});
  return arr;
}

void check_tolerance(const Context& ctx, size_t failures, size_t total) {
  const double tol = ctx.at("data").at("failure_tolerance").get<double>();
  if (total > 0 && static_cast<double>(failures) > tol * static_cast<double>(total)) {
    throw ToleranceExceeded(std::to_string(failures) + " of " + std::to_string(total) +
                            " items failed (tolerance " + std::to_string(tol) + ")");
  }
}

DatasetManifest load_manifest(const Context& ctx) {
  const json& d = ctx.at("data");
  const std::string manifest = d.at("manifest").get<std::string>();
  if (!manifest.empty()) return DatasetManifest::load(manifest);
  const std::string root = d.at("root").get<std::string>();
  if (!root.empty()) return scan_dataset(root, parse_layout(d.at("layout").get<std::string>()));
  throw ConfigError("data.manifest or data.root is required");
}

std::vector<std::string> sources(const Context& ctx) {
  return ctx.at("data").at("sources").get<std::vector<std::string>>();
}

std::vector<DatasetRecord> records_for(const Context& ctx, const DatasetManifest& m, const std::string& split_key,
                                       const std::vector<std::string>& srcs) {
  const std::string split = ctx.at("data").at(split_key).get<std::string>();
  auto records = m.select(split, srcs);
  if (records.empty()) {
    throw InvalidArgument("no records for split '" + split + "' in " + m.root.string());
  }
  return records;
}

std::shared_ptr<const DenoiserBackend> load_detector_backend(const Context& ctx) {
  const json& b = ctx.at("backend");
  const std::string checkpoint = b.at("checkpoint").get<std::string>();
  const std::string kind = b.at("kind").get<std::string>();
  if (kind == "toy" && checkpoint.empty()) throw ConfigError("backend.checkpoint is required (run synth first)");
  return load_backend(kind, checkpoint);
}

FeatureSpec feature_spec(const Context& ctx, const DenoiserBackend& backend) {
  FeatureSpec spec;
  spec.backend = &backend;
  const TrajectoryConfig t = trajectory_config(ctx.config);
  try {
    spec.plan = t.plan(backend.schedule().num_steps());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("trajectory: ") + e.what());
  }
  spec.options = t.options();
  spec.preprocess = preprocess_config(ctx.config);
  spec.seed = ctx.seed;
  return spec;
}

struct Features {
  std::vector<Example> examples;
  std::vector<BatchFailure> failures;
  size_t total = 0;
};

Features featurize(const Context& ctx, const DatasetManifest& m, const std::vector<DatasetRecord>& records,
                   const FeatureSpec& spec) {
  LoadedImages loaded = load_images(m, records, ctx.workers);
  ExampleSet set = make_examples(loaded.images, spec, ctx.workers);
  Features f{std::move(set.examples), std::move(loaded.failures), records.size()};
  f.failures.insert(f.failures.end(), set.failures.begin(), set.failures.end());
  for (const auto& fail : f.failures) ctx.info("skipped " + fail.id + ": " + fail.message);
  return f;
}

/// Optional train-time augmentation: each item is perturbed with probability
/// data.augment.probability, decided by a seed derived from its id.
Features featurize_train(const Context& ctx, const DatasetManifest& m, const std::vector<DatasetRecord>& records,
                         const FeatureSpec& spec) {
  const json& a = ctx.at("data").at("augment");
  if (!a.at("enabled").get<bool>()) return featurize(ctx, m, records, spec);
  PerturbationSpec p;
  try {
    p = {parse_perturbation_kind(a.at("kind").get<std::string>()), a.at("strength").get<double>(),
         derive_seed(ctx.seed, "augment", 0)};
    p.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("data.augment: ") + e.what());
  }
  const double prob = a.at("probability").get<double>();
  if (!(prob >= 0.0 && prob <= 1.0)) throw ConfigError("data.augment.probability must be in [0, 1]");

  LoadedImages loaded = load_images(m, records, ctx.workers);
  std::vector<LabeledImage> plain, augmented;
  std::vector<std::pair<bool, size_t>> where;
  for (auto& li : loaded.images) {
    Rng coin(derive_seed(ctx.seed, "augment.coin", fnv1a(li.id)));
    const bool hit = coin.uniform() < prob;
    auto& dst = hit ? augmented : plain;
    where.emplace_back(hit, dst.size());
    dst.push_back(std::move(li));
  }
  FeatureSpec aug_spec = spec;
  aug_spec.perturbation = p;
  ExampleSet sp = make_examples(plain, spec, ctx.workers);
  ExampleSet sa = make_examples(augmented, aug_spec, ctx.workers);
  // Restore manifest order; skipped items are dropped by id.
  std::map<std::string, Example*> by_id;
  for (auto& e : sp.examples) by_id[e.id] = &e;
  for (auto& e : sa.examples) by_id[e.id] = &e;
  Features f;
  f.total = records.size();
  for (const auto& [hit, idx] : where) {
    const std::string& id = (hit ? augmented : plain)[idx].id;
    if (auto it = by_id.find(id); it != by_id.end()) f.examples.push_back(std::move(*it->second));
  }
  f.failures = std::move(loaded.failures);
  f.failures.insert(f.failures.end(), sp.failures.begin(), sp.failures.end());
  f.failures.insert(f.failures.end(), sa.failures.begin(), sa.failures.end());
  for (const auto& fail : f.failures) ctx.info("skipped " + fail.id + ": " + fail.message);
  ctx.info("augmented " + std::to_string(sa.examples.size()) + " of " + std::to_string(f.examples.size()) +
           " training items with " + to_string(p.kind));
  return f;
}

json checkpoint_meta(const Context& ctx, const FeatureSpec& spec) {
  return {{"trajectory", trajectory_config(ctx.config).to_json()},
          {"plan", spec.plan.steps},
          {"backend", spec.backend->fingerprint()},
          {"backbone_mean", spec.preprocess.mean},
          {"backbone_std", spec.preprocess.stddev}};
}

LatteModel load_model(const Context& ctx, const fs::path& path, const FeatureSpec& spec) {
  if (path.empty()) throw ConfigError("eval.checkpoint is required");
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  json meta;
  LatteModel model = LatteModel::load_compatible(path, model_config(ctx.config), &meta);
  if (meta.value("plan", std::vector<int>{}) != spec.plan.steps) {
    throw IncompatibleCheckpoint(path.string() + " was trained on a different timestep plan");
  }
  if (meta.value("backend", "") != spec.backend->fingerprint()) {
    throw IncompatibleCheckpoint(path.string() + " was trained with backend " + meta.value("backend", "?") +
                                 ", configured backend is " + spec.backend->fingerprint());
  }
  return model;
}

std::string safe_name(const std::string& id) {
  std::string s = fs::path(id).replace_extension().string();
  std::replace(s.begin(), s.end(), '/', '_');
  std::replace(s.begin(), s.end(), '\\', '_');
  return s;
}

/// Shortest representation that reads back to the same double.
std::string fmt(double v) { return json(v).dump(); }

// ---- commands ---------------------------------------------------------------

int cmd_synth(Context& ctx) {
  const json& s = ctx.at("data").at("synth");
  const auto srcs = s.at("sources").get<std::vector<std::string>>();
  if (srcs.empty()) throw ConfigError("data.synth.sources must name at least one generator");
  ToyBackendSpec base = backend_spec(ctx.config);
  const int size = s.at("image_size").get<int>();
  if (size != base.image_size) throw ConfigError("data.synth.image_size must equal backend.image_size");

  const int train_images = ctx.at("backend").at("train_images").get<int>();
  if (train_images < 2) throw ConfigError("backend.train_images must be >= 2");
  std::vector<Image> procedural;
  for (int i = 0; i < train_images; ++i) {
    Rng rng(derive_seed(ctx.seed, "backend.images", static_cast<std::uint64_t>(i)));
    procedural.push_back(procedural_image(base.image_size, rng));
  }

  std::vector<LabeledImage> all;
  json per_source = json::object();
  for (size_t g = 0; g < srcs.size(); ++g) {
    ToyBackendSpec spec = base;
    spec.seed = derive_seed(ctx.seed, "generator", g);
    ctx.info("training toy generator '" + srcs[g] + "' on " + std::to_string(train_images) + " images");
    TrainedToyBackend trained = train_toy_backend(spec, procedural);
    for (const auto& w : trained.report.warnings) ctx.info("generator " + srcs[g] + ": " + w);
    const fs::path path = ctx.out / "backends" / (srcs[g] + ".ltc");
    fs::create_directories(path.parent_path());
    trained.backend->save(path);
    if (g == 0) trained.backend->save(ctx.out / "backend.ltc");

    SynthSpec ss;
    ss.count = s.at("count").get<int>();
    ss.image_size = size;
    ss.seed = derive_seed(ctx.seed, "synth", fnv1a(srcs[g]));
    ss.sample_steps = s.at("sample_steps").get<int>();
    ss.source = srcs[g];
    ss.train_fraction = s.at("train_fraction").get<double>();
    ss.val_fraction = s.at("val_fraction").get<double>();
    auto images = synth_toy_dataset(ss, trained.backend.get());
    per_source[srcs[g]] = {{"count", images.size()},
                           {"backend", path.string()},
                           {"fingerprint", trained.backend->fingerprint()},
                           {"training", trained.report.to_json()}};
    std::move(images.begin(), images.end(), std::back_inserter(all));
  }
  const DatasetManifest m = write_dataset(all, ctx.out / "data");
  write_summary(ctx, "synth",
                {{"count", all.size()},
                 {"manifest", (ctx.out / "data" / "manifest.jsonl").string()},
                 {"backend", (ctx.out / "backend.ltc").string()},
                 {"sources", per_source}});
  ctx.info("wrote " + std::to_string(m.records.size()) + " images to " + (ctx.out / "data").string());
  return kExitOk;
}

int cmd_extract(Context& ctx) {
  const DatasetManifest m = load_manifest(ctx);
  auto backend = load_detector_backend(ctx);
  const FeatureSpec spec = feature_spec(ctx, *backend);
  const auto records = records_for(ctx, m, "split", sources(ctx));
  LoadedImages loaded = load_images(m, records, ctx.workers);

  std::vector<Image> images;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> ids;
  const int size = backend->image_size();
  for (const auto& li : loaded.images) {
    Image rgb = to_rgb(li.image);
    images.push_back(rgb.height == size && rgb.width == size ? rgb : resize_bilinear(rgb, size, size));
    seeds.push_back(trajectory_seed(ctx.seed, li.id));
    ids.push_back(li.id);
  }
  BatchResult result = batch_extract(images, seeds, spec.plan, *backend, spec.options, ctx.workers, ids);
  std::vector<BatchFailure> failures = loaded.failures;
  failures.insert(failures.end(), result.failures.begin(), result.failures.end());
  for (const auto& f : failures) ctx.info("skipped " + f.id + ": " + f.message);

  const fs::path dir = ctx.out / "trajectories";
  fs::create_directories(dir);
  size_t written = 0;
  json index = json::array();
  for (size_t i = 0; i < ids.size(); ++i) {
    if (!result.trajectories[i]) continue;
    const std::string name = safe_name(ids[i]);
    save_trajectory(*result.trajectories[i], ids[i], backend->fingerprint(), dir / (name + ".ltc"),
                    dir / (name + ".json"));
    index.push_back({{"id", ids[i]}, {"file", name + ".ltc"}});
    ++written;
  }
  write_json(dir / "index.json", index);
  write_summary(ctx, "extract",
                {{"count", written},
                 {"failures", failures.size()},
                 {"failed", failures_json(failures)},
                 {"plan", spec.plan.steps},
                 {"backend", backend->fingerprint()}});
  check_tolerance(ctx, failures.size(), records.size());
  return kExitOk;
}

int cmd_train(Context& ctx) {
  const DatasetManifest m = load_manifest(ctx);
  auto backend = load_detector_backend(ctx);
  const FeatureSpec spec = feature_spec(ctx, *backend);
  const ModelConfig mc = model_config(ctx.config);
  const TrainConfig tc = train_config(ctx.config);
  const auto srcs = sources(ctx);
  Features tr = featurize_train(ctx, m, records_for(ctx, m, "train_split", srcs), spec);
  Features va = featurize(ctx, m, records_for(ctx, m, "val_split", srcs), spec);
  check_tolerance(ctx, tr.failures.size() + va.failures.size(), tr.total + va.total);

  LatteModel model(mc);
  ctx.info("training variant " + mc.components.name() + " on " + std::to_string(tr.examples.size()) + " examples");
  const std::string configured = ctx.at("train").at("checkpoint").get<std::string>();
  const fs::path checkpoint = configured.empty() ? ctx.out / "model.ltc" : fs::path(configured);
  json meta = checkpoint_meta(ctx, spec);
  meta["training"] = ctx.at("train");
  TrainResult result;
  try {
    result = train(model, tr.examples, va.examples, tc, ctx.workers);
  } catch (const TrainingDiverged& e) {
    LatteModel last(mc, e.last_good());
    last.save(ctx.out / "model.last_good.ltc", meta);
    throw;
  }
  meta["epoch"] = result.best_epoch;
  meta["metrics"] = result.best_val.to_json();
  model.save(checkpoint, meta);
  write_json(ctx.out / "train_log.json", result.to_json());
  for (const auto& e : result.log) {
    ctx.info("epoch " + std::to_string(e.epoch) + " loss " + fmt(e.train_loss) + " val acc " + fmt(e.val.accuracy));
  }
  write_summary(ctx, "train",
                {{"checkpoint", checkpoint.string()},
                 {"best_epoch", result.best_epoch},
                 {"val", result.best_val.to_json()},
                 {"train_count", tr.examples.size()},
                 {"val_count", va.examples.size()},
                 {"failures", tr.failures.size() + va.failures.size()}});
  return kExitOk;
}

json metrics_by_source(const std::vector<Example>& examples, const Eigen::VectorXd& p) {
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < examples.size(); ++i) groups[examples[i].source].push_back(i);
  json out = json::object();
  for (const auto& [src, idx] : groups) {
    std::vector<Example> sub;
    Eigen::VectorXd ps(static_cast<Eigen::Index>(idx.size()));
    for (size_t k = 0; k < idx.size(); ++k) {
      sub.push_back(examples[idx[k]]);
      ps[static_cast<Eigen::Index>(k)] = p[static_cast<Eigen::Index>(idx[k])];
    }
    out[src] = compute_metrics(ps, sub).to_json();
  }
  return out;
}

int cmd_eval(Context& ctx) {
  const DatasetManifest m = load_manifest(ctx);
  auto backend = load_detector_backend(ctx);
  const FeatureSpec spec = feature_spec(ctx, *backend);
  const LatteModel model = load_model(ctx, ctx.at("eval").at("checkpoint").get<std::string>(), spec);
  Features te = featurize(ctx, m, records_for(ctx, m, "test_split", sources(ctx)), spec);
  if (te.examples.empty()) throw InvalidArgument("evaluate: empty test set");
  const Eigen::VectorXd p = model.predict(te.examples, ctx.workers);
  const Metrics overall = compute_metrics(p, te.examples);
  const json report = {{"overall", overall.to_json()}, {"by_source", metrics_by_source(te.examples, p)}};
  write_json(ctx.out / "eval.json", report);
  write_summary(ctx, "eval", {{"metrics", overall.to_json()}, {"failures", te.failures.size()}});
  ctx.info("accuracy " + fmt(overall.accuracy) + " AP " + fmt(overall.average_precision));
  check_tolerance(ctx, te.failures.size(), te.total);
  return kExitOk;
}

int cmd_matrix(Context& ctx) {
  const DatasetManifest m = load_manifest(ctx);
  auto backend = load_detector_backend(ctx);
  const FeatureSpec spec = feature_spec(ctx, *backend);
  const json& cps = ctx.at("eval").at("checkpoints");
  if (cps.empty()) throw ConfigError("eval.checkpoints must map source names to checkpoints");

  std::vector<std::string> srcs = sources(ctx);
  if (srcs.empty()) srcs = m.sources();
  std::map<std::string, std::vector<Example>> tests;
  size_t failures = 0;
  size_t total = 0;
  for (const auto& s : srcs) {
    const auto recs = m.select(ctx.at("data").at("test_split").get<std::string>(), {s});
    if (recs.empty()) continue;
    Features f = featurize(ctx, m, recs, spec);
    failures += f.failures.size();
    total += f.total;
    tests[s] = std::move(f.examples);
  }
  std::map<std::string, LatteModel> owned;
  std::map<std::string, const LatteModel*> models;
  std::vector<std::string> missing;
  for (const auto& [src, path] : cps.items()) {
    const fs::path p = path.get<std::string>();
    if (!fs::exists(p)) {
      missing.push_back(src + ": checkpoint " + p.string() + " not found");
      models[src] = nullptr;
      continue;
    }
    owned.emplace(src, load_model(ctx, p, spec));
    models[src] = &owned.at(src);
  }
  EvalReport report = cross_matrix(models, tests, ctx.workers);
  report.gaps.insert(report.gaps.begin(), missing.begin(), missing.end());
  write_json(ctx.out / "matrix.json", report.to_json());
  write_text(ctx.out / "matrix.csv", report.to_csv());
  for (const auto& g : report.gaps) ctx.info("gap " + g);
  write_summary(ctx, "matrix", {{"cells", report.records.size()}, {"gaps", report.gaps}, {"failures", failures}});
  check_tolerance(ctx, failures, total);
  return kExitOk;
}

int cmd_perturb_eval(Context& ctx) {
  const DatasetManifest m = load_manifest(ctx);
  auto backend = load_detector_backend(ctx);
  FeatureSpec spec = feature_spec(ctx, *backend);
  const LatteModel model = load_model(ctx, ctx.at("eval").at("checkpoint").get<std::string>(), spec);
  const auto records = records_for(ctx, m, "test_split", sources(ctx));
  LoadedImages loaded = load_images(m, records, ctx.workers);
  for (const auto& f : loaded.failures) ctx.info("skipped " + f.id + ": " + f.message);

  auto run = [&](std::optional<PerturbationSpec> p, size_t& failed) {
    spec.perturbation = p;
    ExampleSet set = make_examples(loaded.images, spec, ctx.workers);
    failed = set.failures.size();
    if (set.examples.empty()) throw InvalidArgument("perturb-eval: every example failed");
    return evaluate(model, set.examples, ctx.workers);
  };
  size_t failed = 0;
  const Metrics clean = run(std::nullopt, failed);
  size_t max_failed = failed;
  std::ostringstream csv;
  csv << "kind,strength,accuracy,average_precision,count\n";
  csv << "none,0," << fmt(clean.accuracy) << ',' << fmt(clean.average_precision) << ',' << clean.count << '\n';
  json rows = json::array();
  json monotone = json::object();
  for (const auto& kind : ctx.at("eval").at("kinds").get<std::vector<std::string>>()) {
    PerturbationKind k;
    try {
      k = parse_perturbation_kind(kind);
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("eval.kinds: ") + e.what());
    }
    if (!ctx.at("eval").at("perturbations").contains(kind)) throw ConfigError("eval.perturbations." + kind + " missing");
    double prev = 2.0;
    bool mono = true;
    for (double strength : ctx.at("eval").at("perturbations").at(kind).get<std::vector<double>>()) {
      PerturbationSpec p{k, strength, derive_seed(ctx.seed, "perturb", fnv1a(kind))};
      try {
        p.validate();
      } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("eval.perturbations.") + kind + ": " + e.what());
      }
      const Metrics mt = run(p, failed);
      max_failed = std::max(max_failed, failed);
      mono = mono && mt.accuracy <= prev;
      prev = mt.accuracy;
      rows.push_back({{"kind", to_string(k)}, {"strength", strength}, {"metrics", mt.to_json()}});
      csv << to_string(k) << ',' << fmt(strength) << ',' << fmt(mt.accuracy) << ',' << fmt(mt.average_precision) << ','
          << mt.count << '\n';
      ctx.info(kind + " " + fmt(strength) + ": accuracy " + fmt(mt.accuracy));
    }
    monotone[to_string(k)] = mono;
  }
  write_json(ctx.out / "perturb.json",
             {{"clean", clean.to_json()}, {"sweep", rows}, {"accuracy_nonincreasing", monotone}});
  write_text(ctx.out / "perturb.csv", csv.str());
  write_summary(ctx, "perturb-eval", {{"clean", clean.to_json()}, {"rows", rows.size()}});
  check_tolerance(ctx, loaded.failures.size() + max_failed, records.size());
  return kExitOk;
}

int cmd_heatmap(Context& ctx) {
  const DatasetManifest m = load_manifest(ctx);
  auto backend = load_detector_backend(ctx);
  const FeatureSpec spec = feature_spec(ctx, *backend);
  if (spec.plan.n() < 2) throw ConfigError("heatmaps need a plan with at least two timesteps");
  const auto records = records_for(ctx, m, "split", sources(ctx));
  LoadedImages loaded = load_images(m, records, ctx.workers);
  std::vector<Image> images;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> ids;
  const int size = backend->image_size();
  for (const auto& li : loaded.images) {
    Image rgb = to_rgb(li.image);
    images.push_back(rgb.height == size && rgb.width == size ? rgb : resize_bilinear(rgb, size, size));
    seeds.push_back(trajectory_seed(ctx.seed, li.id));
    ids.push_back(li.id);
  }
  const std::string source = ctx.at("analysis").at("heatmap_source").get<std::string>();
  if (source != "latent" && source != "refined") {
    throw ConfigError("analysis.heatmap_source must be latent or refined, got '" + source + "'");
  }
  json report = json::object();
  size_t extract_failures = 0;
  auto emit = [&](const std::string& cls, const CorrectionHeatmap& h) {
    h.save(ctx.out / ("heatmap_" + cls + ".ltc"));
    write_png(ctx.out / ("heatmap_" + cls + ".png"), render_heatmap(h));
    report[cls] = h.summary();
    ctx.info(cls + ": interval variance " + fmt(h.interval_variance()));
  };
  if (source == "latent") {
    BatchResult result = batch_extract(images, seeds, spec.plan, *backend, spec.options, ctx.workers, ids);
    extract_failures = result.failures.size();
    std::map<std::string, std::vector<Trajectory>> by_class;
    for (size_t i = 0; i < loaded.images.size(); ++i) {
      if (!result.trajectories[i]) continue;
      by_class[loaded.images[i].label == kLabelFake ? "fake" : "real"].push_back(*result.trajectories[i]);
    }
    for (const auto& [cls, trajs] : by_class) emit(cls, delta_heatmaps(trajs));
  } else {
    const LatteModel model = load_model(ctx, ctx.at("eval").at("checkpoint").get<std::string>(), spec);
    ExampleSet set = make_examples(loaded.images, spec, ctx.workers);
    extract_failures = set.failures.size();
    const auto tokens = model.refined_tokens(set.examples, ctx.workers);
    std::map<std::string, std::vector<RefinedTrajectory>> by_class;
    for (size_t i = 0; i < set.examples.size(); ++i) {
      by_class[set.examples[i].label == kLabelFake ? "fake" : "real"].push_back(tokens[i]);
    }
    for (const auto& [cls, toks] : by_class) emit(cls, token_delta_heatmaps(toks, spec.plan));
  }
  write_json(ctx.out / "heatmap.json", {{"source", source}, {"classes", report}});
  const size_t failures = loaded.failures.size() + extract_failures;
  write_summary(ctx, "heatmap", {{"classes", report.size()}, {"failures", failures}});
  check_tolerance(ctx, failures, records.size());
  return kExitOk;
}

int cmd_embed(Context& ctx) {
  const DatasetManifest m = load_manifest(ctx);
  auto backend = load_detector_backend(ctx);
  const FeatureSpec spec = feature_spec(ctx, *backend);
  const LatteModel model = load_model(ctx, ctx.at("eval").at("checkpoint").get<std::string>(), spec);
  Features f = featurize(ctx, m, records_for(ctx, m, "split", sources(ctx)), spec);
  const EmbeddingTable table = export_embeddings(model, f.examples, ctx.workers);
  write_text(ctx.out / "embeddings.csv", table.to_csv());
  table.save_binary(ctx.out / "embeddings.ltc");
  const DistanceStats d = embedding_distances(table);
  write_json(ctx.out / "embeddings.json",
             {{"rows", table.rows.size()}, {"width", table.width()}, {"intra_mean", d.intra}, {"inter_mean", d.inter}});
  write_summary(ctx, "embed", {{"rows", table.rows.size()}, {"failures", f.failures.size()}});
  check_tolerance(ctx, f.failures.size(), f.total);
  return kExitOk;
}

}  // namespace

int run_command(const CliOptions& options, std::ostream& out, std::ostream& log) {
  static const std::map<std::string, std::function<int(Context&)>> commands{
      {"synth", cmd_synth}, {"extract", cmd_extract},           {"train", cmd_train},     {"eval", cmd_eval},
      {"matrix", cmd_matrix}, {"perturb-eval", cmd_perturb_eval}, {"heatmap", cmd_heatmap}, {"embed", cmd_embed}};
  const auto it = commands.find(options.command);
  if (it == commands.end()) {
    log << "latte: unknown command '" << options.command << "'\n";
    return kExitUsage;
  }
  Context ctx;
  ctx.log = &log;
  try {
    std::vector<std::string> overrides;
    if (options.seed) overrides.push_back("seed=" + std::to_string(*options.seed));
    if (options.out) overrides.push_back("out=" + json(*options.out).dump());
    if (options.workers) overrides.push_back("workers=" + std::to_string(*options.workers));
    overrides.insert(overrides.end(), options.overrides.begin(), options.overrides.end());
    ctx.config = resolve_config(options.configs, overrides);
    ctx.out = ctx.config.at("out").get<std::string>();
    ctx.seed = ctx.config.at("seed").get<std::uint64_t>();
    ctx.workers = std::max(1, ctx.config.at("workers").get<int>());
    // Fail on malformed sections before any work or output.
    model_config(ctx.config);
    train_config(ctx.config);
    preprocess_config(ctx.config);
    backend_spec(ctx.config);
    fs::create_directories(ctx.out);
    write_json(ctx.out / "resolved_config.json", ctx.config);
  } catch (const ConfigError& e) {
    log << "latte: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    log << "latte: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "latte: " << e.what() << '\n';
    return kExitRuntime;
  }

  try {
    const int code = it->second(ctx);
    out << (ctx.out / "summary.json").string() << '\n';
    return code;
  } catch (const ConfigError& e) {
    log << "latte: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IncompatibleCheckpoint& e) {
    log << "latte: incompatible checkpoint: " << e.what() << '\n';
    return kExitIncompatible;
  } catch (const ToleranceExceeded& e) {
    log << "latte: failure tolerance exceeded: " << e.what() << '\n';
    return kExitTolerance;
  } catch (const std::exception& e) {
    log << "latte: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace latte
