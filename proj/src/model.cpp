#include "latte/model.hpp"

#include "latte/container.hpp"
#include "latte/trajectory.hpp"

namespace latte {

void Components::validate() const {
  if (!visual && !latent) throw InvalidArgument("model needs at least one of visual and latent components");
  if (refine && !(visual && latent)) throw InvalidArgument("refinement needs both visual and latent components");
}

std::string Components::name() const {
  if (visual && latent && refine) return "D";
  if (visual && latent) return "C";
  return visual ? "A" : "B";
}

Components Components::from_name(const std::string& variant) {
  if (variant == "A" || variant == "visual") return {true, false, false};
  if (variant == "B" || variant == "latent") return {false, true, false};
  if (variant == "C" || variant == "visual+latent") return {true, true, false};
  if (variant == "D" || variant == "full") return {true, true, true};
  throw InvalidArgument("unknown component variant '" + variant + "' (expected A, B, C or D)");
}

void ModelConfig::normalize() {
  refiner.d = backbone.d;
  aggregate.d = backbone.d;
  aggregate.n = refiner.n;
  aggregate.heads = refiner.h;
}

void ModelConfig::validate() const {
  backbone.validate();
  refiner.validate();
  aggregate.validate();
  components.validate();
  if (refiner.d != backbone.d || aggregate.d != backbone.d || aggregate.n != refiner.n) {
    throw InvalidArgument("model widths are inconsistent; call normalize()");
  }
}

int ModelConfig::feature_width() const {
  return (components.visual ? backbone.d : 0) + (components.latent ? backbone.d : 0);
}

nlohmann::json ModelConfig::to_json() const {
  return {{"backbone", backbone.to_json()},
          {"refiner", refiner.to_json()},
          {"aggregate", aggregate.to_json()},
          {"components", components.name()},
          {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.backbone = BackboneConfig::from_json(j.value("backbone", nlohmann::json::object()));
  c.refiner = RefinerConfig::from_json(j.value("refiner", nlohmann::json::object()));
  c.aggregate = AggregationConfig::from_json(j.value("aggregate", nlohmann::json::object()));
  c.components = Components::from_name(j.value("components", std::string("D")));
  c.init_seed = j.value("init_seed", std::uint64_t{0});
  c.normalize();
  return c;
}

LatteModel::LatteModel(ModelConfig config) : config_(std::move(config)) {
  config_.normalize();
  config_.validate();
  init_params();
  apply_trainable();
}

LatteModel::LatteModel(ModelConfig config, ParameterSet params) : config_(std::move(config)), params_(std::move(params)) {
  config_.normalize();
  config_.validate();
  apply_trainable();
}

void LatteModel::init_params() {
  Rng rng(derive_seed(config_.init_seed, "model.init", 0));
  if (config_.components.visual) add_backbone_params(params_, config_.backbone, rng);
  if (config_.components.latent) {
    if (config_.components.refine) {
      add_refiner_params(params_, config_.refiner, rng);
    } else {
      nn::add_linear(params_, "refiner.proj", config_.refiner.latent_size, config_.d(), rng);
    }
    add_aggregate_params(params_, config_.aggregate, rng);
  }
  add_classifier_params(params_, config_.feature_width());
}

void LatteModel::apply_trainable() { set_backbone_trainable(params_, config_.backbone.fine_tune); }

namespace {

template <typename Params>
BackboneOutput visual_forward(ad::Tape& tape, Params& ps, const ModelConfig& config,
                              std::span<const Example* const> batch) {
  std::vector<Image> images;
  images.reserve(batch.size());
  for (const Example* e : batch) images.push_back(e->image);
  return backbone_forward(tape, ps, config.backbone, tape.constant(image_rows(images, config.backbone)),
                          static_cast<int>(batch.size()));
}

/// Per-timestep tokens (B*n x d), refined when the config asks for it.
template <typename Params>
ad::Var token_forward(ad::Tape& tape, Params& ps, const ModelConfig& config, std::span<const Example* const> batch,
                      const BackboneOutput& visual) {
  const int b = static_cast<int>(batch.size());
  const int n = config.n();
  Eigen::MatrixXd lat(Eigen::Index{b} * n, config.refiner.latent_size);
  for (int i = 0; i < b; ++i) {
    const Eigen::MatrixXd& l = batch[i]->latents;
    if (l.rows() != n || l.cols() != config.refiner.latent_size) {
      throw InvalidArgument("example " + batch[i]->id + ": trajectory is " + std::to_string(l.rows()) + "x" +
                            std::to_string(l.cols()) + ", model expects " + std::to_string(n) + "x" +
                            std::to_string(config.refiner.latent_size));
    }
    lat.middleRows(Eigen::Index{i} * n, n) = l;
  }
  ad::Var tokens = project_latents(tape, ps, tape.constant(std::move(lat)));
  if (config.components.refine) {
    tokens = refine_forward(tape, ps, config.refiner, tokens, visual.patch_tokens, b, config.backbone.tokens());
  }
  return tokens;
}

}  // namespace

template <typename Params>
ad::Var LatteModel::embed(ad::Tape& tape, Params& ps, const ModelConfig& config, std::span<const Example* const> batch) {
  const int b = static_cast<int>(batch.size());
  if (b == 0) throw InvalidArgument("embed: empty batch");
  std::vector<ad::Var> parts;
  BackboneOutput visual;
  if (config.components.visual) visual = visual_forward(tape, ps, config, batch);
  if (config.components.latent) {
    parts.push_back(aggregate_forward(tape, ps, config.aggregate, token_forward(tape, ps, config, batch, visual), b));
  }
  if (config.components.visual) parts.push_back(visual.global_token);
  return parts.size() == 1 ? parts.front() : ad::concat_cols(parts);
}

template <typename Params>
ad::Var LatteModel::logits(ad::Tape& tape, Params& ps, const ModelConfig& config,
                           std::span<const Example* const> batch) {
  return classifier_forward(tape, ps, embed(tape, ps, config, batch));
}

template ad::Var LatteModel::embed(ad::Tape&, ParameterSet&, const ModelConfig&, std::span<const Example* const>);
template ad::Var LatteModel::embed(ad::Tape&, const ParameterSet&, const ModelConfig&, std::span<const Example* const>);
template ad::Var LatteModel::logits(ad::Tape&, ParameterSet&, const ModelConfig&, std::span<const Example* const>);
template ad::Var LatteModel::logits(ad::Tape&, const ParameterSet&, const ModelConfig&, std::span<const Example* const>);

namespace {

template <typename Fn>
Eigen::MatrixXd chunked(std::span<const Example> examples, int workers, Eigen::Index width, Fn fn) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(examples.size()), width);
  const size_t chunks = (examples.size() + LatteModel::kChunk - 1) / LatteModel::kChunk;
  parallel_for(chunks, workers, [&](size_t c) {
    const size_t begin = c * LatteModel::kChunk;
    const size_t end = std::min(examples.size(), begin + LatteModel::kChunk);
    std::vector<const Example*> batch;
    for (size_t i = begin; i < end; ++i) batch.push_back(&examples[i]);
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) = fn(batch);
  });
  return out;
}

}  // namespace

Eigen::VectorXd LatteModel::predict(std::span<const Example> examples, int workers) const {
  const Eigen::MatrixXd logit = chunked(examples, workers, 1, [&](const std::vector<const Example*>& batch) {
    ad::Tape tape(false);
    return logits(tape, params_, config_, batch).value();
  });
  Eigen::VectorXd p(logit.rows());
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = sigmoid(logit(i, 0));
  if (!p.allFinite()) throw NumericalError("non-finite predictions");
  return p;
}

Eigen::MatrixXd LatteModel::embeddings(std::span<const Example> examples, int workers) const {
  return chunked(examples, workers, config_.feature_width(), [&](const std::vector<const Example*>& batch) {
    ad::Tape tape(false);
    return embed(tape, params_, config_, batch).value();
  });
}

std::vector<RefinedTrajectory> LatteModel::refined_tokens(std::span<const Example> examples, int workers) const {
  if (!config_.components.latent) throw InvalidArgument("refined_tokens: model has no latent branch");
  const int n = config_.n();
  std::vector<RefinedTrajectory> out(examples.size());
  const size_t chunks = (examples.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, workers, [&](size_t c) {
    const size_t begin = c * kChunk;
    const size_t end = std::min(examples.size(), begin + kChunk);
    std::vector<const Example*> batch;
    for (size_t i = begin; i < end; ++i) batch.push_back(&examples[i]);
    ad::Tape tape(false);
    BackboneOutput visual;
    if (config_.components.visual) visual = visual_forward(tape, params_, config_, batch);
    const Eigen::MatrixXd tokens = token_forward(tape, params_, config_, batch, visual).value();
    for (size_t i = begin; i < end; ++i) {
      RefinedTrajectory& r = out[i];
      r.mode = config_.refiner.mode;
      for (int k = 0; k < n; ++k) r.tokens.push_back(tokens.row(static_cast<Eigen::Index>((i - begin) * n + k)).transpose());
    }
  });
  return out;
}

void LatteModel::save(const std::filesystem::path& path, const nlohmann::json& extra_meta) const {
  TensorContainer c;
  c.meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  c.meta["kind"] = "latte_model";
  c.meta["architecture"] = config_.to_json();
  params_.write_to(c);
  c.save(path);
}

LatteModel LatteModel::load(const std::filesystem::path& path, nlohmann::json* meta) {
  const TensorContainer c = TensorContainer::load(path);
  if (c.meta.value("kind", "") != "latte_model") {
    throw IncompatibleCheckpoint(path.string() + " is not a model checkpoint");
  }
  ModelConfig config;
  try {
    config = ModelConfig::from_json(c.meta.at("architecture"));
  } catch (const nlohmann::json::exception& e) {
    throw IncompatibleCheckpoint(path.string() + ": unreadable architecture (" + e.what() + ")");
  } catch (const InvalidArgument& e) {
    throw IncompatibleCheckpoint(path.string() + ": " + e.what());
  }
  // Adapter weights come from this checkpoint, not from the adapter source.
  const std::string kind = config.backbone.kind;
  config.backbone.kind = "toy";
  LatteModel model(config);
  model.config_.backbone.kind = kind;
  model.params_.read_from(c);
  model.apply_trainable();
  if (meta != nullptr) *meta = c.meta;
  return model;
}

LatteModel LatteModel::load_compatible(const std::filesystem::path& path, const ModelConfig& expected,
                                       nlohmann::json* meta) {
  LatteModel model = load(path, meta);
  ModelConfig want = expected;
  want.normalize();
  nlohmann::json a = model.config().to_json();
  nlohmann::json b = want.to_json();
  // Initialization seed and the frozen flag do not change the architecture.
  for (auto* j : {&a, &b}) {
    j->erase("init_seed");
    (*j)["backbone"].erase("fine_tune");
    (*j)["backbone"].erase("checkpoint");
    (*j)["backbone"].erase("kind");
  }
  if (a != b) {
    throw IncompatibleCheckpoint(path.string() + " was trained with architecture " + a.dump() +
                                 " but the configuration asks for " + b.dump());
  }
  return model;
}

}  // namespace latte
