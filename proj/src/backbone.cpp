#include "latte/backbone.hpp"

#include <map>
#include <mutex>
#include <tuple>

#include "latte/container.hpp"
#include "latte/layers.hpp"

namespace latte {

void BackboneConfig::validate() const {
  if (d <= 0) throw InvalidArgument("backbone.d must be positive");
  if (input_size <= 0 || channels <= 0 || hidden <= 0 || patch <= 0) {
    throw InvalidArgument("backbone sizes must be positive");
  }
  if (input_size % patch != 0) throw InvalidArgument("backbone.input_size must be a multiple of backbone.patch");
  if (kind != "toy" && kind != "adapter:container") throw InvalidArgument("unknown backbone.kind '" + kind + "'");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"kind", kind},     {"d", d},         {"fine_tune", fine_tune}, {"input_size", input_size},
          {"channels", channels}, {"hidden", hidden}, {"patch", patch},         {"checkpoint", checkpoint}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.kind = j.value("kind", c.kind);
  c.d = j.value("d", c.d);
  c.fine_tune = j.value("fine_tune", c.fine_tune);
  c.input_size = j.value("input_size", c.input_size);
  c.channels = j.value("channels", c.channels);
  c.hidden = j.value("hidden", c.hidden);
  c.patch = j.value("patch", c.patch);
  c.checkpoint = j.value("checkpoint", c.checkpoint);
  return c;
}

void add_backbone_params(ParameterSet& ps, const BackboneConfig& config, Rng& rng) {
  config.validate();
  nn::add_linear(ps, "backbone.conv", 9 * config.channels, config.hidden, rng);
  nn::add_linear(ps, "backbone.patch", config.patch * config.patch * config.hidden, config.d, rng);
  nn::add_layer_norm(ps, "backbone.norm", config.d);
  nn::add_linear(ps, "backbone.global", config.d, config.d, rng, /*bias=*/false);
  if (config.kind == "toy") return;

  const std::string adapter = config.kind.substr(8);
  if (adapter != "container") throw InvalidArgument("no backbone adapter named '" + adapter + "'");
  if (config.checkpoint.empty() || !std::filesystem::exists(config.checkpoint)) {
    throw IoError("backbone checkpoint '" + config.checkpoint + "' not found");
  }
  const TensorContainer c = TensorContainer::load(config.checkpoint);
  for (auto& [name, p] : ps.entries()) {
    if (name.rfind("backbone.", 0) != 0) continue;
    const auto it = c.tensors.find("param:" + name);
    if (it == c.tensors.end()) throw IncompatibleCheckpoint("backbone checkpoint lacks " + name);
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw IncompatibleCheckpoint("backbone checkpoint shape mismatch for " + name);
    }
    p.value = it->second;
  }
}

Eigen::MatrixXd image_rows(std::span<const Image> images, const BackboneConfig& config) {
  const int s = config.input_size;
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(images.size()) * s * s, config.channels);
  for (size_t b = 0; b < images.size(); ++b) {
    const Image& im = images[b];
    if (im.height != s || im.width != s || im.channels != config.channels) {
      throw InvalidArgument("backbone expects " + std::to_string(config.channels) + "x" + std::to_string(s) + "x" +
                            std::to_string(s) + " input, got " + std::to_string(im.channels) + "x" +
                            std::to_string(im.height) + "x" + std::to_string(im.width));
    }
    const Eigen::Index base = static_cast<Eigen::Index>(b) * s * s;
    for (int c = 0; c < config.channels; ++c)
      for (Eigen::Index p = 0; p < im.pixels(); ++p) rows(base + p, c) = im.data[c * im.pixels() + p];
  }
  return rows;
}

namespace {

template <typename Key, typename Build>
const Eigen::MatrixXi& cached(std::map<Key, Eigen::MatrixXi>& cache, const Key& key, Build build) {
  static std::mutex mutex;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, build()).first;
  return it->second;  // std::map nodes are stable
}

}  // namespace

const Eigen::MatrixXi& conv3x3_table(int batch, int size) {
  static std::map<std::pair<int, int>, Eigen::MatrixXi> cache;
  return cached(cache, std::pair{batch, size}, [&] {
    Eigen::MatrixXi t(Eigen::Index{batch} * size * size, 9);
    for (int b = 0; b < batch; ++b)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const Eigen::Index row = (Eigen::Index{b} * size + y) * size + x;
          int k = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx, ++k) {
              const int yy = y + dy;
              const int xx = x + dx;
              t(row, k) = (yy < 0 || yy >= size || xx < 0 || xx >= size)
                              ? -1
                              : static_cast<int>((Eigen::Index{b} * size + yy) * size + xx);
            }
        }
    return t;
  });
}

const Eigen::MatrixXi& patch_table(int batch, int size, int patch) {
  static std::map<std::tuple<int, int, int>, Eigen::MatrixXi> cache;
  return cached(cache, std::tuple{batch, size, patch}, [&] {
    const int g = size / patch;
    Eigen::MatrixXi t(Eigen::Index{batch} * g * g, patch * patch);
    for (int b = 0; b < batch; ++b)
      for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
          const Eigen::Index row = (Eigen::Index{b} * g + gy) * g + gx;
          for (int py = 0; py < patch; ++py)
            for (int px = 0; px < patch; ++px) {
              t(row, py * patch + px) =
                  static_cast<int>((Eigen::Index{b} * size + gy * patch + py) * size + gx * patch + px);
            }
        }
    return t;
  });
}

template <typename Params>
BackboneOutput backbone_forward(ad::Tape& tape, Params& ps, const BackboneConfig& config, ad::Var pixels, int batch) {
  const int s = config.input_size;
  if (pixels.rows() != Eigen::Index{batch} * s * s || pixels.cols() != config.channels) {
    throw InvalidArgument("backbone_forward: pixel matrix has wrong shape");
  }
  ad::Var conv = ad::gather_patches(pixels, conv3x3_table(batch, s));
  ad::Var trunk = ad::gelu(nn::linear(tape, ps, "backbone.conv", conv));
  ad::Var cells = ad::gather_patches(trunk, patch_table(batch, s, config.patch));
  ad::Var tokens = nn::layer_norm(tape, ps, "backbone.norm", nn::linear(tape, ps, "backbone.patch", cells));
  ad::Var pooled = ad::group_mean_rows(tokens, config.tokens());
  return {tokens, nn::linear(tape, ps, "backbone.global", pooled)};
}

template BackboneOutput backbone_forward(ad::Tape&, ParameterSet&, const BackboneConfig&, ad::Var, int);
template BackboneOutput backbone_forward(ad::Tape&, const ParameterSet&, const BackboneConfig&, ad::Var, int);

VisualFeatures encode_image(const Image& image, const BackboneConfig& config, const ParameterSet& ps) {
  ad::Tape tape(false);
  ad::Var pixels = tape.constant(image_rows(std::span(&image, 1), config));
  const BackboneOutput out = backbone_forward(tape, ps, config, pixels, 1);
  VisualFeatures f{out.patch_tokens.value(), out.global_token.value().row(0).transpose()};
  if (!f.patch_tokens.allFinite() || !f.global_token.allFinite()) throw NumericalError("non-finite visual features");
  return f;
}

void set_backbone_trainable(ParameterSet& ps, bool fine_tune) { ps.set_trainable("backbone.", fine_tune); }

}  // namespace latte
