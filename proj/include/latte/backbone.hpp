#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <span>
#include <string>

#include "latte/autodiff.hpp"
#include "latte/params.hpp"
#include "latte/tensor.hpp"

namespace latte {

/// kind is "toy" or "adapter:<name>". Adapters load their weights from
/// `checkpoint`; the only registered adapter, "adapter:container", reads a
/// toy-architecture trunk from a tensor container.
struct BackboneConfig {
  std::string kind = "toy";
  int d = 512;
  bool fine_tune = true;
  int input_size = 224;
  int channels = 3;
  int hidden = 16;  // conv trunk width
  int patch = 4;    // patch tokens are patch x patch cells of the trunk output
  std::string checkpoint;

  void validate() const;
  [[nodiscard]] int grid() const { return input_size / patch; }
  [[nodiscard]] int tokens() const { return grid() * grid(); }
  [[nodiscard]] nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

struct VisualFeatures {
  Eigen::MatrixXd patch_tokens;  // N x d
  Eigen::VectorXd global_token;  // d
  [[nodiscard]] int d() const { return static_cast<int>(global_token.size()); }
};

/// Registers backbone.* parameters. Adapter kinds overwrite them from the
/// checkpoint and throw IoError when it is missing.
void add_backbone_params(ParameterSet& ps, const BackboneConfig& config, Rng& rng);

/// Images (already at input_size) to one row per pixel, CHW -> (B*H*W x C).
Eigen::MatrixXd image_rows(std::span<const Image> images, const BackboneConfig& config);

struct BackboneOutput {
  ad::Var patch_tokens;  // (B*N x d), image-major
  ad::Var global_token;  // (B x d)
};

/// 3x3 conv (zero padded) -> GELU -> patchify linear -> LayerNorm gives patch
/// tokens; the global token is their mean through a bias-free linear map.
template <typename Params>
BackboneOutput backbone_forward(ad::Tape& tape, Params& ps, const BackboneConfig& config, ad::Var pixels, int batch);

/// Single image, no gradients.
VisualFeatures encode_image(const Image& image, const BackboneConfig& config, const ParameterSet& ps);

/// Freezes (fine_tune = false) or unfreezes every backbone.* parameter.
void set_backbone_trainable(ParameterSet& ps, bool fine_tune);

/// Cached (B*H*W x 9) neighbour table for the 3x3 conv.
const Eigen::MatrixXi& conv3x3_table(int batch, int size);
/// Cached (B*G*G x patch^2) table grouping trunk pixels into patches.
const Eigen::MatrixXi& patch_table(int batch, int size, int patch);

}  // namespace latte
