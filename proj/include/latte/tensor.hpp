#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>

#include "latte/error.hpp"

namespace latte {

struct LatentShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  [[nodiscard]] Eigen::Index size() const {
    return static_cast<Eigen::Index>(channels) * height * width;
  }
  [[nodiscard]] bool valid() const { return channels > 0 && height > 0 && width > 0; }
  friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

std::string to_string(const LatentShape& shape);

/// Dense (C, H, W) tensor stored channel-major in a flat vector.
template <typename Scalar>
struct BasicLatent {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  LatentShape shape;
  Vector data;

  BasicLatent() = default;
  explicit BasicLatent(LatentShape s) : shape(s), data(Vector::Zero(s.size())) {}
  BasicLatent(LatentShape s, Vector values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size()) {
      throw InvalidArgument("latent data size " + std::to_string(data.size()) +
                            " does not match shape " + to_string(shape));
    }
  }

  Scalar& at(int c, int y, int x) {
    return data[(static_cast<Eigen::Index>(c) * shape.height + y) * shape.width + x];
  }
  Scalar at(int c, int y, int x) const {
    return data[(static_cast<Eigen::Index>(c) * shape.height + y) * shape.width + x];
  }

  [[nodiscard]] bool all_finite() const { return data.allFinite(); }
};

using LatentTensor = BasicLatent<double>;

/// RGB (or grayscale) image, planar CHW layout, values nominally in [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  Eigen::ArrayXd data;

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(Eigen::ArrayXd::Constant(Eigen::Index{c} * h * w, fill)) {}

  double& at(int c, int y, int x) {
    return data[(static_cast<Eigen::Index>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<Eigen::Index>(c) * height + y) * width + x];
  }
  [[nodiscard]] Eigen::Index pixels() const { return Eigen::Index{height} * width; }
  [[nodiscard]] bool same_geometry(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

}  // namespace latte
