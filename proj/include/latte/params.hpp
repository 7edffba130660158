#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "latte/autodiff.hpp"
#include "latte/container.hpp"
#include "latte/random.hpp"

namespace latte {

/// Ordered, named collection of trainable tensors. Names are dotted paths
/// ("refiner.stack0.layer0.attn.q.weight"); the leading segment is the
/// owning component.
class ParameterSet {
 public:
  ad::Parameter& add(const std::string& name, ad::Matrix init);
  [[nodiscard]] ad::Parameter& at(const std::string& name);
  [[nodiscard]] const ad::Parameter& at(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const { return params_.count(name) != 0; }

  [[nodiscard]] std::map<std::string, ad::Parameter>& entries() { return params_; }
  [[nodiscard]] const std::map<std::string, ad::Parameter>& entries() const { return params_; }
  [[nodiscard]] size_t size() const { return params_.size(); }
  [[nodiscard]] Eigen::Index scalar_count() const;

  void zero_grad();
  /// Sets the trainable flag on every parameter whose name starts with prefix.
  void set_trainable(std::string_view prefix, bool trainable);
  [[nodiscard]] std::vector<std::string> trainable_names() const;

  /// FNV-1a over the raw bytes of every parameter under prefix.
  [[nodiscard]] std::uint64_t checksum(std::string_view prefix = "") const;

  void write_to(TensorContainer& out, const std::string& section = "param:") const;
  /// Replaces values from a container; every parameter must be present with
  /// matching shape.
  void read_from(const TensorContainer& in, const std::string& section = "param:");

 private:
  std::map<std::string, ad::Parameter> params_;
};

/// Decoupled weight decay Adam.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 4e-5;
  };

  AdamW() = default;
  explicit AdamW(Options options) : options_(options) {}

  /// Updates every trainable parameter that holds a gradient.
  void step(ParameterSet& params, double lr);
  [[nodiscard]] long steps_taken() const { return step_; }

 private:
  struct Moments {
    ad::Matrix m;
    ad::Matrix v;
  };
  Options options_;
  long step_ = 0;
  std::map<std::string, Moments> state_;
};

/// Cosine-annealed learning rate for `epoch` in [0, max_epochs].
double cosine_lr(double base_lr, double floor_lr, int epoch, int max_epochs);

}  // namespace latte
