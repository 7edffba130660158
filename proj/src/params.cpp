#include "latte/params.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

#include "latte/error.hpp"

namespace latte {

ad::Parameter& ParameterSet::add(const std::string& name, ad::Matrix init) {
  if (contains(name)) throw InvalidArgument("duplicate parameter '" + name + "'");
  ad::Parameter p;
  p.value = std::move(init);
  p.zero_grad();
  return params_.emplace(name, std::move(p)).first->second;
}

ad::Parameter& ParameterSet::at(const std::string& name) {
  const auto it = params_.find(name);
  if (it == params_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
  return it->second;
}

const ad::Parameter& ParameterSet::at(const std::string& name) const {
  const auto it = params_.find(name);
  if (it == params_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
  return it->second;
}

Eigen::Index ParameterSet::scalar_count() const {
  Eigen::Index n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

void ParameterSet::set_trainable(std::string_view prefix, bool trainable) {
  for (auto& [name, p] : params_) {
    if (std::string_view(name).starts_with(prefix)) p.trainable = trainable;
  }
}

std::vector<std::string> ParameterSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, p] : params_) {
    if (p.trainable) out.push_back(name);
  }
  return out;
}

std::uint64_t ParameterSet::checksum(std::string_view prefix) const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& [name, p] : params_) {
    if (!std::string_view(name).starts_with(prefix)) continue;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      unsigned char bytes[8];
      std::memcpy(bytes, p.value.data() + i, 8);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
      }
    }
  }
  return h;
}

void ParameterSet::write_to(TensorContainer& out, const std::string& section) const {
  for (const auto& [name, p] : params_) out.tensors[section + name] = p.value;
}

void ParameterSet::read_from(const TensorContainer& in, const std::string& section) {
  for (auto& [name, p] : params_) {
    const auto& m = in.tensor(section + name);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw IncompatibleCheckpoint("parameter '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                                   std::to_string(m.cols()) + ", expected " + std::to_string(p.value.rows()) +
                                   "x" + std::to_string(p.value.cols()));
    }
    p.value = m;
  }
}

void AdamW::step(ParameterSet& params, double lr) {
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  for (auto& [name, p] : params.entries()) {
    if (!p.trainable || p.grad.size() == 0) continue;
    auto& st = state_[name];
    if (st.m.size() == 0) {
      st.m = ad::Matrix::Zero(p.value.rows(), p.value.cols());
      st.v = ad::Matrix::Zero(p.value.rows(), p.value.cols());
    }
    st.m = options_.beta1 * st.m + (1.0 - options_.beta1) * p.grad;
    st.v = options_.beta2 * st.v + (1.0 - options_.beta2) * p.grad.cwiseProduct(p.grad);
    if (lr == 0.0) continue;
    p.value *= (1.0 - lr * options_.weight_decay);
    const ad::Matrix m_hat = st.m / bc1;
    const ad::Matrix v_hat = st.v / bc2;
    p.value.array() -= lr * m_hat.array() / (v_hat.array().sqrt() + options_.eps);
  }
}

double cosine_lr(double base_lr, double floor_lr, int epoch, int max_epochs) {
  if (max_epochs <= 0) return base_lr;
  const double progress = std::clamp(static_cast<double>(epoch) / max_epochs, 0.0, 1.0);
  return floor_lr + 0.5 * (base_lr - floor_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace latte
