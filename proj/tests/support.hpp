// Helpers shared by the test binaries: mock backends and a small trained
// toy fixture.
#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "latte/backend.hpp"
#include "latte/data.hpp"
#include "latte/model.hpp"
#include "latte/pipeline.hpp"

namespace latte::test {

/// encode() ignores the image and returns a fixed latent z0; predict_noise()
/// inverts forward_noise against that z0, so it returns exactly the eps that
/// produced z_t.
class OracleBackend : public DenoiserBackend {
 public:
  explicit OracleBackend(LatentShape shape = {2, 3, 3}, NoiseSchedule schedule = default_schedule())
      : shape_(shape), schedule_(std::move(schedule)) {
    Rng rng(99);
    z0_ = LatentTensor(shape, rng.normal_vector(shape.size()));
  }
  LatentShape latent_shape() const override { return shape_; }
  const NoiseSchedule& schedule() const override { return schedule_; }
  int image_size() const override { return 8; }
  LatentTensor encode(const Image&) const override { return z0_; }
  LatentTensor predict_noise(const LatentTensor& z_t, int t) const override {
    ++calls_;
    const double ab = schedule_.alpha_bar(t);
    LatentTensor eps(shape_);
    eps.data = (z_t.data - std::sqrt(ab) * z0_.data) / std::sqrt(1.0 - ab);
    return eps;
  }
  std::string fingerprint() const override { return "oracle"; }

  const LatentTensor& z0() const { return z0_; }
  int calls() const { return calls_; }

 private:
  LatentShape shape_;
  NoiseSchedule schedule_;
  LatentTensor z0_;
  mutable std::atomic<int> calls_{0};
};

/// Deterministic, thread-safe backend with a nonlinear noise predictor;
/// optionally fails at one timestep or returns NaN for marked images.
class MockBackend : public DenoiserBackend {
 public:
  explicit MockBackend(LatentShape shape = {2, 4, 4}, NoiseSchedule schedule = default_schedule())
      : shape_(shape), schedule_(std::move(schedule)) {}
  LatentShape latent_shape() const override { return shape_; }
  const NoiseSchedule& schedule() const override { return schedule_; }
  int image_size() const override { return 8; }
  LatentTensor encode(const Image& image) const override {
    if (image.height != 8 || image.width != 8 || image.channels != 3) throw InvalidArgument("mock expects 3x8x8");
    LatentTensor z(shape_);
    for (Eigen::Index i = 0; i < z.data.size(); ++i) {
      z.data[i] = image.data[(i * 7) % image.data.size()] * 2.0 - 1.0 + 0.1 * std::sin(static_cast<double>(i));
    }
    return z;
  }
  LatentTensor predict_noise(const LatentTensor& z_t, int t) const override {
    ++calls_;
    if (t == fail_at_) throw Error("mock backend failure");
    LatentTensor out(shape_);
    out.data = (z_t.data.array() * (1.0 + 1e-3 * t)).tanh().matrix();
    if (nan_when_mean_above_ && z_t.data.mean() > *nan_when_mean_above_) out.data[0] = std::nan("");
    return out;
  }
  std::string fingerprint() const override { return "mock"; }

  int fail_at_ = -1;
  std::optional<double> nan_when_mean_above_;
  int calls() const { return calls_; }
  void reset_calls() { calls_ = 0; }

 private:
  LatentShape shape_;
  NoiseSchedule schedule_;
  mutable std::atomic<int> calls_{0};
};

inline Image random_image(int size, std::uint64_t seed, int channels = 3) {
  Rng rng(seed);
  Image img(channels, size, size);
  for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data[i] = rng.uniform();
  return img;
}

inline std::vector<Image> procedural_set(int count, std::uint64_t seed, int size = 32) {
  std::vector<Image> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "test.procedural", static_cast<std::uint64_t>(i)));
    out.push_back(procedural_image(size, rng));
  }
  return out;
}

/// Small spec that trains in a few seconds.
inline ToyBackendSpec quick_spec(std::uint64_t seed = 1) {
  ToyBackendSpec s;
  s.ae_epochs = 25;
  s.epochs = 20;
  s.width = 128;
  s.seed = seed;
  return s;
}

/// A trained toy backend plus a balanced synthetic set, built once per binary.
struct ToyFixture {
  std::shared_ptr<ToyBackend> backend;
  ToyTrainingReport report;
  std::vector<LabeledImage> data;
};

inline const ToyFixture& toy_fixture() {
  static const ToyFixture fixture = [] {
    ToyFixture f;
    const auto images = procedural_set(300, 11);
    TrainedToyBackend t = train_toy_backend(quick_spec(), images);
    f.backend = t.backend;
    f.report = t.report;
    SynthSpec spec;
    spec.count = 160;
    spec.seed = 5;
    spec.sample_steps = 20;
    f.data = synth_toy_dataset(spec, f.backend.get());
    return f;
  }();
  return fixture;
}

inline std::vector<LabeledImage> split_of(const std::vector<LabeledImage>& all, const std::string& split) {
  std::vector<LabeledImage> out;
  for (const auto& x : all) {
    if (x.split == split) out.push_back(x);
  }
  return out;
}

/// Desk-sized detector over the fixture's 32x32 images.
inline ModelConfig small_model_config(int d = 16, int n = 5) {
  ModelConfig c;
  c.backbone.d = d;
  c.backbone.input_size = 32;
  c.refiner.L = 1;
  c.refiner.h = 4;
  c.refiner.n = n;
  c.refiner.latent_size = 4 * 8 * 8;
  c.init_seed = 3;
  c.normalize();
  return c;
}

inline FeatureSpec fixture_feature_spec(int n = 5, std::uint64_t seed = 0) {
  FeatureSpec spec;
  spec.backend = toy_fixture().backend.get();
  spec.plan = select_timesteps(n);
  spec.preprocess = PreprocessConfig{32, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};
  spec.seed = seed;
  return spec;
}

/// Featurized fixture split, computed once per (split, n).
inline const std::vector<Example>& fixture_examples(const std::string& split, int n = 5) {
  static std::map<std::pair<std::string, int>, std::vector<Example>> cache;
  static std::mutex mu;
  std::lock_guard lock(mu);
  auto& slot = cache[{split, n}];
  if (slot.empty()) {
    const auto images = split_of(toy_fixture().data, split);
    slot = make_examples(images, fixture_feature_spec(n), 4).examples;
  }
  return slot;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("latte_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace latte::test
