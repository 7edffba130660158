#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "latte/random.hpp"
#include "latte/tensor.hpp"

namespace latte {

class ToyBackend;

inline constexpr int kLabelReal = 0;
inline constexpr int kLabelFake = 1;

struct DatasetRecord {
  std::string path;    // relative to the manifest root
  int label = kLabelReal;
  std::string source;  // generator tag
  std::string split;   // train | val | test | all

  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<DatasetRecord> records;

  [[nodiscard]] std::vector<DatasetRecord> select(const std::string& split,
                                                   const std::vector<std::string>& sources = {}) const;
  [[nodiscard]] std::vector<std::string> sources() const;
  [[nodiscard]] std::filesystem::path resolve(const DatasetRecord& r) const { return root / r.path; }

  /// JSON-lines: a header line {"root": ...} followed by one record per line.
  [[nodiscard]] std::string to_jsonl() const;
  static DatasetManifest from_jsonl(const std::string& text, const std::filesystem::path& default_root = {});
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
};

enum class DatasetLayout {
  kGenImage,  // <root>/<generator>/<split>/{ai,nature}/*
  kFlat,      // <root>/{real,fake}/*
};
DatasetLayout parse_layout(const std::string& name);

/// Lists images under root. Records are sorted lexicographically by path.
DatasetManifest scan_dataset(const std::filesystem::path& root, DatasetLayout layout);

struct PreprocessConfig {
  int size = 224;
  std::vector<double> mean{0.0, 0.0, 0.0};
  std::vector<double> stddev{1.0, 1.0, 1.0};
};

/// Bilinear resize with half-pixel centers and edge clamping.
Image resize_bilinear(const Image& image, int height, int width);
/// Resize to config.size (square), then per-channel (x - mean) / stddev.
Image preprocess(const Image& image, const PreprocessConfig& config);
/// Gray images are replicated to three channels.
Image to_rgb(const Image& image);

enum class PerturbationKind { kJpeg, kCropResize, kBlur, kNoise };

struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::kBlur;
  double strength = 0.0;  // quality | crop ratio | blur sigma | noise sigma
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static PerturbationSpec from_json(const nlohmann::json& j);
};

PerturbationKind parse_perturbation_kind(const std::string& name);
std::string to_string(PerturbationKind kind);

/// Normalized 1-D Gaussian with radius ceil(3 sigma); sigma 0 gives [1].
std::vector<double> gaussian_kernel(double sigma);
Image gaussian_blur(const Image& image, double sigma);
Image center_crop_resize(const Image& image, double ratio);
Image add_gaussian_noise(const Image& image, double sigma, std::uint64_t seed);
Image jpeg_roundtrip(const Image& image, int quality);
Image apply_perturbation(const Image& image, const PerturbationSpec& spec);

/// Procedural "real" image: textured background with a few flat shapes.
Image procedural_image(int size, Rng& rng);

struct LabeledImage {
  std::string id;
  int label = kLabelReal;
  std::string source;
  std::string split;
  Image image;
};

struct SynthSpec {
  int count = 200;  // must be even
  int image_size = 32;
  std::uint64_t seed = 0;
  int sample_steps = 50;
  std::string source = "toy";
  double train_fraction = 0.7;
  double val_fraction = 0.15;
};

/// Balanced toy set: count/2 procedural reals and count/2 backend samples.
/// Splits are assigned per class in index order (train, val, then test).
std::vector<LabeledImage> synth_toy_dataset(const SynthSpec& spec, const ToyBackend* backend);

/// Writes images as PNG in the GenImage layout and returns the manifest.
DatasetManifest write_dataset(const std::vector<LabeledImage>& images, const std::filesystem::path& root);

}  // namespace latte
