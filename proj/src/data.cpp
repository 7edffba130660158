#include "latte/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "latte/backend.hpp"
#include "latte/error.hpp"
#include "latte/image_io.hpp"

namespace latte {

namespace fs = std::filesystem;

// ---- manifest ----------------------------------------------------------------

std::vector<DatasetRecord> DatasetManifest::select(const std::string& split,
                                                    const std::vector<std::string>& sources) const {
  std::vector<DatasetRecord> out;
  for (const auto& r : records) {
    if (!split.empty() && r.split != split) continue;
    if (!sources.empty() && std::find(sources.begin(), sources.end(), r.source) == sources.end()) continue;
    out.push_back(r);
  }
  return out;
}

std::vector<std::string> DatasetManifest::sources() const {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.source);
  return {s.begin(), s.end()};
}

std::string DatasetManifest::to_jsonl() const {
  std::ostringstream os;
  os << nlohmann::json{{"root", root.generic_string()}}.dump() << '\n';
  for (const auto& r : records) {
    os << nlohmann::json{{"path", r.path}, {"label", r.label}, {"source", r.source}, {"split", r.split}}.dump()
       << '\n';
  }
  return os.str();
}

DatasetManifest DatasetManifest::from_jsonl(const std::string& text, const fs::path& default_root) {
  DatasetManifest m;
  m.root = default_root;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (first && j.contains("root") && !j.contains("path")) {
      const fs::path r = j.at("root").get<std::string>();
      m.root = r.is_absolute() ? r : default_root / r;
      first = false;
      continue;
    }
    first = false;
    DatasetRecord rec;
    rec.path = j.at("path").get<std::string>();
    rec.label = j.at("label").get<int>();
    rec.source = j.value("source", "");
    rec.split = j.value("split", "all");
    if (rec.label != kLabelReal && rec.label != kLabelFake) throw InvalidArgument("manifest label must be 0 or 1");
    if (rec.source.empty()) throw InvalidArgument("manifest record without a source tag: " + rec.path);
    m.records.push_back(std::move(rec));
  }
  return m;
}

void DatasetManifest::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << to_jsonl();
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return from_jsonl(ss.str(), path.parent_path());
}

DatasetLayout parse_layout(const std::string& name) {
  if (name == "genimage") return DatasetLayout::kGenImage;
  if (name == "flat") return DatasetLayout::kFlat;
  throw InvalidArgument("unknown dataset layout '" + name + "'");
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".ppm" || ext == ".pgm";
}

void collect(const fs::path& root, const fs::path& dir, int label, const std::string& source, const std::string& split,
             std::vector<DatasetRecord>& out) {
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
    out.push_back({fs::relative(entry.path(), root).generic_string(), label, source, split});
  }
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

DatasetManifest scan_dataset(const fs::path& root, DatasetLayout layout) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  DatasetManifest m;
  m.root = root;
  if (layout == DatasetLayout::kFlat) {
    for (const char* cls : {"real", "fake"}) {
      if (!fs::is_directory(root / cls)) throw InvalidArgument("missing class directory " + (root / cls).string());
    }
    const std::string source = root.filename().empty() ? root.parent_path().filename().string() : root.filename().string();
    collect(root, root / "real", kLabelReal, source, "all", m.records);
    collect(root, root / "fake", kLabelFake, source, "all", m.records);
  } else {
    for (const fs::path& gen : sorted_subdirs(root)) {
      bool any_split = false;
      for (const char* split : {"train", "val", "test"}) {
        const fs::path sdir = gen / split;
        if (!fs::is_directory(sdir)) continue;
        any_split = true;
        for (const char* cls : {"ai", "nature"}) {
          if (!fs::is_directory(sdir / cls)) throw InvalidArgument("missing class directory " + (sdir / cls).string());
        }
        collect(root, sdir / "nature", kLabelReal, gen.filename().string(), split, m.records);
        collect(root, sdir / "ai", kLabelFake, gen.filename().string(), split, m.records);
      }
      if (!any_split) throw InvalidArgument("generator directory without train/val/test splits: " + gen.string());
    }
  }
  if (m.records.empty()) throw InvalidArgument("zero images found under " + root.string());
  std::sort(m.records.begin(), m.records.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return m;
}

// ---- preprocessing -------------------------------------------------------------

Image resize_bilinear(const Image& image, int height, int width) {
  if (height <= 0 || width <= 0) throw InvalidArgument("resize target must be positive");
  if (image.height == height && image.width == width) return image;
  Image out(image.channels, height, width);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < image.channels; ++c) {
        const double top = image.at(c, y0, x0) * (1.0 - wx) + image.at(c, y0, x1) * wx;
        const double bottom = image.at(c, y1, x0) * (1.0 - wx) + image.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1.0 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

Image to_rgb(const Image& image) {
  if (image.channels == 3) return image;
  if (image.channels != 1) throw InvalidArgument("expected a 1- or 3-channel image");
  Image out(3, image.height, image.width);
  for (int c = 0; c < 3; ++c) out.data.segment(Eigen::Index{c} * image.pixels(), image.pixels()) = image.data;
  return out;
}

Image preprocess(const Image& image, const PreprocessConfig& config) {
  Image out = resize_bilinear(to_rgb(image), config.size, config.size);
  if (config.mean.size() != 3 || config.stddev.size() != 3) throw InvalidArgument("preprocess needs RGB mean/stddev");
  for (int c = 0; c < 3; ++c) {
    auto plane = out.data.segment(Eigen::Index{c} * out.pixels(), out.pixels());
    plane = (plane - config.mean[static_cast<size_t>(c)]) / config.stddev[static_cast<size_t>(c)];
  }
  return out;
}

// ---- perturbations -------------------------------------------------------------

PerturbationKind parse_perturbation_kind(const std::string& name) {
  if (name == "jpeg") return PerturbationKind::kJpeg;
  if (name == "crop_resize" || name == "crop") return PerturbationKind::kCropResize;
  if (name == "blur") return PerturbationKind::kBlur;
  if (name == "noise") return PerturbationKind::kNoise;
  throw InvalidArgument("unknown perturbation kind '" + name + "'");
}

std::string to_string(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::kJpeg:
      return "jpeg";
    case PerturbationKind::kCropResize:
      return "crop_resize";
    case PerturbationKind::kBlur:
      return "blur";
    case PerturbationKind::kNoise:
      return "noise";
  }
  return "?";
}

void PerturbationSpec::validate() const {
  switch (kind) {
    case PerturbationKind::kJpeg:
      if (!(strength >= 1.0 && strength <= 100.0)) throw InvalidArgument("jpeg quality outside [1, 100]");
      break;
    case PerturbationKind::kCropResize:
      if (!(strength > 0.0 && strength <= 1.0)) throw InvalidArgument("crop ratio outside (0, 1]");
      break;
    case PerturbationKind::kBlur:
    case PerturbationKind::kNoise:
      if (!(strength >= 0.0) || !std::isfinite(strength)) throw InvalidArgument("sigma must be finite and >= 0");
      break;
  }
}

nlohmann::json PerturbationSpec::to_json() const {
  return {{"kind", to_string(kind)}, {"param", strength}, {"seed", seed}};
}

PerturbationSpec PerturbationSpec::from_json(const nlohmann::json& j) {
  PerturbationSpec s;
  s.kind = parse_perturbation_kind(j.at("kind").get<std::string>());
  s.strength = j.at("param").get<double>();
  s.seed = j.value("seed", std::uint64_t{0});
  s.validate();
  return s;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0)) throw InvalidArgument("gaussian_kernel: sigma must be >= 0");
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

Image gaussian_blur(const Image& image, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  if (k.size() == 1) return image;
  const int r = static_cast<int>(k.size() / 2);
  Image tmp(image.channels, image.height, image.width);
  Image out(image.channels, image.height, image.width);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<size_t>(i + r)] * image.at(c, y, std::clamp(x + i, 0, image.width - 1));
        tmp.at(c, y, x) = acc;
      }
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<size_t>(i + r)] * tmp.at(c, std::clamp(y + i, 0, image.height - 1), x);
        out.at(c, y, x) = acc;
      }
  }
  return out;
}

Image center_crop_resize(const Image& image, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw InvalidArgument("crop ratio outside (0, 1]");
  const int ch = std::max(1, static_cast<int>(std::lround(ratio * image.height)));
  const int cw = std::max(1, static_cast<int>(std::lround(ratio * image.width)));
  if (ch == image.height && cw == image.width) return image;
  const int oy = (image.height - ch) / 2;
  const int ox = (image.width - cw) / 2;
  Image crop(image.channels, ch, cw);
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) crop.at(c, y, x) = image.at(c, oy + y, ox + x);
  return resize_bilinear(crop, image.height, image.width);
}

Image add_gaussian_noise(const Image& image, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw InvalidArgument("noise sigma must be >= 0");
  if (sigma == 0.0) return image;
  Rng rng(seed);
  Image out = image;
  for (Eigen::Index i = 0; i < out.data.size(); ++i) out.data[i] = std::clamp(out.data[i] + sigma * rng.normal(), 0.0, 1.0);
  return out;
}

Image jpeg_roundtrip(const Image& image, int quality) {
  const auto bytes = encode_jpeg(image, quality);
  Image out = decode_jpeg(bytes);
  return image.channels == 3 ? to_rgb(out) : out;
}

Image apply_perturbation(const Image& image, const PerturbationSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case PerturbationKind::kJpeg:
      return jpeg_roundtrip(image, static_cast<int>(std::lround(spec.strength)));
    case PerturbationKind::kCropResize:
      return center_crop_resize(image, spec.strength);
    case PerturbationKind::kBlur:
      return gaussian_blur(image, spec.strength);
    case PerturbationKind::kNoise:
      return add_gaussian_noise(image, spec.strength, spec.seed);
  }
  throw InvalidArgument("unknown perturbation kind");
}

// ---- procedural data -----------------------------------------------------------

Image procedural_image(int size, Rng& rng) {
  Image img(3, size, size);
  double base[3], tint[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.2, 0.8);
    tint[c] = rng.uniform(-1.0, 1.0);
  }
  const double freq = rng.uniform(0.15, 0.6);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double amp = rng.uniform(0.05, 0.2);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double grain = rng.uniform(0.03, 0.08);
  const double cs = std::cos(angle), sn = std::sin(angle);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double stripe = amp * std::sin(2.0 * std::numbers::pi * freq * (x * cs + y * sn) + phase);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = base[c] + stripe * tint[c] + grain * rng.uniform(-1.0, 1.0);
    }

  const int shapes = rng.uniform_int(1, 3);
  for (int s = 0; s < shapes; ++s) {
    const int kind = rng.uniform_int(0, 2);
    double color[3];
    for (double& v : color) v = rng.uniform(0.0, 1.0);
    const double cx = rng.uniform(0.2, 0.8) * size, cy = rng.uniform(0.2, 0.8) * size;
    const double rad = rng.uniform(0.12, 0.3) * size;
    const double shade = rng.uniform(0.02, 0.06);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        bool inside = false;
        if (kind == 0) {
          inside = dx * dx + dy * dy <= rad * rad;
        } else if (kind == 1) {
          inside = std::abs(dx) <= rad && std::abs(dy) <= 0.7 * rad;
        } else {
          inside = dy <= rad && dy >= -rad && std::abs(dx) <= 0.5 * (dy + rad);
        }
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[c] + shade * rng.uniform(-1.0, 1.0);
      }
  }
  for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data[i] = std::clamp(img.data[i], 0.0, 1.0);
  return quantize8(img);
}

namespace {
std::string split_for(int index, int per_class, double train_fraction, double val_fraction) {
  const int n_train = static_cast<int>(std::lround(per_class * train_fraction));
  const int n_val = static_cast<int>(std::lround(per_class * val_fraction));
  if (index < n_train) return "train";
  if (index < n_train + n_val) return "val";
  return "test";
}

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  return std::string(static_cast<size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}
}  // namespace

std::vector<LabeledImage> synth_toy_dataset(const SynthSpec& spec, const ToyBackend* backend) {
  if (spec.count <= 0 || spec.count % 2 != 0) throw InvalidArgument("synth count must be positive and even");
  if (backend == nullptr) throw InvalidArgument("synth_toy_dataset needs a backend to produce fakes");
  if (backend->image_size() != spec.image_size) throw InvalidArgument("backend image size differs from synth image_size");
  const int per_class = spec.count / 2;
  std::vector<LabeledImage> out;
  out.reserve(static_cast<size_t>(spec.count));
  for (int i = 0; i < per_class; ++i) {
    Rng rng(derive_seed(spec.seed, "synth.real", static_cast<std::uint64_t>(i)));
    const std::string split = split_for(i, per_class, spec.train_fraction, spec.val_fraction);
    out.push_back({spec.source + "/" + split + "/nature/" + zero_pad(i, 5), kLabelReal, spec.source, split,
                   procedural_image(spec.image_size, rng)});
  }
  std::vector<Image> fakes =
      sample_toy_fakes(*backend, per_class, spec.sample_steps, derive_seed(spec.seed, "synth.fake", 0));
  for (int i = 0; i < per_class; ++i) {
    const std::string split = split_for(i, per_class, spec.train_fraction, spec.val_fraction);
    out.push_back({spec.source + "/" + split + "/ai/" + zero_pad(i, 5), kLabelFake, spec.source, split,
                   quantize8(fakes[static_cast<size_t>(i)])});
  }
  return out;
}

DatasetManifest write_dataset(const std::vector<LabeledImage>& images, const fs::path& root) {
  DatasetManifest m;
  m.root = ".";
  for (const auto& item : images) {
    const std::string rel = item.id + ".png";
    write_png(root / rel, item.image);
    m.records.push_back({rel, item.label, item.source, item.split});
  }
  std::sort(m.records.begin(), m.records.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  m.save(root / "manifest.jsonl");
  m.root = root;
  return m;
}

}  // namespace latte
