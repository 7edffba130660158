#include "latte/config.hpp"

#include <fstream>
#include <sstream>

namespace latte {

nlohmann::json default_config() {
  return nlohmann::json::parse(R"({
  "seed": 0,
  "out": "out",
  "workers": 1,
  "backend": {
    "kind": "toy",
    "checkpoint": "",
    "train_images": 800,
    "image_size": 32,
    "latent_channels": 4,
    "latent_size": 8,
    "encoder_hidden": 64,
    "width": 256,
    "depth": 2,
    "time_embedding": 32,
    "ae_epochs": 30,
    "epochs": 40,
    "batch_size": 64,
    "learning_rate": 0.002,
    "patience": 8,
    "holdout_fraction": 0.1,
    "recon_threshold": 0.02,
    "schedule": {"num_steps": 1000, "beta_start": 0.0001, "beta_end": 0.02}
  },
  "backbone": {
    "kind": "toy",
    "checkpoint": "",
    "d": 32,
    "fine_tune": true,
    "input_size": 32,
    "channels": 3,
    "hidden": 16,
    "patch": 4,
    "mean": [0.5, 0.5, 0.5],
    "std": [0.25, 0.25, 0.25]
  },
  "trajectory": {
    "n": 5,
    "steps": [],
    "one_based": false,
    "shared_eps": false,
    "denoise_mode": "cumulative"
  },
  "refiner": {"L": 1, "h": 4, "mode": "separate", "ffn_mult": 4, "literal_sqrt_d": false},
  "aggregate": {"mode": "average", "cls_positional": false, "layers": 2},
  "model": {"components": "D"},
  "train": {
    "batch_size": 32,
    "learning_rate": 0.0001,
    "weight_decay": 0.00004,
    "lr_floor": 0.0,
    "max_epochs": 10,
    "patience": 3,
    "checkpoint": ""
  },
  "data": {
    "manifest": "",
    "root": "",
    "layout": "genimage",
    "split": "",
    "sources": [],
    "train_split": "train",
    "val_split": "val",
    "test_split": "test",
    "failure_tolerance": 0.05,
    "augment": {
      "enabled": false,
      "kind": "jpeg",
      "strength": 75,
      "probability": 0.5
    },
    "synth": {
      "count": 2000,
      "image_size": 32,
      "sample_steps": 50,
      "sources": ["toy"],
      "train_fraction": 0.7,
      "val_fraction": 0.15
    }
  },
  "eval": {
    "checkpoint": "",
    "checkpoints": {},
    "kinds": ["jpeg", "crop", "blur", "noise"],
    "perturbations": {
      "jpeg": [95, 75, 50, 30],
      "crop": [1.0, 0.9, 0.75, 0.5],
      "blur": [0.0, 0.5, 1.0, 2.0],
      "noise": [0.0, 0.02, 0.05, 0.1]
    }
  },
  "analysis": {
    "heatmap_source": "latent"
  }
})");
}

namespace {

bool compatible(const nlohmann::json& want, const nlohmann::json& got) {
  if (want.is_number()) return got.is_number();
  if (want.is_boolean()) return got.is_boolean();
  if (want.is_string()) return got.is_string();
  if (want.is_array()) return got.is_array();
  if (want.is_object()) return got.is_object();
  return true;
}

std::string type_name(const nlohmann::json& j) { return j.type_name(); }

// Maps whose default is {} take arbitrary keys, even after an earlier layer filled them.
bool open_map(const std::string& where) {
  if (where.empty() || where.find_first_of("~/") != std::string::npos) return false;
  static const nlohmann::json defaults = default_config();
  std::string ptr = "/" + where;
  for (auto& c : ptr) c = c == '.' ? '/' : c;
  const nlohmann::json::json_pointer jp(ptr);
  if (!defaults.contains(jp)) return false;
  const auto& d = defaults.at(jp);
  return d.is_object() && d.empty();
}

}  // namespace

void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config" + (where.empty() ? "" : " at " + where) + " must be an object");
  const bool open = open_map(where);
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!open && !base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (open) {
      base[key] = value;
      continue;
    }
    nlohmann::json& slot = base[key];
    if (!compatible(slot, value)) {
      throw ConfigError("config key '" + path + "' expects " + type_name(slot) + ", got " + type_name(value));
    }
    if (slot.is_object()) {
      merge_config(slot, value, path);
    } else {
      slot = value;
    }
  }
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects section.key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;

  nlohmann::json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw ConfigError("malformed config key '" + key + "'");
    parts.push_back(part);
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  merge_config(config, patch);
}

nlohmann::json resolve_config(const std::vector<std::filesystem::path>& files, const std::vector<std::string>& overrides) {
  nlohmann::json config = default_config();
  for (const auto& file : files) {
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot read config file " + file.string());
    nlohmann::json layer;
    try {
      layer = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(file.string() + ": " + e.what());
    }
    merge_config(config, layer);
  }
  for (const auto& o : overrides) apply_override(config, o);
  return config;
}

template <typename Fn>
auto typed(const char* section, Fn fn) {
  try {
    return fn();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(section) + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string(section) + ": " + e.what());
  }
}

ToyBackendSpec backend_spec(const nlohmann::json& config) {
  return typed("backend", [&] {
    nlohmann::json j = config.at("backend");
    j["seed"] = derive_seed(config.at("seed").get<std::uint64_t>(), "backend", 0);
    return ToyBackendSpec::from_json(j);
  });
}

ModelConfig model_config(const nlohmann::json& config) {
  return typed("model", [&] {
    ModelConfig m;
    m.backbone = BackboneConfig::from_json(config.at("backbone"));
    m.refiner = RefinerConfig::from_json(config.at("refiner"));
    m.aggregate = AggregationConfig::from_json(config.at("aggregate"));
    m.components = Components::from_name(config.at("model").at("components").get<std::string>());
    const TrajectoryConfig t = trajectory_config(config);
    m.refiner.n = t.steps.empty() ? t.n : static_cast<int>(t.steps.size());
    const auto& b = config.at("backend");
    const int c = b.at("latent_channels").get<int>();
    const int s = b.at("latent_size").get<int>();
    m.refiner.latent_size = c * s * s;
    m.init_seed = derive_seed(config.at("seed").get<std::uint64_t>(), "model", 0);
    m.normalize();
    m.validate();
    return m;
  });
}

TrajectoryConfig trajectory_config(const nlohmann::json& config) {
  return typed("trajectory", [&] { return TrajectoryConfig::from_json(config.at("trajectory")); });
}

TrainConfig train_config(const nlohmann::json& config) {
  return typed("train", [&] {
    TrainConfig t = TrainConfig::from_json(config.at("train"));
    t.seed = derive_seed(config.at("seed").get<std::uint64_t>(), "train", 0);
    t.validate();
    return t;
  });
}

PreprocessConfig preprocess_config(const nlohmann::json& config) {
  return typed("backbone", [&] {
    const auto& b = config.at("backbone");
    PreprocessConfig p;
    p.size = b.at("input_size").get<int>();
    p.mean = b.at("mean").get<std::vector<double>>();
    p.stddev = b.at("std").get<std::vector<double>>();
    if (p.mean.size() != 3 || p.stddev.size() != 3) throw InvalidArgument("mean and std need three entries");
    return p;
  });
}

}  // namespace latte
