#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "latte/backend.hpp"
#include "latte/data.hpp"
#include "latte/model.hpp"
#include "latte/pipeline.hpp"
#include "latte/train_eval.hpp"

namespace latte {

/// Bad or unresolvable configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Default configuration tree: a desk-scale toy profile. Every key a user may
/// set appears here; maps whose default is {} accept arbitrary keys.
nlohmann::json default_config();

/// Overlays `patch` onto `base`. Unknown keys and type changes throw
/// ConfigError naming the dotted path.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

/// "section.key=value"; the value is parsed as JSON and falls back to a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// defaults <- each config file in order <- overrides.
nlohmann::json resolve_config(const std::vector<std::filesystem::path>& files,
                              const std::vector<std::string>& overrides);

// Typed views of a resolved configuration.
ToyBackendSpec backend_spec(const nlohmann::json& config);
ModelConfig model_config(const nlohmann::json& config);
TrajectoryConfig trajectory_config(const nlohmann::json& config);
TrainConfig train_config(const nlohmann::json& config);
PreprocessConfig preprocess_config(const nlohmann::json& config);

}  // namespace latte
