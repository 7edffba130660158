#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace latte {

/// Named float64 matrices plus a JSON manifest, in one binary file.
///
/// Layout: 8-byte magic "LATTETC1", little-endian u64 manifest length, the
/// manifest JSON, then the tensor payload (row-major doubles). The manifest
/// holds {"meta": ..., "tensors": [{name, shape, offset, dtype}]}.
struct TensorContainer {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Eigen::MatrixXd> tensors;

  void save(const std::filesystem::path& path) const;
  static TensorContainer load(const std::filesystem::path& path);

  const Eigen::MatrixXd& tensor(const std::string& name) const;
};

}  // namespace latte
