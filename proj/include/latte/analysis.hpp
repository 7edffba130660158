#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "latte/model.hpp"
#include "latte/trajectory.hpp"

namespace latte {

/// One (latent height x width) map per consecutive pair of plan steps.
struct CorrectionHeatmap {
  std::vector<Eigen::MatrixXd> maps;
  std::vector<std::string> intervals;  // "981->741"
  size_t samples = 0;

  /// Spatial mean of each map.
  [[nodiscard]] Eigen::VectorXd interval_means() const;
  /// Population variance of interval_means().
  [[nodiscard]] double interval_variance() const;
  [[nodiscard]] nlohmann::json summary() const;
  void save(const std::filesystem::path& path) const;
  static CorrectionHeatmap load(const std::filesystem::path& path);
};

/// H_k(y, x) = mean over samples of the L2 norm over channels of
/// z_k(:, y, x) - z_{k-1}(:, y, x).
CorrectionHeatmap delta_heatmaps(std::span<const Trajectory> trajectories);

/// Same statistic on refined tokens: one 1x1 map per interval holding the
/// mean L2 norm of the token change.
CorrectionHeatmap token_delta_heatmaps(std::span<const RefinedTrajectory> tokens, const TimestepPlan& plan);

/// Grayscale rendering of every map side by side, scaled by the global max
/// and enlarged by `zoom`.
Image render_heatmap(const CorrectionHeatmap& heatmap, int zoom = 8);

struct EmbeddingRow {
  std::string id;
  int label = 0;
  std::string source;
  Eigen::VectorXd embedding;
};

struct EmbeddingTable {
  std::vector<EmbeddingRow> rows;

  [[nodiscard]] Eigen::Index width() const { return rows.empty() ? 0 : rows.front().embedding.size(); }
  /// Header id,label,source,e_0,...; values printed with round-trip precision.
  [[nodiscard]] std::string to_csv() const;
  void save_binary(const std::filesystem::path& path) const;
  static EmbeddingTable load_binary(const std::filesystem::path& path);
};

/// Fused embedding z per example. Repeated ids get a "#k" suffix so ids stay
/// unique; the vectors themselves are untouched.
EmbeddingTable export_embeddings(const LatteModel& model, std::span<const Example> examples, int workers = 1);

struct DistanceStats {
  double intra = 0.0;  // mean distance between same-label pairs
  double inter = 0.0;  // mean distance between different-label pairs
};
DistanceStats embedding_distances(const EmbeddingTable& table);

}  // namespace latte
