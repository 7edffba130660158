#include "latte/analysis.hpp"

#include <map>
#include <sstream>

#include "latte/container.hpp"

namespace latte {

Eigen::VectorXd CorrectionHeatmap::interval_means() const {
  Eigen::VectorXd m(static_cast<Eigen::Index>(maps.size()));
  for (size_t k = 0; k < maps.size(); ++k) m[static_cast<Eigen::Index>(k)] = maps[k].mean();
  return m;
}

double CorrectionHeatmap::interval_variance() const {
  const Eigen::VectorXd m = interval_means();
  if (m.size() == 0) return 0.0;
  return (m.array() - m.mean()).square().mean();
}

nlohmann::json CorrectionHeatmap::summary() const {
  const Eigen::VectorXd m = interval_means();
  return {{"intervals", intervals},
          {"interval_means", std::vector<double>(m.data(), m.data() + m.size())},
          {"interval_variance", interval_variance()},
          {"samples", samples}};
}

void CorrectionHeatmap::save(const std::filesystem::path& path) const {
  TensorContainer c;
  c.meta = {{"kind", "heatmap"}, {"intervals", intervals}, {"samples", samples}};
  for (size_t k = 0; k < maps.size(); ++k) c.tensors["map" + std::to_string(k)] = maps[k];
  c.save(path);
}

CorrectionHeatmap CorrectionHeatmap::load(const std::filesystem::path& path) {
  const TensorContainer c = TensorContainer::load(path);
  if (c.meta.value("kind", "") != "heatmap") throw IncompatibleCheckpoint(path.string() + " is not a heatmap");
  CorrectionHeatmap h;
  h.intervals = c.meta.at("intervals").get<std::vector<std::string>>();
  h.samples = c.meta.at("samples").get<size_t>();
  for (size_t k = 0; k < h.intervals.size(); ++k) h.maps.push_back(c.tensor("map" + std::to_string(k)));
  return h;
}

CorrectionHeatmap delta_heatmaps(std::span<const Trajectory> trajectories) {
  if (trajectories.empty()) throw InvalidArgument("delta_heatmaps: no trajectories");
  const TimestepPlan& plan = trajectories.front().plan;
  if (plan.n() < 2) throw InvalidArgument("delta_heatmaps: plan needs at least two timesteps");
  const LatentShape shape = trajectories.front().latents.front().shape;

  CorrectionHeatmap out;
  out.samples = trajectories.size();
  for (int k = 1; k < plan.n(); ++k) {
    out.intervals.push_back(std::to_string(plan.steps[k - 1]) + "->" + std::to_string(plan.steps[k]));
    out.maps.emplace_back(Eigen::MatrixXd::Zero(shape.height, shape.width));
  }
  const Eigen::Index hw = Eigen::Index{shape.height} * shape.width;
  for (const Trajectory& t : trajectories) {
    if (!(t.plan == plan)) throw InvalidArgument("delta_heatmaps: trajectories use different plans");
    if (static_cast<int>(t.latents.size()) != plan.n()) throw InvalidArgument("delta_heatmaps: truncated trajectory");
    for (int k = 1; k < plan.n(); ++k) {
      if (!(t.latents[k].shape == shape)) throw InvalidArgument("delta_heatmaps: latent shapes differ");
      const Eigen::ArrayXd diff = t.latents[k].data - t.latents[k - 1].data;
      // (hw x C): column c holds channel c.
      const Eigen::Map<const Eigen::ArrayXXd> planes(diff.data(), hw, shape.channels);
      const Eigen::ArrayXd norm = planes.square().rowwise().sum().sqrt();
      out.maps[k - 1] += Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          norm.data(), shape.height, shape.width);
    }
  }
  for (auto& m : out.maps) m /= static_cast<double>(trajectories.size());
  return out;
}

CorrectionHeatmap token_delta_heatmaps(std::span<const RefinedTrajectory> tokens, const TimestepPlan& plan) {
  if (tokens.empty()) throw InvalidArgument("token_delta_heatmaps: no trajectories");
  if (plan.n() < 2) throw InvalidArgument("token_delta_heatmaps: plan needs at least two timesteps");
  CorrectionHeatmap out;
  out.samples = tokens.size();
  for (int k = 1; k < plan.n(); ++k) {
    out.intervals.push_back(std::to_string(plan.steps[k - 1]) + "->" + std::to_string(plan.steps[k]));
    out.maps.emplace_back(Eigen::MatrixXd::Zero(1, 1));
  }
  for (const RefinedTrajectory& t : tokens) {
    if (static_cast<int>(t.tokens.size()) != plan.n()) throw InvalidArgument("token_delta_heatmaps: length mismatch");
    for (int k = 1; k < plan.n(); ++k) out.maps[k - 1](0, 0) += (t.tokens[k] - t.tokens[k - 1]).norm();
  }
  for (auto& m : out.maps) m /= static_cast<double>(tokens.size());
  return out;
}

Image render_heatmap(const CorrectionHeatmap& heatmap, int zoom) {
  if (heatmap.maps.empty()) throw InvalidArgument("render_heatmap: empty heatmap");
  const int h = static_cast<int>(heatmap.maps.front().rows());
  const int w = static_cast<int>(heatmap.maps.front().cols());
  const int gap = 1;
  const int k = static_cast<int>(heatmap.maps.size());
  double peak = 0.0;
  for (const auto& m : heatmap.maps) peak = std::max(peak, m.maxCoeff());
  Image img(1, h * zoom, k * (w * zoom + gap) - gap, 1.0);
  for (int m = 0; m < k; ++m)
    for (int y = 0; y < h * zoom; ++y)
      for (int x = 0; x < w * zoom; ++x) {
        const double v = peak > 0 ? heatmap.maps[m](y / zoom, x / zoom) / peak : 0.0;
        img.at(0, y, m * (w * zoom + gap) + x) = v;
      }
  return img;
}

std::string EmbeddingTable::to_csv() const {
  std::ostringstream os;
  os << "id,label,source";
  for (Eigen::Index j = 0; j < width(); ++j) os << ",e_" << j;
  os << '\n';
  for (const EmbeddingRow& r : rows) {
    os << r.id << ',' << r.label << ',' << r.source;
    for (Eigen::Index j = 0; j < r.embedding.size(); ++j) os << ',' << nlohmann::json(r.embedding[j]).dump();
    os << '\n';
  }
  return os.str();
}

void EmbeddingTable::save_binary(const std::filesystem::path& path) const {
  TensorContainer c;
  nlohmann::json ids = nlohmann::json::array();
  Eigen::MatrixXd values(static_cast<Eigen::Index>(rows.size()), width());
  Eigen::MatrixXd labels(static_cast<Eigen::Index>(rows.size()), 1);
  for (size_t i = 0; i < rows.size(); ++i) {
    ids.push_back({{"id", rows[i].id}, {"source", rows[i].source}});
    values.row(static_cast<Eigen::Index>(i)) = rows[i].embedding.transpose();
    labels(static_cast<Eigen::Index>(i), 0) = rows[i].label;
  }
  c.meta = {{"kind", "embeddings"}, {"rows", ids}};
  c.tensors["embedding"] = values;
  c.tensors["label"] = labels;
  c.save(path);
}

EmbeddingTable EmbeddingTable::load_binary(const std::filesystem::path& path) {
  const TensorContainer c = TensorContainer::load(path);
  if (c.meta.value("kind", "") != "embeddings") throw IncompatibleCheckpoint(path.string() + " is not an embedding table");
  const Eigen::MatrixXd& values = c.tensor("embedding");
  const Eigen::MatrixXd& labels = c.tensor("label");
  EmbeddingTable t;
  const auto& meta_rows = c.meta.at("rows");
  for (size_t i = 0; i < meta_rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    t.rows.push_back({meta_rows[i].at("id").get<std::string>(), static_cast<int>(labels(r, 0)),
                      meta_rows[i].at("source").get<std::string>(), values.row(r).transpose()});
  }
  return t;
}

EmbeddingTable export_embeddings(const LatteModel& model, std::span<const Example> examples, int workers) {
  if (examples.empty()) throw InvalidArgument("export_embeddings: empty manifest");
  const Eigen::MatrixXd z = model.embeddings(examples, workers);
  EmbeddingTable t;
  std::map<std::string, int> seen;
  for (size_t i = 0; i < examples.size(); ++i) {
    const Example& e = examples[i];
    const int k = seen[e.id]++;
    t.rows.push_back(
        {k == 0 ? e.id : e.id + "#" + std::to_string(k), e.label, e.source, z.row(static_cast<Eigen::Index>(i)).transpose()});
  }
  return t;
}

DistanceStats embedding_distances(const EmbeddingTable& table) {
  double intra = 0;
  double inter = 0;
  size_t n_intra = 0;
  size_t n_inter = 0;
  for (size_t i = 0; i < table.rows.size(); ++i)
    for (size_t j = i + 1; j < table.rows.size(); ++j) {
      const double dist = (table.rows[i].embedding - table.rows[j].embedding).norm();
      if (table.rows[i].label == table.rows[j].label) {
        intra += dist;
        ++n_intra;
      } else {
        inter += dist;
        ++n_inter;
      }
    }
  return {n_intra ? intra / static_cast<double>(n_intra) : 0.0, n_inter ? inter / static_cast<double>(n_inter) : 0.0};
}

}  // namespace latte
