#include "latte/pipeline.hpp"

#include "latte/image_io.hpp"

namespace latte {

TimestepPlan TrajectoryConfig::plan(int horizon) const {
  if (!steps.empty()) return plan_from_steps(steps, horizon, one_based);
  return select_timesteps(n, horizon);
}

nlohmann::json TrajectoryConfig::to_json() const {
  return {{"n", n},
          {"steps", steps},
          {"one_based", one_based},
          {"shared_eps", shared_eps},
          {"denoise_mode", to_string(mode)}};
}

TrajectoryConfig TrajectoryConfig::from_json(const nlohmann::json& j) {
  TrajectoryConfig c;
  c.n = j.value("n", c.n);
  c.steps = j.value("steps", c.steps);
  c.one_based = j.value("one_based", c.one_based);
  c.shared_eps = j.value("shared_eps", c.shared_eps);
  c.mode = parse_denoise_mode(j.value("denoise_mode", to_string(c.mode)));
  return c;
}

std::uint64_t trajectory_seed(std::uint64_t seed, const std::string& id) {
  return derive_seed(seed, "trajectory", fnv1a(id));
}

Example make_example(const LabeledImage& item, const FeatureSpec& spec) {
  if (spec.backend == nullptr) throw InvalidArgument("make_example: no backend");
  Image rgb = to_rgb(item.image);
  if (spec.perturbation) {
    PerturbationSpec p = *spec.perturbation;
    p.seed = derive_seed(p.seed, fnv1a(item.id));
    rgb = apply_perturbation(rgb, p);
  }
  const int size = spec.backend->image_size();
  const Image for_backend = (rgb.height == size && rgb.width == size) ? rgb : resize_bilinear(rgb, size, size);
  const Trajectory traj =
      extract_trajectory(for_backend, spec.plan, *spec.backend, trajectory_seed(spec.seed, item.id), spec.options);

  Example e;
  e.id = item.id;
  e.label = item.label;
  e.source = item.source;
  e.image = preprocess(rgb, spec.preprocess);
  const Eigen::Index width = spec.backend->latent_shape().size();
  e.latents.resize(traj.plan.n(), width);
  for (int k = 0; k < traj.plan.n(); ++k) e.latents.row(k) = traj.latents[k].data.transpose();
  return e;
}

ExampleSet make_examples(std::span<const LabeledImage> images, const FeatureSpec& spec, int workers) {
  std::vector<std::optional<Example>> slots(images.size());
  std::vector<std::string> errors(images.size());
  parallel_for(images.size(), workers, [&](size_t i) {
    try {
      slots[i] = make_example(images[i], spec);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  ExampleSet out;
  for (size_t i = 0; i < images.size(); ++i) {
    if (slots[i]) {
      out.examples.push_back(std::move(*slots[i]));
    } else {
      out.failures.push_back({i, images[i].id, errors[i]});
    }
  }
  return out;
}

LoadedImages load_images(const DatasetManifest& manifest, std::span<const DatasetRecord> records, int workers) {
  std::vector<std::optional<LabeledImage>> slots(records.size());
  std::vector<std::string> errors(records.size());
  parallel_for(records.size(), workers, [&](size_t i) {
    const DatasetRecord& r = records[i];
    try {
      slots[i] = LabeledImage{r.path, r.label, r.source, r.split, read_image(manifest.resolve(r))};
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  LoadedImages out;
  for (size_t i = 0; i < records.size(); ++i) {
    if (slots[i]) {
      out.images.push_back(std::move(*slots[i]));
    } else {
      out.failures.push_back({i, records[i].path, errors[i]});
    }
  }
  return out;
}

}  // namespace latte
