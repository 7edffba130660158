#include "latte/backend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "latte/layers.hpp"

namespace latte {

namespace {

int patch_factor(const ToyBackendSpec& spec) { return spec.image_size / spec.latent.height; }

template <typename Params>
ad::Var encoder_forward(ad::Tape& tape, Params& ps, ad::Var patches) {
  return nn::linear(tape, ps, "enc.fc2", ad::gelu(nn::linear(tape, ps, "enc.fc1", patches)));
}

template <typename Params>
ad::Var decoder_forward(ad::Tape& tape, Params& ps, ad::Var latent_pixels) {
  return ad::sigmoid(nn::linear(tape, ps, "dec.fc2", ad::gelu(nn::linear(tape, ps, "dec.fc1", latent_pixels))));
}

template <typename Params>
ad::Var denoiser_forward(ad::Tape& tape, Params& ps, int depth, ad::Var input) {
  ad::Var h = ad::gelu(nn::linear(tape, ps, "den.in", input));
  for (int i = 1; i < depth; ++i) {
    h = ad::add(h, ad::gelu(nn::linear(tape, ps, "den.hidden" + std::to_string(i), h)));
  }
  return nn::linear(tape, ps, "den.out", h);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void ToyBackendSpec::validate() const {
  if (image_size <= 0 || !latent.valid()) throw InvalidArgument("toy backend dimensions must be positive");
  if (latent.height != latent.width) throw InvalidArgument("toy backend latent grid must be square");
  if (image_size % latent.height != 0) {
    throw InvalidArgument("image_size must be a multiple of the latent grid size");
  }
  if (encoder_hidden <= 0 || width <= 0 || depth <= 0 || time_embedding <= 0 || time_embedding % 2 != 0) {
    throw InvalidArgument("toy backend widths must be positive (time embedding even)");
  }
  if (ae_epochs < 0 || epochs < 0 || batch_size <= 0 || patience <= 0) {
    throw InvalidArgument("toy backend training settings out of range");
  }
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw InvalidArgument("holdout_fraction outside [0, 1)");
}

nlohmann::json ToyBackendSpec::to_json() const {
  return {{"image_size", image_size},
          {"latent_channels", latent.channels},
          {"latent_size", latent.height},
          {"encoder_hidden", encoder_hidden},
          {"width", width},
          {"depth", depth},
          {"time_embedding", time_embedding},
          {"ae_epochs", ae_epochs},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"patience", patience},
          {"holdout_fraction", holdout_fraction},
          {"recon_threshold", recon_threshold},
          {"seed", seed},
          {"schedule", schedule.to_json()}};
}

ToyBackendSpec ToyBackendSpec::from_json(const nlohmann::json& j) {
  ToyBackendSpec s;
  s.image_size = j.value("image_size", s.image_size);
  const int c = j.value("latent_channels", s.latent.channels);
  const int hw = j.value("latent_size", s.latent.height);
  s.latent = {c, hw, hw};
  s.encoder_hidden = j.value("encoder_hidden", s.encoder_hidden);
  s.width = j.value("width", s.width);
  s.depth = j.value("depth", s.depth);
  s.time_embedding = j.value("time_embedding", s.time_embedding);
  s.ae_epochs = j.value("ae_epochs", s.ae_epochs);
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.patience = j.value("patience", s.patience);
  s.holdout_fraction = j.value("holdout_fraction", s.holdout_fraction);
  s.recon_threshold = j.value("recon_threshold", s.recon_threshold);
  s.seed = j.value("seed", s.seed);
  if (j.contains("schedule")) s.schedule = NoiseSchedule::from_json(j.at("schedule"));
  s.validate();
  return s;
}

// ---- ToyBackend ------------------------------------------------------------

ToyBackend::ToyBackend(ToyBackendSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(derive_seed(spec_.seed, "toy_backend.init", 0));
  init_params(params_, spec_, rng);
  latent_mean_ = Eigen::VectorXd::Zero(spec_.latent.channels);
  latent_std_ = Eigen::VectorXd::Ones(spec_.latent.channels);
}

ToyBackend::ToyBackend(ToyBackendSpec spec, ParameterSet params, Eigen::VectorXd latent_mean,
                       Eigen::VectorXd latent_std)
    : spec_(std::move(spec)), params_(std::move(params)), latent_mean_(std::move(latent_mean)),
      latent_std_(std::move(latent_std)) {
  spec_.validate();
  if (latent_mean_.size() != spec_.latent.channels || latent_std_.size() != spec_.latent.channels) {
    throw InvalidArgument("latent statistics must have one entry per channel");
  }
}

void ToyBackend::init_params(ParameterSet& ps, const ToyBackendSpec& spec, Rng& rng) {
  const int p = patch_factor(spec);
  const int patch_dim = 3 * p * p;
  const int latent_dim = static_cast<int>(spec.latent.size());
  nn::add_linear(ps, "enc.fc1", patch_dim, spec.encoder_hidden, rng);
  nn::add_linear(ps, "enc.fc2", spec.encoder_hidden, spec.latent.channels, rng);
  nn::add_linear(ps, "dec.fc1", spec.latent.channels, spec.encoder_hidden, rng);
  nn::add_linear(ps, "dec.fc2", spec.encoder_hidden, patch_dim, rng);
  nn::add_linear(ps, "den.in", latent_dim + spec.time_embedding, spec.width, rng);
  for (int i = 1; i < spec.depth; ++i) nn::add_linear(ps, "den.hidden" + std::to_string(i), spec.width, spec.width, rng);
  nn::add_linear(ps, "den.out", spec.width, latent_dim, rng);
}

Eigen::MatrixXd ToyBackend::patch_rows(const ToyBackendSpec& spec, std::span<const Image> images) {
  const int p = patch_factor(spec);
  const int g = spec.latent.height;
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(images.size()) * g * g, 3 * p * p);
  for (size_t b = 0; b < images.size(); ++b) {
    const Image& img = images[b];
    if (img.channels != 3 || img.height != spec.image_size || img.width != spec.image_size) {
      throw InvalidArgument("toy backend expects 3x" + std::to_string(spec.image_size) + "x" +
                            std::to_string(spec.image_size) + " images");
    }
    for (int y = 0; y < g; ++y) {
      for (int x = 0; x < g; ++x) {
        const Eigen::Index r = (static_cast<Eigen::Index>(b) * g + y) * g + x;
        int col = 0;
        for (int c = 0; c < 3; ++c)
          for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px) rows(r, col++) = img.at(c, y * p + py, x * p + px);
      }
    }
  }
  return rows;
}

Eigen::MatrixXd ToyBackend::patches_to_latent_rows(const ToyBackendSpec& spec, const Eigen::MatrixXd& per_patch) {
  const Eigen::Index hw = static_cast<Eigen::Index>(spec.latent.height) * spec.latent.width;
  const Eigen::Index batch = per_patch.rows() / hw;
  Eigen::MatrixXd out(batch, spec.latent.size());
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index pix = 0; pix < hw; ++pix)
      for (int c = 0; c < spec.latent.channels; ++c) out(b, c * hw + pix) = per_patch(b * hw + pix, c);
  return out;
}

Eigen::MatrixXd ToyBackend::time_embedding(int dim, std::span<const int> t) {
  Eigen::MatrixXd e(static_cast<Eigen::Index>(t.size()), dim);
  const int half = dim / 2;
  for (size_t i = 0; i < t.size(); ++i) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(k) / half);
      e(static_cast<Eigen::Index>(i), k) = std::sin(t[i] * freq);
      e(static_cast<Eigen::Index>(i), half + k) = std::cos(t[i] * freq);
    }
  }
  return e;
}

Eigen::MatrixXd ToyBackend::encode_rows(std::span<const Image> images) const {
  ad::Tape tape(false);
  const Eigen::MatrixXd raw =
      patches_to_latent_rows(spec_, encoder_forward(tape, params_, tape.constant(patch_rows(spec_, images))).value());
  const Eigen::Index hw = static_cast<Eigen::Index>(spec_.latent.height) * spec_.latent.width;
  Eigen::MatrixXd out = raw;
  for (int c = 0; c < spec_.latent.channels; ++c) {
    out.middleCols(c * hw, hw) = (raw.middleCols(c * hw, hw).array() - latent_mean_[c]) / latent_std_[c];
  }
  return out;
}

LatentTensor ToyBackend::encode(const Image& image) const {
  const Eigen::MatrixXd row = encode_rows(std::span<const Image>(&image, 1));
  return LatentTensor(spec_.latent, row.row(0).transpose());
}

Eigen::MatrixXd ToyBackend::predict_noise_rows(const Eigen::MatrixXd& z_rows, std::span<const int> t) const {
  if (z_rows.cols() != spec_.latent.size() || z_rows.rows() != static_cast<Eigen::Index>(t.size())) {
    throw InvalidArgument("predict_noise_rows: input shape mismatch");
  }
  for (int ti : t) (void)spec_.schedule.alpha_bar(ti);  // range check
  ad::Tape tape(false);
  Eigen::MatrixXd input(z_rows.rows(), z_rows.cols() + spec_.time_embedding);
  input << z_rows, time_embedding(spec_.time_embedding, t);
  return denoiser_forward(tape, params_, spec_.depth, tape.constant(std::move(input))).value();
}

LatentTensor ToyBackend::predict_noise(const LatentTensor& z_t, int t) const {
  if (!(z_t.shape == spec_.latent)) {
    throw InvalidArgument("predict_noise: latent shape " + to_string(z_t.shape) + " expected " +
                          to_string(spec_.latent));
  }
  const int ts[1] = {t};
  const Eigen::MatrixXd out = predict_noise_rows(z_t.data.transpose(), ts);
  return LatentTensor(spec_.latent, out.row(0).transpose());
}

std::vector<Image> ToyBackend::decode_rows(const Eigen::MatrixXd& z_rows) const {
  const Eigen::Index hw = static_cast<Eigen::Index>(spec_.latent.height) * spec_.latent.width;
  const Eigen::Index batch = z_rows.rows();
  Eigen::MatrixXd per_patch(batch * hw, spec_.latent.channels);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index pix = 0; pix < hw; ++pix)
      for (int c = 0; c < spec_.latent.channels; ++c) {
        per_patch(b * hw + pix, c) = z_rows(b, c * hw + pix) * latent_std_[c] + latent_mean_[c];
      }
  ad::Tape tape(false);
  const Eigen::MatrixXd pixels = decoder_forward(tape, params_, tape.constant(std::move(per_patch))).value();
  const int p = patch_factor(spec_);
  const int g = spec_.latent.height;
  std::vector<Image> out;
  out.reserve(static_cast<size_t>(batch));
  for (Eigen::Index b = 0; b < batch; ++b) {
    Image img(3, spec_.image_size, spec_.image_size);
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x) {
        const Eigen::Index r = (b * g + y) * g + x;
        int col = 0;
        for (int c = 0; c < 3; ++c)
          for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px) img.at(c, y * p + py, x * p + px) = pixels(r, col++);
      }
    out.push_back(std::move(img));
  }
  return out;
}

Image ToyBackend::decode(const LatentTensor& z) const {
  if (!(z.shape == spec_.latent)) throw InvalidArgument("decode: latent shape mismatch");
  return decode_rows(z.data.transpose()).front();
}

std::string ToyBackend::fingerprint() const {
  std::uint64_t h = params_.checksum();
  h = derive_seed(h, fnv1a(spec_.to_json().dump()));
  for (int c = 0; c < spec_.latent.channels; ++c) {
    h = derive_seed(h, fnv1a(std::to_string(latent_mean_[c]) + "/" + std::to_string(latent_std_[c])));
  }
  return "toy-" + hex64(h);
}

void ToyBackend::save(const std::filesystem::path& path) const {
  TensorContainer c;
  c.meta = {{"kind", "toy_backend"}, {"spec", spec_.to_json()}, {"fingerprint", fingerprint()}};
  params_.write_to(c);
  c.tensors["latent_mean"] = latent_mean_;
  c.tensors["latent_std"] = latent_std_;
  c.save(path);
}

std::shared_ptr<ToyBackend> ToyBackend::load(const std::filesystem::path& path) {
  const TensorContainer c = TensorContainer::load(path);
  if (c.meta.value("kind", "") != "toy_backend") {
    throw IncompatibleCheckpoint(path.string() + " is not a toy backend checkpoint");
  }
  const ToyBackendSpec spec = ToyBackendSpec::from_json(c.meta.at("spec"));
  ParameterSet ps;
  Rng rng(0);
  init_params(ps, spec, rng);
  ps.read_from(c);
  return std::make_shared<ToyBackend>(spec, std::move(ps), c.tensor("latent_mean").col(0),
                                       c.tensor("latent_std").col(0));
}

// ---- training --------------------------------------------------------------

nlohmann::json ToyTrainingReport::to_json() const {
  return {{"ae_losses", ae_losses},
          {"denoise_losses", denoise_losses},
          {"holdout_denoise_mse", holdout_denoise_mse},
          {"holdout_zero_mse", holdout_zero_mse},
          {"holdout_recon_mse", holdout_recon_mse},
          {"converged", converged},
          {"warnings", warnings}};
}

namespace {

std::vector<int> shuffled(int n, std::uint64_t seed) {
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  return idx;
}

struct NoisyBatch {
  Eigen::MatrixXd input;  // [z_t | time embedding]
  Eigen::MatrixXd eps;
};

NoisyBatch make_noisy_batch(const ToyBackendSpec& spec, const Eigen::MatrixXd& z0, Rng& rng) {
  const Eigen::Index b = z0.rows();
  const Eigen::Index dim = z0.cols();
  std::vector<int> t(static_cast<size_t>(b));
  NoisyBatch out;
  out.eps.resize(b, dim);
  Eigen::MatrixXd zt(b, dim);
  for (Eigen::Index i = 0; i < b; ++i) {
    t[static_cast<size_t>(i)] = rng.uniform_int(0, spec.schedule.num_steps() - 1);
    for (Eigen::Index j = 0; j < dim; ++j) out.eps(i, j) = rng.normal();
    const double ab = spec.schedule.alpha_bar(t[static_cast<size_t>(i)]);
    zt.row(i) = std::sqrt(ab) * z0.row(i) + std::sqrt(1.0 - ab) * out.eps.row(i);
  }
  out.input.resize(b, dim + spec.time_embedding);
  out.input << zt, ToyBackend::time_embedding(spec.time_embedding, t);
  return out;
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& m, std::span<const int> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

}  // namespace

TrainedToyBackend train_toy_backend(const ToyBackendSpec& spec, std::span<const Image> images) {
  spec.validate();
  if (images.empty()) throw InvalidArgument("train_toy_backend: empty dataset");
  ToyTrainingReport report;

  const int n = static_cast<int>(images.size());
  const std::vector<int> order = shuffled(n, derive_seed(spec.seed, "toy_backend.split", 0));
  int n_hold = static_cast<int>(std::floor(n * spec.holdout_fraction));
  if (n - n_hold < 1) n_hold = 0;
  std::vector<Image> train_imgs, hold_imgs;
  for (int i = 0; i < n; ++i) {
    (i < n - n_hold ? train_imgs : hold_imgs).push_back(images[static_cast<size_t>(order[static_cast<size_t>(i)])]);
  }

  ParameterSet ps;
  Rng init_rng(derive_seed(spec.seed, "toy_backend.init", 0));
  ToyBackend::init_params(ps, spec, init_rng);

  // Autoencoder on per-patch rows.
  const Eigen::MatrixXd patches = ToyBackend::patch_rows(spec, train_imgs);
  const int hw = spec.latent.height * spec.latent.width;
  const int n_train = static_cast<int>(train_imgs.size());
  {
    ps.set_trainable("", false);
    ps.set_trainable("enc.", true);
    ps.set_trainable("dec.", true);
    AdamW opt(AdamW::Options{.weight_decay = 0.0});
    for (int epoch = 0; epoch < spec.ae_epochs; ++epoch) {
      const auto idx = shuffled(n_train, derive_seed(spec.seed, "toy_backend.ae_epoch", static_cast<std::uint64_t>(epoch)));
      double total = 0.0;
      int batches = 0;
      const double lr = cosine_lr(spec.learning_rate, 0.1 * spec.learning_rate, epoch, spec.ae_epochs);
      for (int s = 0; s < n_train; s += spec.batch_size) {
        const int e = std::min(n_train, s + spec.batch_size);
        std::vector<int> rows;
        for (int k = s; k < e; ++k)
          for (int pix = 0; pix < hw; ++pix) rows.push_back(idx[static_cast<size_t>(k)] * hw + pix);
        const Eigen::MatrixXd target = gather(patches, rows);
        ps.zero_grad();
        ad::Tape tape;
        ad::Var recon = decoder_forward(tape, ps, encoder_forward(tape, ps, tape.constant(target)));
        ad::Var loss = ad::mse(recon, target);
        tape.backward(loss);
        opt.step(ps, lr);
        total += loss.value()(0, 0);
        ++batches;
      }
      report.ae_losses.push_back(total / std::max(batches, 1));
    }
  }

  // Latent statistics over the training set, then normalized latents.
  ToyBackend staging(spec, ps, Eigen::VectorXd::Zero(spec.latent.channels), Eigen::VectorXd::Ones(spec.latent.channels));
  const Eigen::MatrixXd raw = staging.encode_rows(train_imgs);
  Eigen::VectorXd mean(spec.latent.channels), stddev(spec.latent.channels);
  for (int c = 0; c < spec.latent.channels; ++c) {
    const auto block = raw.middleCols(c * hw, hw).array();
    mean[c] = block.mean();
    stddev[c] = std::sqrt((block - mean[c]).square().mean());
    if (!(stddev[c] > 1e-8)) stddev[c] = 1.0;
  }
  Eigen::MatrixXd z0 = raw;
  for (int c = 0; c < spec.latent.channels; ++c) {
    z0.middleCols(c * hw, hw) = (raw.middleCols(c * hw, hw).array() - mean[c]) / stddev[c];
  }

  // Noise predictor on frozen latents.
  {
    ps.set_trainable("", false);
    ps.set_trainable("den.", true);
    AdamW opt(AdamW::Options{.weight_decay = 0.0});
    double best = std::numeric_limits<double>::infinity();
    int since_best = 0;
    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
      const auto idx = shuffled(n_train, derive_seed(spec.seed, "toy_backend.den_epoch", static_cast<std::uint64_t>(epoch)));
      Rng noise_rng(derive_seed(spec.seed, "toy_backend.den_noise", static_cast<std::uint64_t>(epoch)));
      const double lr = cosine_lr(spec.learning_rate, 0.1 * spec.learning_rate, epoch, spec.epochs);
      double total = 0.0;
      int batches = 0;
      for (int s = 0; s < n_train; s += spec.batch_size) {
        const int e = std::min(n_train, s + spec.batch_size);
        const NoisyBatch nb = make_noisy_batch(spec, gather(z0, std::span<const int>(idx).subspan(
                                                                   static_cast<size_t>(s), static_cast<size_t>(e - s))),
                                               noise_rng);
        ps.zero_grad();
        ad::Tape tape;
        ad::Var loss = ad::mse(denoiser_forward(tape, ps, spec.depth, tape.constant(nb.input)), nb.eps);
        tape.backward(loss);
        opt.step(ps, lr);
        total += loss.value()(0, 0);
        ++batches;
      }
      const double epoch_loss = total / std::max(batches, 1);
      report.denoise_losses.push_back(epoch_loss);
      if (!std::isfinite(epoch_loss)) {
        report.converged = false;
        report.warnings.push_back("denoiser loss became non-finite at epoch " + std::to_string(epoch));
        break;
      }
      if (epoch_loss < best - 1e-6) {
        best = epoch_loss;
        since_best = 0;
      } else if (++since_best >= spec.patience) {
        break;  // plateau
      }
    }
  }
  ps.set_trainable("", true);

  auto backend = std::make_shared<ToyBackend>(spec, std::move(ps), mean, stddev);

  // Held-out diagnostics (fall back to training images when no holdout).
  const std::vector<Image>& eval_imgs = hold_imgs.empty() ? train_imgs : hold_imgs;
  const Eigen::MatrixXd hz = backend->encode_rows(eval_imgs);
  Rng eval_rng(derive_seed(spec.seed, "toy_backend.holdout", 0));
  const NoisyBatch nb = make_noisy_batch(spec, hz, eval_rng);
  {
    ad::Tape tape(false);
    const Eigen::MatrixXd pred =
        denoiser_forward(tape, backend->params(), spec.depth, tape.constant(nb.input)).value();
    report.holdout_denoise_mse = (pred - nb.eps).squaredNorm() / static_cast<double>(nb.eps.size());
    report.holdout_zero_mse = nb.eps.squaredNorm() / static_cast<double>(nb.eps.size());
  }
  report.holdout_recon_mse = reconstruction_error(*backend, eval_imgs);

  if (spec.epochs > 0) {
    if (report.denoise_losses.size() >= 2 && report.denoise_losses.back() >= report.denoise_losses.front()) {
      report.converged = false;
      report.warnings.push_back("denoiser loss did not improve over training");
    }
    if (!(report.holdout_denoise_mse < report.holdout_zero_mse)) {
      report.converged = false;
      report.warnings.push_back("held-out denoising MSE not below the zero predictor");
    }
  }
  if (spec.ae_epochs > 0 && !(report.holdout_recon_mse <= spec.recon_threshold)) {
    report.warnings.push_back("held-out reconstruction MSE " + std::to_string(report.holdout_recon_mse) +
                              " above threshold " + std::to_string(spec.recon_threshold));
  }
  return {std::move(backend), std::move(report)};
}

double reconstruction_error(const ToyBackend& backend, std::span<const Image> images) {
  if (images.empty()) return 0.0;
  double total = 0.0;
  Eigen::Index count = 0;
  constexpr size_t kChunk = 128;
  for (size_t s = 0; s < images.size(); s += kChunk) {
    const auto chunk = images.subspan(s, std::min(kChunk, images.size() - s));
    const auto recon = backend.decode_rows(backend.encode_rows(chunk));
    for (size_t i = 0; i < chunk.size(); ++i) {
      total += (recon[i].data - chunk[i].data).square().sum();
      count += chunk[i].data.size();
    }
  }
  return total / static_cast<double>(count);
}

std::vector<Image> sample_toy_fakes(const ToyBackend& backend, int count, int steps, std::uint64_t seed, double clip) {
  if (count <= 0) throw InvalidArgument("sample_toy_fakes: count must be positive");
  const NoiseSchedule& sched = backend.schedule();
  if (steps < 1 || steps > sched.num_steps()) throw InvalidArgument("sample_toy_fakes: steps outside [1, num_steps]");
  const Eigen::Index dim = backend.latent_shape().size();

  std::vector<int> ladder(static_cast<size_t>(steps));
  const int top = sched.num_steps() - 1;
  for (int k = 0; k < steps; ++k) {
    ladder[static_cast<size_t>(k)] =
        steps == 1 ? top : static_cast<int>(std::lround(top - static_cast<double>(k) * top / (steps - 1)));
  }

  Eigen::MatrixXd z(count, dim);
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "sample", static_cast<std::uint64_t>(i)));
    z.row(i) = rng.normal_vector(dim).transpose();
  }
  Eigen::MatrixXd x0 = z;
  const LatentShape shape = backend.latent_shape();
  for (int k = 0; k < steps; ++k) {
    const int t = ladder[static_cast<size_t>(k)];
    const std::vector<int> ts(static_cast<size_t>(count), t);
    const Eigen::MatrixXd eps = backend.predict_noise_rows(z, ts);
    const double ab = sched.alpha_bar(t);
    for (int i = 0; i < count; ++i) {
      const LatentTensor zi(shape, z.row(i).transpose());
      const LatentTensor ei(shape, eps.row(i).transpose());
      const LatentTensor denoised = single_step_denoise(zi, t, ei, sched);
      x0.row(i) = (denoised.data / std::sqrt(ab)).cwiseMax(-clip).cwiseMin(clip).transpose();
    }
    if (k + 1 < steps) {
      const double ab_next = sched.alpha_bar(ladder[static_cast<size_t>(k) + 1]);
      z = std::sqrt(ab_next) * x0 + std::sqrt(1.0 - ab_next) * eps;
    }
  }
  return backend.decode_rows(x0);
}

std::shared_ptr<const DenoiserBackend> load_backend(const std::string& kind, const std::filesystem::path& checkpoint) {
  if (kind == "toy") {
    if (checkpoint.empty()) throw InvalidArgument("backend.kind=toy needs backend.checkpoint");
    return ToyBackend::load(checkpoint);
  }
  if (kind.starts_with("external:")) {
    const std::filesystem::path path = kind.substr(std::string("external:").size());
    if (!std::filesystem::exists(path)) throw IoError("external backend checkpoint not found: " + path.string());
    const TensorContainer probe = TensorContainer::load(path);
    const std::string adapter = probe.meta.value("kind", "");
    std::shared_ptr<const DenoiserBackend> backend;
    if (adapter == "toy_backend") {
      backend = ToyBackend::load(path);
    } else {
      throw IncompatibleCheckpoint("no adapter registered for checkpoint kind '" + adapter + "'");
    }
    const auto violations = check_backend_contract(*backend);
    if (!violations.empty()) throw IncompatibleCheckpoint("backend adapter contract failed: " + violations.front());
    return backend;
  }
  throw InvalidArgument("unknown backend.kind '" + kind + "'");
}

std::vector<std::string> check_backend_contract(const DenoiserBackend& backend, std::uint64_t seed) {
  std::vector<std::string> out;
  const LatentShape shape = backend.latent_shape();
  if (!shape.valid()) {
    out.push_back("latent shape is not positive");
    return out;
  }
  Rng rng(seed);
  Image img(3, backend.image_size(), backend.image_size());
  for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data[i] = rng.uniform();
  const LatentTensor a = backend.encode(img);
  const LatentTensor b = backend.encode(img);
  if (!(a.shape == shape)) out.push_back("encode returned shape " + to_string(a.shape));
  if (a.data != b.data) out.push_back("encode is not deterministic");
  if (!a.all_finite()) out.push_back("encode produced non-finite values");
  const int steps = backend.schedule().num_steps();
  for (int t : {0, steps / 2, steps - 1}) {
    LatentTensor z(shape, rng.normal_vector(shape.size()));
    const LatentTensor e1 = backend.predict_noise(z, t);
    const LatentTensor e2 = backend.predict_noise(z, t);
    if (!(e1.shape == shape)) out.push_back("predict_noise changed shape at t=" + std::to_string(t));
    if (e1.data != e2.data) out.push_back("predict_noise is not deterministic at t=" + std::to_string(t));
    if (!e1.all_finite()) out.push_back("predict_noise produced non-finite values at t=" + std::to_string(t));
  }
  return out;
}

}  // namespace latte
