#include "advdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "advdiff/io.hpp"

namespace advdiff {

namespace {

Tensor time_embedding(std::span<const int> steps, int dim) {
  const int n = static_cast<int>(steps.size());
  const int half = dim / 2;
  Tensor out({n, dim});
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      const double arg = steps[static_cast<std::size_t>(i)] * freq;
      out[static_cast<std::size_t>(i * dim + k)] = std::sin(arg);
      out[static_cast<std::size_t>(i * dim + half + k)] = std::cos(arg);
    }
  }
  return out;
}

void check_step(int t, const NoiseSchedule& sched, const char* op) {
  if (t < 1 || t > sched.steps()) {
    throw std::out_of_range(std::string(op) + ": step " + std::to_string(t) + " outside [1, " +
                            std::to_string(sched.steps()) + "]");
  }
}

}  // namespace

// ---- schedule ----------------------------------------------------------------

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
  if (beta_.empty()) throw std::invalid_argument("noise schedule needs at least one step");
  double prod = 1.0;
  for (double b : beta_) {
    if (!(b > 0.0 && b <= 1.0)) {
      throw std::invalid_argument("beta must lie in (0, 1], got " + std::to_string(b));
    }
    alpha_.push_back(1.0 - b);
    prod *= 1.0 - b;
    alpha_bar_.push_back(prod);
    sigma_.push_back(std::sqrt(b));
  }
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("schedule step " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule step count must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end <= 1.0)) {
    throw std::invalid_argument("need 0 < beta_start <= beta_end <= 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule(std::move(betas));
}

// ---- denoiser -----------------------------------------------------------------

EpsilonModel::EpsilonModel(EpsilonModelConfig config, std::uint64_t seed) : config_(config) {
  build(seed);
}

EpsilonModel::EpsilonModel(EpsilonModelConfig config, nn::ParameterSet params)
    : config_(config), params_(std::move(params)) {
  EpsilonModel reference(config_, 0);
  if (reference.params_.size() != params_.size()) {
    throw std::invalid_argument("epsilon model parameters do not match configuration");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (reference.params_[i].shape() != params_[i].shape() ||
        reference.params_.name(i) != params_.name(i)) {
      throw std::invalid_argument("epsilon model parameter mismatch at " + params_.name(i));
    }
  }
}

void EpsilonModel::build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int w = config_.width;
  nn::add_conv(params_, "in", config_.latent_channels + config_.cond_channels, w, 3, rng);
  nn::add_linear(params_, "time1", config_.time_dim, w, rng);
  nn::add_linear(params_, "time2", w, w, rng);
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string name = "block" + std::to_string(b);
    nn::add_conv(params_, name + ".conv1", w, w, 3, rng);
    nn::add_linear(params_, name + ".temb", w, w, rng);
    nn::add_conv(params_, name + ".conv2", w, w, 3, rng, 0.5);
  }
  nn::add_conv(params_, "out", w, config_.latent_channels, 3, rng, 0.5);
}

ag::Var EpsilonModel::forward(ag::Tape& tape, const nn::Bound& p, ag::Var z_t, ag::Var c,
                              std::span<const int> steps) const {
  const Shape& a = z_t.shape();
  const Shape& b = c.shape();
  if (a.size() != 4 || b.size() != 4 || a[1] != config_.latent_channels ||
      b[1] != config_.cond_channels || a[0] != b[0] || a[2] != b[2] || a[3] != b[3]) {
    throw std::invalid_argument("epsilon model: condition shape " + shape_string(b) +
                                " incompatible with latent " + shape_string(a));
  }
  if (static_cast<int>(steps.size()) != z_t.shape()[0]) {
    throw std::invalid_argument("epsilon model: one step index per batch item required");
  }
  std::size_t i = 0;
  ag::Var h = ag::conv2d(ag::concat_channels(z_t, c), p[i], p[i + 1], 1, 1);
  i += 2;
  ag::Var temb = tape.constant(time_embedding(steps, config_.time_dim));
  temb = ag::silu(ag::linear(temb, p[i], p[i + 1]));
  i += 2;
  temb = ag::silu(ag::linear(temb, p[i], p[i + 1]));
  i += 2;
  for (int b = 0; b < config_.blocks; ++b) {
    ag::Var r = ag::conv2d(ag::silu(h), p[i], p[i + 1], 1, 1);
    r = ag::add_channel_offset(r, ag::linear(temb, p[i + 2], p[i + 3]));
    r = ag::conv2d(ag::silu(r), p[i + 4], p[i + 5], 1, 1);
    h = ag::add(h, r);
    i += 6;
  }
  return ag::conv2d(ag::silu(h), p[i], p[i + 1], 1, 1);
}

Tensor EpsilonModel::predict(const Tensor& z_t, int t, const Tensor& c) const {
  ag::Tape tape;
  const nn::Bound p = nn::bind(tape, params_, false);
  const int steps[] = {t};
  ag::Var out = forward(tape, p, tape.constant(as_batch(z_t)), tape.constant(as_batch(c)), steps);
  return out.value().reshaped(z_t.shape());
}

// ---- sampling primitives ----------------------------------------------------------

LatentCode forward_diffuse(const LatentCode& z0, int t, const Tensor& eps,
                           const NoiseSchedule& sched) {
  check_step(t, sched, "forward_diffuse");
  require_same_shape(z0.data, eps, "forward_diffuse");
  const double a = std::sqrt(sched.alpha_bar(t));
  const double b = std::sqrt(1.0 - sched.alpha_bar(t));
  Tensor out(z0.data.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0.data[i] + b * eps[i];
  return LatentCode{std::move(out), t};
}

LatentCode reverse_step(const LatentCode& z_t, int t, const LatentCode& c,
                        const EpsilonPredictor& model, const NoiseSchedule& sched,
                        const Tensor& noise) {
  check_step(t, sched, "reverse_step");
  if (z_t.step_index != t) {
    throw std::invalid_argument("reverse_step: latent is at step " +
                                std::to_string(z_t.step_index) + ", expected " +
                                std::to_string(t));
  }
  require_same_shape(z_t.data, noise, "reverse_step noise");
  const Tensor eps = model.predict(z_t.data, t, c.data);
  require_same_shape(z_t.data, eps, "reverse_step model output");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
  const double eps_coef = (1.0 - sched.alpha(t)) / std::sqrt(1.0 - sched.alpha_bar(t));
  const double sigma = t == 1 ? 0.0 : sched.posterior_sigma(t);
  Tensor out(z_t.data.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double mu = inv_sqrt_alpha * (z_t.data[i] - eps_coef * eps[i]);
    out[i] = sigma == 0.0 ? mu : mu + sigma * noise[i];
  }
  return LatentCode{std::move(out), t - 1};
}

LatentCode estimate_z0(const LatentCode& z_prev, int t, const LatentCode& c,
                       const EpsilonPredictor& model, const NoiseSchedule& sched) {
  check_step(t, sched, "estimate_z0");
  const Tensor eps = model.predict(z_prev.data, t, c.data);
  require_same_shape(z_prev.data, eps, "estimate_z0 model output");
  const double inv_sqrt_ab = 1.0 / std::sqrt(sched.alpha_bar(t));
  const double noise_coef = std::sqrt(1.0 - sched.alpha_bar(t));
  Tensor out(z_prev.data.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = inv_sqrt_ab * (z_prev.data[i] - noise_coef * eps[i]);
  }
  return LatentCode{std::move(out), 0};
}

// ---- training ----------------------------------------------------------------------

namespace {

struct NoisyBatch {
  Tensor z_t, c, eps;
  std::vector<int> steps;
};

NoisyBatch make_batch(std::span<const ConditionedLatent> data, std::span<const std::size_t> idx,
                      const NoiseSchedule& sched, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> step_dist(1, sched.steps());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<const Tensor*> z0s, cs;
  for (std::size_t i : idx) {
    z0s.push_back(&data[i].z0);
    cs.push_back(&data[i].c);
  }
  NoisyBatch b{stack(z0s), stack(cs), {}, {}};
  b.eps = Tensor(b.z_t.shape());
  const std::size_t per = data[idx[0]].z0.size();
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const int t = step_dist(rng);
    b.steps.push_back(t);
    const double a = std::sqrt(sched.alpha_bar(t));
    const double s = std::sqrt(1.0 - sched.alpha_bar(t));
    for (std::size_t k = 0; k < per; ++k) {
      const double e = normal(rng);
      b.eps[n * per + k] = e;
      b.z_t[n * per + k] = a * b.z_t[n * per + k] + s * e;
    }
  }
  return b;
}

}  // namespace

double denoising_loss(const EpsilonModel& model, std::span<const ConditionedLatent> data,
                      const NoiseSchedule& sched, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("denoising_loss: empty data");
  std::mt19937_64 rng(seed);
  double total = 0.0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
    NoisyBatch b = make_batch(data, idx, sched, rng);
    ag::Tape tape;
    const nn::Bound p = nn::bind(tape, model.parameters(), false);
    ag::Var pred = model.forward(tape, p, tape.constant(b.z_t), tape.constant(b.c), b.steps);
    ag::Var loss = ag::mse(pred, tape.constant(b.eps));
    total += loss.value()[0] * static_cast<double>(idx.size());
    count += idx.size();
  }
  return total / static_cast<double>(count);
}

std::pair<EpsilonModel, DiffusionTrainReport> train_epsilon_model(
    std::span<const ConditionedLatent> dataset, const NoiseSchedule& sched,
    const DiffusionTrainConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("train_epsilon_model: empty dataset");
  if (cfg.batch_size < 1 || cfg.steps < 1) throw std::invalid_argument("train_epsilon_model: bad config");

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(dataset.size()));
  if (dataset.size() == 1) n_val = 0;
  std::vector<ConditionedLatent> train, val;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_val ? val : train).push_back(dataset[order[i]]);
  if (val.empty()) val = train;

  EpsilonModel model(cfg.model, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  DiffusionTrainReport report;
  const std::uint64_t val_seed = cfg.seed + 1;
  report.initial_val_loss = denoising_loss(model, val, sched, val_seed);

  nn::Adam opt(cfg.learning_rate);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), train.size());
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = pick(rng);
    NoisyBatch b = make_batch(train, idx, sched, rng);
    ag::Tape tape;
    const nn::Bound p = nn::bind(tape, model.parameters(), true);
    ag::Var pred = model.forward(tape, p, tape.constant(b.z_t), tape.constant(b.c), b.steps);
    ag::Var loss = ag::mse(pred, tape.constant(b.eps));
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw std::runtime_error("epsilon model training diverged at step " + std::to_string(step) +
                               " (loss " + std::to_string(value) + ")");
    }
    report.train_loss.push_back(value);
    tape.backward(loss);
    std::vector<Tensor> grads = nn::gradients(tape, p);
    nn::clip_global_norm(grads, cfg.grad_clip);
    const double progress = static_cast<double>(step) / cfg.steps;
    opt.set_learning_rate(cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress))));
    opt.step(model.parameters(), grads);
  }
  report.final_val_loss = denoising_loss(model, val, sched, val_seed);
  return {std::move(model), std::move(report)};
}

// ---- persistence --------------------------------------------------------------------

void save_diffusion(const std::filesystem::path& stem, const EpsilonModel& model,
                    const NoiseSchedule& sched, std::uint64_t train_seed,
                    const DiffusionTrainReport& report) {
  nn::save_blob(with_suffix(stem, ".bin"), model.parameters());
  const auto& c = model.config();
  nlohmann::json meta = {
      {"kind", "epsilon_model"},
      {"schedule", {{"T", sched.steps()}, {"beta_start", sched.beta_start()}, {"beta_end", sched.beta_end()}}},
      {"latent_channels", c.latent_channels},
      {"cond_channels", c.cond_channels},
      {"width", c.width},
      {"blocks", c.blocks},
      {"time_dim", c.time_dim},
      {"train_seed", train_seed},
      {"initial_val_loss", report.initial_val_loss},
      {"final_val_loss", report.final_val_loss},
  };
  write_json(with_suffix(stem, ".json"), meta);
}

DiffusionCheckpoint load_diffusion(const std::filesystem::path& stem) {
  const nlohmann::json meta = read_json(with_suffix(stem, ".json"));
  EpsilonModelConfig c;
  c.latent_channels = meta.at("latent_channels");
  c.cond_channels = meta.at("cond_channels");
  c.width = meta.at("width");
  c.blocks = meta.at("blocks");
  c.time_dim = meta.at("time_dim");
  const auto& s = meta.at("schedule");
  return DiffusionCheckpoint{EpsilonModel(c, nn::load_blob(with_suffix(stem, ".bin"))),
                             make_schedule(s.at("T"), s.at("beta_start"), s.at("beta_end")),
                             meta.at("train_seed").get<std::uint64_t>()};
}

}  // namespace advdiff
