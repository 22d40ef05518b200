#include "advdiff/attack.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace advdiff {

namespace {

std::vector<const Recognizer*> select_white_box(const AttackModels& models, const AttackConfig& cfg) {
  std::vector<const Recognizer*> out;
  for (const auto& name : cfg.white_box) {
    auto it = std::find_if(models.recognizers.begin(), models.recognizers.end(),
                           [&](const Recognizer* r) { return r->name() == name; });
    if (it == models.recognizers.end()) throw std::invalid_argument("unknown white-box recognizer " + name);
    out.push_back(*it);
  }
  return out;
}

Tensor gaussian(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(shape);
  for (double& v : t.data()) v = normal(rng);
  return t;
}

// Sum over recognizers of cos(embed_r(images), target_r), divided by K.
ag::Var mean_similarity(ag::Tape& tape, ag::Var images, const std::vector<std::vector<double>>& targets,
                        std::span<const Recognizer* const> recognizers) {
  if (recognizers.empty()) throw std::invalid_argument("at least one recognizer is required");
  if (targets.size() != recognizers.size()) throw std::invalid_argument("one target embedding per recognizer");
  ag::Var total;
  for (std::size_t k = 0; k < recognizers.size(); ++k) {
    const Recognizer& r = *recognizers[k];
    const nn::Bound p = nn::bind(tape, r.parameters(), false);
    ag::Var e = r.embed(tape, p, images);
    ag::Var t = tape.constant(Tensor({1, r.embedding_dim()}, targets[k]));
    ag::Var s = ag::row_dot(e, t);
    total = total.valid() ? ag::add(total, s) : s;
    r.note_gradient_query();
  }
  return ag::scale(ag::sum(total), 1.0 / static_cast<double>(recognizers.size()));
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct ReverseOutcome {
  LatentCode z0;
  IdentityMask mask;
  std::vector<TrajectoryEntry> trajectory;
};

// Shared body of the attack and the plain inpainting run; with `perturb` off
// no gradient is requested but the noise stream is consumed identically.
ReverseOutcome run_reverse(const ImageSample& x_s, const ImageSample* x_r, const AttackModels& models,
                           const MaskOracle& mask_oracle, const AttackConfig& cfg, bool perturb) {
  if (!models.codec || !models.eps_model || !models.schedule)
    throw std::invalid_argument("attack models are incomplete");
  const NoiseSchedule& sched = *models.schedule;
  cfg.validate(sched);
  validate_image(x_s);
  const Codec& codec = *models.codec;
  const std::vector<const Recognizer*> white = select_white_box(models, cfg);
  std::vector<std::vector<double>> targets;
  if (perturb) targets = target_embeddings(white, *x_r);

  std::mt19937_64 rng(cfg.seed);
  const LatentCode z0 = encode(codec, x_s);
  IdentityMask mask = cfg.no_mask ? parse_mask(x_s, {MaskOracleConfig::Mode::none})
                                  : mask_oracle(x_s);
  const ImageSample x_m = masked_source(x_s, mask);
  LatentCode z_hat = forward_diffuse(z0, cfg.steps, gaussian(z0.shape(), rng), sched);
  const LatentCode c = make_condition(codec, x_m);

  ReverseOutcome out{{}, std::move(mask), {}};
  for (int t = cfg.steps; t >= 1; --t) {
    try {
      const Tensor noise = gaussian(z_hat.shape(), rng);
      LatentCode z_prev = reverse_step(z_hat, t, c, *models.eps_model, sched, noise);
      if (perturb) {
        const LatentCode z0_est = estimate_z0(z_prev, t, c, *models.eps_model, sched);
        const double w = adaptive_weight(cfg.constant_strength ? cfg.steps : t, sched, cfg.strength);
        const LatentGradient g = adversarial_gradient(z0_est, targets, white, codec);
        for (std::size_t i = 0; i < z_prev.data.size(); ++i) z_prev.data[i] += w * g.gradient[i];
        if (cfg.log_trajectory) out.trajectory.push_back({t, w, g.similarity});
      }
      z_hat = std::move(z_prev);
    } catch (const std::exception& e) {
      throw std::runtime_error("attack failed at step t=" + std::to_string(t) + ": " + e.what());
    }
  }
  out.z0 = std::move(z_hat);
  return out;
}

}  // namespace

void AttackConfig::validate(const NoiseSchedule& sched) const {
  if (!(strength >= 0.0) || !std::isfinite(strength)) throw std::invalid_argument("attack strength s must be >= 0");
  if (steps < 1 || steps > sched.steps()) {
    throw std::invalid_argument("attack steps T=" + std::to_string(steps) + " outside the trained schedule [1, " +
                                std::to_string(sched.steps()) + "]");
  }
  if (white_box.empty()) throw std::invalid_argument("attack needs at least one white-box recognizer");
}

double adaptive_weight(int t, const NoiseSchedule& sched, double s) { return s * sched.posterior_sigma(t); }

std::vector<std::vector<double>> target_embeddings(std::span<const Recognizer* const> recognizers,
                                                   const ImageSample& target) {
  std::vector<std::vector<double>> out;
  for (const Recognizer* r : recognizers) out.push_back(r->embed(target));
  return out;
}

LatentGradient adversarial_gradient(const LatentCode& z0_est, const ImageSample& x_r,
                                    std::span<const Recognizer* const> recognizers, const Codec& codec) {
  return adversarial_gradient(z0_est, target_embeddings(recognizers, x_r), recognizers, codec);
}

LatentGradient adversarial_gradient(const LatentCode& z0_est,
                                    const std::vector<std::vector<double>>& targets,
                                    std::span<const Recognizer* const> recognizers, const Codec& codec) {
  ag::Tape tape;
  const nn::Bound cp = nn::bind(tape, codec.parameters(), false);
  ag::Var z = tape.leaf(as_batch(z0_est.data));
  ag::Var images = codec.decode(tape, cp, z);
  ag::Var objective = mean_similarity(tape, images, targets, recognizers);
  tape.backward(objective);
  LatentGradient out{tape.grad(z).reshaped(z0_est.data.shape()), objective.value()[0]};
  if (!out.gradient.all_finite()) {
    throw std::runtime_error("non-finite adversarial gradient (similarity " + std::to_string(out.similarity) + ")");
  }
  return out;
}

PixelGradient pixel_gradient(const ImageSample& x, const std::vector<std::vector<double>>& targets,
                             std::span<const Recognizer* const> recognizers) {
  ag::Tape tape;
  ag::Var images = tape.leaf(as_batch(x.pixels));
  ag::Var objective = mean_similarity(tape, images, targets, recognizers);
  tape.backward(objective);
  PixelGradient out{tape.grad(images).reshaped(x.pixels.shape()), objective.value()[0]};
  if (!out.gradient.all_finite()) throw std::runtime_error("non-finite pixel gradient");
  return out;
}

AttackResult adv_diffusion_attack(const ImageSample& x_s, const ImageSample& x_r, const AttackModels& models,
                                  const MaskOracle& mask_oracle, const AttackConfig& cfg) {
  validate_image(x_r);
  ReverseOutcome rev = run_reverse(x_s, &x_r, models, mask_oracle, cfg, true);
  AttackResult result;
  result.adversarial = decode(*models.codec, rev.z0);
  result.similarity_to_target = similarities(result.adversarial, x_r, models.recognizers);
  result.trajectory = std::move(rev.trajectory);
  result.mask = std::move(rev.mask);
  return result;
}

ImageSample conditioned_inpainting(const ImageSample& x_s, const AttackModels& models,
                                   const MaskOracle& mask_oracle, const AttackConfig& cfg) {
  return decode(*models.codec, run_reverse(x_s, nullptr, models, mask_oracle, cfg, false).z0);
}

ImageSample fgsm_attack(const ImageSample& x_s, const ImageSample& x_r,
                        std::span<const Recognizer* const> recognizers, double eps_bound) {
  if (!(eps_bound >= 0.0 && eps_bound < 1.0)) throw std::invalid_argument("FGSM eps must lie in [0, 1)");
  validate_image(x_s);
  const PixelGradient g = pixel_gradient(x_s, target_embeddings(recognizers, x_r), recognizers);
  ImageSample out = x_s;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = std::clamp(x_s.pixels[i] + eps_bound * sign(g.gradient[i]), 0.0, 1.0);
  }
  return out;
}

namespace {

ImageSample iterative_attack(const ImageSample& x_s, const ImageSample& x_r,
                             std::span<const Recognizer* const> recognizers, double eps_bound,
                             double step_size, int n_iter, double momentum_decay, bool use_momentum) {
  if (n_iter < 1) throw std::invalid_argument("iterative attack needs n_iter >= 1");
  if (!(eps_bound >= 0.0 && eps_bound < 1.0)) throw std::invalid_argument("eps must lie in [0, 1)");
  if (momentum_decay < 0.0) throw std::invalid_argument("momentum decay must be >= 0");
  validate_image(x_s);
  const auto targets = target_embeddings(recognizers, x_r);
  ImageSample x = x_s;
  Tensor momentum(x_s.pixels.shape());
  for (int it = 0; it < n_iter; ++it) {
    const PixelGradient g = pixel_gradient(x, targets, recognizers);
    const Tensor* direction = &g.gradient;
    if (use_momentum) {
      double l1 = 0.0;
      for (double v : g.gradient.data()) l1 += std::abs(v);
      const double inv = l1 > 0.0 ? 1.0 / l1 : 0.0;
      for (std::size_t i = 0; i < momentum.size(); ++i)
        momentum[i] = momentum_decay * momentum[i] + g.gradient[i] * inv;
      direction = &momentum;
    }
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
      const double stepped = x.pixels[i] + step_size * sign((*direction)[i]);
      const double projected = std::min(std::max(stepped, x_s.pixels[i] - eps_bound), x_s.pixels[i] + eps_bound);
      x.pixels[i] = std::clamp(projected, 0.0, 1.0);
    }
  }
  return x;
}

}  // namespace

ImageSample pgd_attack(const ImageSample& x_s, const ImageSample& x_r,
                       std::span<const Recognizer* const> recognizers, double eps_bound, double step_size,
                       int n_iter) {
  return iterative_attack(x_s, x_r, recognizers, eps_bound, step_size, n_iter, 0.0, false);
}

ImageSample mifgsm_attack(const ImageSample& x_s, const ImageSample& x_r,
                          std::span<const Recognizer* const> recognizers, double eps_bound, double step_size,
                          int n_iter, double momentum_decay) {
  return iterative_attack(x_s, x_r, recognizers, eps_bound, step_size, n_iter, momentum_decay, true);
}

std::map<std::string, double> similarities(const ImageSample& x, const ImageSample& target,
                                           std::span<const Recognizer* const> recognizers) {
  std::map<std::string, double> out;
  for (const Recognizer* r : recognizers) out[r->name()] = similarity(r->embed(x), r->embed(target));
  return out;
}

}  // namespace advdiff
