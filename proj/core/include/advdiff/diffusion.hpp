#pragma once

// Noise schedules, the forward/reverse diffusion steps, the one-shot clean
// latent estimate, and the small conditional denoiser trained on latents.

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "advdiff/autograd.hpp"
#include "advdiff/nn.hpp"
#include "advdiff/types.hpp"

namespace advdiff {

/// Precomputed schedule for a T-step diffusion. All accessors are 1-indexed
/// by diffusion step t in [1, T].
class NoiseSchedule {
 public:
  /// Builds from explicit betas; each must lie in (0, 1].
  explicit NoiseSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return alpha_[index(t)]; }
  double alpha_bar(int t) const { return alpha_bar_[index(t)]; }
  /// Fixed reverse-process standard deviation, sqrt(beta_t). The sampler
  /// itself adds no noise on the final step (t = 1).
  double posterior_sigma(int t) const { return sigma_[index(t)]; }

  double beta_start() const { return beta_.front(); }
  double beta_end() const { return beta_.back(); }

 private:
  std::size_t index(int t) const;

  std::vector<double> beta_, alpha_, alpha_bar_, sigma_;
};

/// Linear beta interpolation from beta_start (t = 1) to beta_end (t = T).
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

/// Interface of a noise predictor eps(z_t, t, c). Implementations must be
/// deterministic and return a tensor shaped like z_t.
class EpsilonPredictor {
 public:
  virtual ~EpsilonPredictor() = default;
  virtual Tensor predict(const Tensor& z_t, int t, const Tensor& c) const = 0;
};

struct EpsilonModelConfig {
  int latent_channels = 4;
  int cond_channels = 4;
  int width = 32;
  int blocks = 2;
  int time_dim = 32;
};

/// Small residual conv denoiser. The condition latent is concatenated to z_t
/// along the channel axis; the step enters through a sinusoidal embedding.
class EpsilonModel final : public EpsilonPredictor {
 public:
  EpsilonModel(EpsilonModelConfig config, std::uint64_t seed);
  EpsilonModel(EpsilonModelConfig config, nn::ParameterSet params);

  Tensor predict(const Tensor& z_t, int t, const Tensor& c) const override;

  /// Batched differentiable forward: z_t, c are N x C x H x W.
  ag::Var forward(ag::Tape& tape, const nn::Bound& p, ag::Var z_t, ag::Var c,
                  std::span<const int> steps) const;

  const EpsilonModelConfig& config() const { return config_; }
  const nn::ParameterSet& parameters() const { return params_; }
  nn::ParameterSet& parameters() { return params_; }

 private:
  void build(std::uint64_t seed);

  EpsilonModelConfig config_;
  nn::ParameterSet params_;
};

/// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, tagged with step t.
LatentCode forward_diffuse(const LatentCode& z0, int t, const Tensor& eps,
                           const NoiseSchedule& sched);

/// One conditional ancestral step t -> t-1. `noise` is ignored at t = 1.
LatentCode reverse_step(const LatentCode& z_t, int t, const LatentCode& c,
                        const EpsilonPredictor& model, const NoiseSchedule& sched,
                        const Tensor& noise);

/// (z_prev - sqrt(1 - abar_t) eps(z_prev, t, c)) / sqrt(abar_t), with the
/// latent from step t-1 paired against abar_t exactly as in the attack loop.
LatentCode estimate_z0(const LatentCode& z_prev, int t, const LatentCode& c,
                       const EpsilonPredictor& model, const NoiseSchedule& sched);

struct DiffusionTrainConfig {
  int steps = 1500;
  int batch_size = 32;
  double learning_rate = 2e-3;
  double val_fraction = 0.1;
  double grad_clip = 5.0;
  std::uint64_t seed = 7;
  EpsilonModelConfig model;
};

struct DiffusionTrainReport {
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
  std::vector<double> train_loss;  // per optimisation step
};

/// (z0, c) training pair.
struct ConditionedLatent {
  Tensor z0;
  Tensor c;
};

/// Trains with the standard noise-prediction objective. Deterministic per seed.
std::pair<EpsilonModel, DiffusionTrainReport> train_epsilon_model(
    std::span<const ConditionedLatent> dataset, const NoiseSchedule& sched,
    const DiffusionTrainConfig& cfg);

/// Mean denoising loss over `data` with noise/steps drawn from `seed`.
double denoising_loss(const EpsilonModel& model, std::span<const ConditionedLatent> data,
                      const NoiseSchedule& sched, std::uint64_t seed);

struct DiffusionCheckpoint {
  EpsilonModel model;
  NoiseSchedule schedule;
  std::uint64_t train_seed = 0;
};

/// Writes `<stem>.bin` plus `<stem>.json` metadata (T, beta range, shapes, seed).
void save_diffusion(const std::filesystem::path& stem, const EpsilonModel& model,
                    const NoiseSchedule& sched, std::uint64_t train_seed,
                    const DiffusionTrainReport& report);
DiffusionCheckpoint load_diffusion(const std::filesystem::path& stem);

}  // namespace advdiff
