#pragma once

// Adversarial reverse diffusion with adaptive strength, its ablations, and
// the pixel-space FGSM / PGD / MI-FGSM baselines. All attacks are targeted:
// they ascend the mean cosine similarity to the target over the white-box
// recognizers.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "advdiff/codec.hpp"
#include "advdiff/conditioning.hpp"
#include "advdiff/diffusion.hpp"
#include "advdiff/recognition.hpp"

namespace advdiff {

struct AttackConfig {
  int steps = 45;          // T: diffusion level the source is noised to
  double strength = 300.0;  // s
  std::vector<std::string> white_box;
  bool constant_strength = false;  // ablation: w_t frozen at s * sigma_T
  bool no_mask = false;            // ablation: condition on the full source
  std::uint64_t seed = 0;
  bool log_trajectory = false;

  /// Throws unless s >= 0, 1 <= T <= schedule steps, and white_box is non-empty.
  void validate(const NoiseSchedule& sched) const;
};

struct TrajectoryEntry {
  int t = 0;
  double weight = 0.0;
  double similarity = 0.0;  // mean white-box similarity of D(z0_est) to the target
};

struct AttackResult {
  ImageSample adversarial;
  std::map<std::string, double> similarity_to_target;  // every supplied recognizer
  std::vector<TrajectoryEntry> trajectory;
  IdentityMask mask;
};

/// Everything the diffusion attack reads; all members are borrowed.
struct AttackModels {
  const Codec* codec = nullptr;
  const EpsilonPredictor* eps_model = nullptr;
  const NoiseSchedule* schedule = nullptr;
  std::vector<const Recognizer*> recognizers;
};

/// w_t = s * sigma_t.
double adaptive_weight(int t, const NoiseSchedule& sched, double s);

/// Unit embeddings of the target under each recognizer, computed once per attack.
std::vector<std::vector<double>> target_embeddings(std::span<const Recognizer* const> recognizers,
                                                   const ImageSample& target);

struct LatentGradient {
  Tensor gradient;          // latent shape
  double similarity = 0.0;  // mean similarity at the evaluation point
};

/// d/dz of mean_r cos(embed_r(D(z)), embed_r(x_r)) at z = z0_est. Throws on a
/// non-finite gradient.
LatentGradient adversarial_gradient(const LatentCode& z0_est, const ImageSample& x_r,
                                    std::span<const Recognizer* const> recognizers,
                                    const Codec& codec);
LatentGradient adversarial_gradient(const LatentCode& z0_est,
                                    const std::vector<std::vector<double>>& targets,
                                    std::span<const Recognizer* const> recognizers,
                                    const Codec& codec);

/// Mean white-box similarity and its gradient with respect to image pixels.
struct PixelGradient {
  Tensor gradient;
  double similarity = 0.0;
};
PixelGradient pixel_gradient(const ImageSample& x, const std::vector<std::vector<double>>& targets,
                             std::span<const Recognizer* const> recognizers);

/// The full adversarial reverse-diffusion loop.
AttackResult adv_diffusion_attack(const ImageSample& x_s, const ImageSample& x_r,
                                  const AttackModels& models, const MaskOracle& mask_oracle,
                                  const AttackConfig& cfg);

/// The same seeded conditioned reverse process with no adversarial term.
ImageSample conditioned_inpainting(const ImageSample& x_s, const AttackModels& models,
                                   const MaskOracle& mask_oracle, const AttackConfig& cfg);

inline constexpr double kDefaultEpsBound = 8.0 / 255.0;
inline constexpr int kDefaultIterations = 10;

/// clip(x_s + eps sign(grad), [0, 1]).
ImageSample fgsm_attack(const ImageSample& x_s, const ImageSample& x_r,
                        std::span<const Recognizer* const> recognizers,
                        double eps_bound = kDefaultEpsBound);

/// Signed ascent with projection onto the L-inf ball around x_s and [0, 1].
ImageSample pgd_attack(const ImageSample& x_s, const ImageSample& x_r,
                       std::span<const Recognizer* const> recognizers,
                       double eps_bound = kDefaultEpsBound, double step_size = 2.0 / 255.0,
                       int n_iter = kDefaultIterations);

/// PGD driven by the momentum g <- mu g + grad / ||grad||_1.
ImageSample mifgsm_attack(const ImageSample& x_s, const ImageSample& x_r,
                          std::span<const Recognizer* const> recognizers,
                          double eps_bound = kDefaultEpsBound, double step_size = 2.0 / 255.0,
                          int n_iter = kDefaultIterations, double momentum_decay = 1.0);

/// Similarity of `x` to `target` under each recognizer, keyed by name.
std::map<std::string, double> similarities(const ImageSample& x, const ImageSample& target,
                                           std::span<const Recognizer* const> recognizers);

}  // namespace advdiff
