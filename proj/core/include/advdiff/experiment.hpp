#pragma once

// Experiment orchestration: training stages, leave-one-out attack runs,
// parameter sweeps and ablations, with every artifact written under a run
// directory (images/, masks/, reports/, plots/, checkpoints/).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advdiff/attack.hpp"
#include "advdiff/codec.hpp"
#include "advdiff/conditioning.hpp"
#include "advdiff/dataset.hpp"
#include "advdiff/diffusion.hpp"
#include "advdiff/metrics.hpp"
#include "advdiff/recognition.hpp"

namespace advdiff {

enum class Method { clean, inpaint, adv_diffusion, fgsm, pgd, mifgsm };

Method parse_method(const std::string& name);
std::string method_name(Method m);

struct ExperimentConfig {
  std::filesystem::path run_dir = "runs/default";
  std::filesystem::path checkpoint_dir;  // empty: <run_dir>/checkpoints

  DatasetSpec dataset;
  CodecTrainConfig codec_train;
  DiffusionTrainConfig diffusion_train;
  int schedule_steps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  RecognizerTrainConfig recognizer_train;
  std::vector<std::string> recognizers = {"ir152_toy", "irse50_toy", "facenet_toy", "mobileface_toy"};
  double far = 0.01;
  std::size_t calibration_pairs = 2000;
  std::size_t verification_pairs = 1000;  // half genuine, half impostor

  Method method = Method::adv_diffusion;
  // s = 300 saturates the toy recognizers and costs ~4 dB PSNR over s = 30
  // with no black-box gain; white_box is filled per leave-one-out split.
  AttackConfig attack = [] {
    AttackConfig a;
    a.strength = 30.0;
    return a;
  }();
  MaskOracleConfig mask;
  double eps_bound = kDefaultEpsBound;
  double step_size = 2.0 / 255.0;
  int n_iter = kDefaultIterations;
  double momentum_decay = 1.0;

  int n_sources = 50;
  int n_targets = 5;
  std::vector<std::string> black_box;  // empty: every recognizer in turn
  std::vector<int> sweep_steps = {10, 25, 45};
  std::vector<double> sweep_strengths = {0.0, 30.0, 100.0, 300.0};
  std::uint64_t root_seed = 2024;
  int workers = 1;

  std::filesystem::path checkpoints() const;
  std::vector<std::string> black_box_models() const;
  /// Fingerprint of the serialised config (excluding the output paths).
  std::string fingerprint() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Training stages. Each reads earlier stages' checkpoints from
/// cfg.checkpoints() and writes its own there.
Dataset stage_generate_data(const ExperimentConfig& cfg);
CodecTrainReport stage_train_codec(const ExperimentConfig& cfg);
DiffusionTrainReport stage_train_diffusion(const ExperimentConfig& cfg);

struct RecognizerSummary {
  std::string name;
  double tau = 0.0;
  double verification_accuracy = 0.0;
  double final_loss = 0.0;
};
std::vector<RecognizerSummary> stage_train_recognizers(const ExperimentConfig& cfg);

/// (z0, c) pairs with c taken from the ground-truth region maps.
std::vector<ConditionedLatent> conditioned_latents(const Codec& codec, std::span<const ImageSample> images,
                                                   const MaskOracleConfig& mask);

/// Impostor pairs and balanced genuine/impostor pairs from `images`.
std::vector<VerificationPair> impostor_pairs(std::span<const ImageSample> images, std::size_t n,
                                             std::uint64_t seed);
std::vector<VerificationPair> verification_pairs(std::span<const ImageSample> images, std::size_t n,
                                                 std::uint64_t seed);

struct AttackPair {
  int id = 0;
  std::size_t source = 0;  // index into the eval split
  std::size_t target = 0;
  int group = 0;
  std::uint64_t seed = 0;
};

/// k target identities and n sources from the remaining eval identities,
/// partitioned into k groups; group g attacks target g.
std::vector<AttackPair> select_pairs(const Dataset& data, int n_sources, int n_targets,
                                     std::uint64_t root_seed);

/// splitmix64 mixing of (root, stream).
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream);

struct Models {
  Codec codec;
  DiffusionCheckpoint diffusion;
  std::vector<Recognizer> recognizers;

  std::vector<const Recognizer*> pointers() const;
  const Recognizer& recognizer(const std::string& name) const;
  AttackModels attack_models() const;
};

Models load_models(const ExperimentConfig& cfg);

/// Adversarial outputs of one method under one white-box set, by pair.
struct MethodRun {
  std::string label;
  std::string black_box;
  std::vector<std::optional<ImageSample>> outputs;
  std::vector<std::string> errors;  // empty string on success
  std::vector<IdentityMask> masks;  // diffusion methods only
  std::vector<std::vector<TrajectoryEntry>> trajectories;
};

/// Runs `method` over every pair; failures are recorded per pair.
MethodRun run_method(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                     std::span<const AttackPair> pairs, Method method, const AttackConfig& attack,
                     const std::string& black_box);

/// Metrics of a run against its sources and targets.
MetricsReport evaluate_run(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                           std::span<const AttackPair> pairs, const MethodRun& run, const std::string& method);

/// Mean similarity to the target over `names` for every pair (NaN on failures).
std::vector<double> pair_similarities(const Models& models, const Dataset& data, std::span<const AttackPair> pairs,
                                      const MethodRun& run, const std::vector<std::string>& names);

/// Mean absolute pixel change inside and outside the identity-sensitive region.
struct RegionChange {
  double sensitive = 0.0;
  double agnostic = 0.0;
};
RegionChange region_change(const Dataset& data, std::span<const AttackPair> pairs, const MethodRun& run);

struct ExperimentResult {
  std::vector<MetricsReport> reports;  // method reports, then clean reports
  std::vector<MethodRun> runs;
  std::vector<MethodRun> clean_runs;
};

/// The configured method under every leave-one-out split, plus clean
/// baselines. Writes images/, masks/, reports/<label>/ and reports/<label>.csv.
ExperimentResult run_attack_experiment(const ExperimentConfig& cfg, const std::string& label = "");
ExperimentResult run_attack_experiment(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                                       const std::string& label);

/// Recomputes reports from a stored run label's adversarial bundles.
std::vector<MetricsReport> evaluate_stored(const ExperimentConfig& cfg, const std::string& label);

struct SweepRow {
  double value = 0.0;
  double white_box_asr = 0.0;  // mean over splits
  double black_box_asr = 0.0;  // mean over splits
  double psnr = 0.0;
  double ssim = 0.0;
  double frechet_distance = 0.0;
};

/// One experiment per grid value of "T" or "s"; writes reports/sweep_<p>.csv
/// and plots/sweep_<p>.png.
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::string& parameter,
                                const std::vector<double>& grid);
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                                const std::string& parameter, const std::vector<double>& grid);

struct AblationRow {
  std::string variant;  // full, constant_strength, no_mask
  double white_box_asr = 0.0;
  double black_box_asr = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double frechet_distance = 0.0;
};

/// Full method, constant strength and no mask on identical pairs and seeds;
/// writes reports/ablation.csv and reports/ablation.json.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg);
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const Models& models, const Dataset& data);

/// Spearman rank correlation (average ranks for ties); NaN if either side is constant.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace advdiff
