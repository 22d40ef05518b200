// advdiff: command-line driver for data generation, training, attacks,
// evaluation, sweeps and ablations. Every flag overrides the corresponding
// field of the --config file; the effective config is written to
// <run_dir>/config.json before each command runs.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "advdiff/experiment.hpp"
#include "advdiff/io.hpp"

namespace {

using advdiff::ExperimentConfig;

struct Overrides {
  std::string config_path;
  std::optional<std::string> run_dir, checkpoint_dir, method, mask;
  std::optional<std::uint64_t> root_seed;
  std::optional<int> workers, n_sources, n_targets, steps, n_iter;
  std::optional<double> strength, eps_bound, step_size, momentum, far;
  std::vector<std::string> black_box, recognizers;
  bool constant_strength = false, no_mask = false, trajectory = false;

  std::optional<int> n_identities, images_per_identity, eval_identities;
  std::optional<std::uint64_t> dataset_seed;
  std::optional<int> codec_steps, diffusion_steps, recognizer_steps;
};

void add_shared(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config_path, "Structured-text (JSON) experiment config")->check(CLI::ExistingFile);
  app.add_option("--run-dir", o.run_dir, "Output directory");
  app.add_option("--checkpoint-dir", o.checkpoint_dir, "Checkpoint directory (default <run-dir>/checkpoints)");
  app.add_option("--seed", o.root_seed, "Root seed for pair selection and per-pair seeds");
  app.add_option("--workers", o.workers, "Worker threads for independent pairs");
  app.add_option("--recognizers", o.recognizers, "Recognizer architectures");
  app.add_option("--far", o.far, "False acceptance rate for threshold calibration");
}

void add_attack_flags(CLI::App& app, Overrides& o) {
  app.add_option("--method", o.method, "clean | inpaint | adv_diffusion | fgsm | pgd | mifgsm");
  app.add_option("-T,--steps", o.steps, "Diffusion level the source is noised to");
  app.add_option("-s,--strength", o.strength, "Attack strength s");
  app.add_option("--mask", o.mask, "Mask oracle: ground_truth | ellipse | none");
  app.add_flag("--constant-strength", o.constant_strength, "Ablation: w_t frozen at s * sigma_T");
  app.add_flag("--no-mask", o.no_mask, "Ablation: condition on the unmasked source");
  app.add_flag("--trajectory", o.trajectory, "Log (t, w_t, similarity) per step");
  app.add_option("--eps", o.eps_bound, "L-inf budget of the pixel baselines");
  app.add_option("--step-size", o.step_size, "Step size of PGD / MI-FGSM");
  app.add_option("--iterations", o.n_iter, "Iterations of PGD / MI-FGSM");
  app.add_option("--momentum", o.momentum, "MI-FGSM momentum decay");
  app.add_option("--n-sources", o.n_sources, "Number of source images");
  app.add_option("--n-targets", o.n_targets, "Number of target identities");
  app.add_option("--black-box", o.black_box, "Held-out models (default: each recognizer in turn)");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(o.config_path);
  if (o.run_dir) c.run_dir = *o.run_dir;
  if (o.checkpoint_dir) c.checkpoint_dir = *o.checkpoint_dir;
  if (o.root_seed) c.root_seed = *o.root_seed;
  if (o.workers) c.workers = *o.workers;
  if (!o.recognizers.empty()) c.recognizers = o.recognizers;
  if (o.far) c.far = *o.far;
  if (o.method) c.method = advdiff::parse_method(*o.method);
  if (o.steps) c.attack.steps = *o.steps;
  if (o.strength) c.attack.strength = *o.strength;
  if (o.mask) c.mask.mode = advdiff::parse_mask_mode(*o.mask);
  if (o.constant_strength) c.attack.constant_strength = true;
  if (o.no_mask) c.attack.no_mask = true;
  if (o.trajectory) c.attack.log_trajectory = true;
  if (o.eps_bound) c.eps_bound = *o.eps_bound;
  if (o.step_size) c.step_size = *o.step_size;
  if (o.n_iter) c.n_iter = *o.n_iter;
  if (o.momentum) c.momentum_decay = *o.momentum;
  if (o.n_sources) c.n_sources = *o.n_sources;
  if (o.n_targets) c.n_targets = *o.n_targets;
  if (!o.black_box.empty()) c.black_box = o.black_box;
  if (o.n_identities) c.dataset.n_identities = *o.n_identities;
  if (o.images_per_identity) c.dataset.images_per_identity = *o.images_per_identity;
  if (o.eval_identities) c.dataset.eval_identities = *o.eval_identities;
  if (o.dataset_seed) c.dataset.seed = *o.dataset_seed;
  if (o.codec_steps) c.codec_train.steps = *o.codec_steps;
  if (o.diffusion_steps) c.diffusion_train.steps = *o.diffusion_steps;
  if (o.recognizer_steps) c.recognizer_train.steps = *o.recognizer_steps;
  return c;
}

void print_report(const advdiff::MetricsReport& r) {
  std::printf("%-14s bb=%-15s white_asr=%.3f", r.method.c_str(), r.black_box_model.c_str(), r.white_box_asr);
  if (!r.black_box_model.empty()) std::printf(" bb_asr=%.3f", r.asr_per_model.at(r.black_box_model));
  std::printf(" psnr=%.2f ssim=%.3f fd=%.4g n=%d failed=%d\n", r.psnr_mean, r.ssim_mean, r.frechet_distance,
              r.n_samples, r.n_failed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial latent-diffusion identity attacks at desk scale"};
  app.require_subcommand(1);
  Overrides o;
  std::string label;
  std::string parameter = "T";
  std::vector<double> grid;

  auto* gen = app.add_subcommand("gen-data", "Render the synthetic face dataset");
  gen->add_option("--n-identities", o.n_identities, "Identities to render");
  gen->add_option("--images-per-identity", o.images_per_identity, "Images per identity");
  gen->add_option("--eval-identities", o.eval_identities, "Identities held out for evaluation");
  gen->add_option("--dataset-seed", o.dataset_seed, "Renderer seed");
  auto* codec = app.add_subcommand("train-codec", "Train the image autoencoder");
  codec->add_option("--codec-steps", o.codec_steps, "Optimisation steps");
  auto* diff = app.add_subcommand("train-diffusion", "Train the conditional noise predictor");
  diff->add_option("--diffusion-steps", o.diffusion_steps, "Optimisation steps");
  auto* recs = app.add_subcommand("train-recognizers", "Train and calibrate the four recognizers");
  recs->add_option("--recognizer-steps", o.recognizer_steps, "Optimisation steps per recognizer");
  auto* attack = app.add_subcommand("attack", "Run the configured method on every leave-one-out split");
  attack->add_option("--label", label, "Output label (default: method name)");
  auto* evaluate = app.add_subcommand("evaluate", "Recompute reports from stored attack outputs");
  evaluate->add_option("--label", label, "Label of a previous attack run (default: method name)");
  auto* sweep = app.add_subcommand("sweep", "Sweep T or s and plot ASR / PSNR");
  sweep->add_option("--param", parameter, "T or s")->check(CLI::IsMember({"T", "s"}));
  sweep->add_option("--grid", grid, "Grid values (default from config)")->delimiter(',');
  auto* ablation = app.add_subcommand("ablation", "Full method vs constant strength vs no mask");

  for (CLI::App* sub : {gen, codec, diff, recs, attack, evaluate, sweep, ablation}) add_shared(*sub, o);
  for (CLI::App* sub : {attack, evaluate, sweep, ablation}) add_attack_flags(*sub, o);

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = resolve(o);
    std::filesystem::create_directories(cfg.run_dir);
    advdiff::write_json(cfg.run_dir / "config.json", cfg.to_json());

    if (gen->parsed()) {
      const auto data = advdiff::stage_generate_data(cfg);
      std::printf("dataset: %zu train / %zu eval images\n", data.train.size(), data.eval.size());
    } else if (codec->parsed()) {
      const auto r = advdiff::stage_train_codec(cfg);
      std::printf("codec: validation PSNR %.2f dB\n", r.val_psnr);
    } else if (diff->parsed()) {
      const auto r = advdiff::stage_train_diffusion(cfg);
      std::printf("diffusion: validation loss %.4f -> %.4f\n", r.initial_val_loss, r.final_val_loss);
    } else if (recs->parsed()) {
      for (const auto& s : advdiff::stage_train_recognizers(cfg))
        std::printf("%-15s tau=%.4f verification_accuracy=%.3f\n", s.name.c_str(), s.tau, s.verification_accuracy);
    } else if (attack->parsed()) {
      for (const auto& r : advdiff::run_attack_experiment(cfg, label).reports) print_report(r);
    } else if (evaluate->parsed()) {
      const std::string stored = label.empty() ? advdiff::method_name(cfg.method) : label;
      for (const auto& r : advdiff::evaluate_stored(cfg, stored)) print_report(r);
    } else if (sweep->parsed()) {
      if (grid.empty()) {
        if (parameter == "T")
          grid.assign(cfg.sweep_steps.begin(), cfg.sweep_steps.end());
        else
          grid = cfg.sweep_strengths;
      }
      for (const auto& r : advdiff::run_sweep(cfg, parameter, grid))
        std::printf("%s=%g white_asr=%.3f bb_asr=%.3f psnr=%.2f ssim=%.3f fd=%.4g\n", parameter.c_str(), r.value,
                    r.white_box_asr, r.black_box_asr, r.psnr, r.ssim, r.frechet_distance);
    } else if (ablation->parsed()) {
      for (const auto& r : advdiff::run_ablation(cfg))
        std::printf("%-18s white_asr=%.3f bb_asr=%.3f psnr=%.2f ssim=%.3f fd=%.4g\n", r.variant.c_str(),
                    r.white_box_asr, r.black_box_asr, r.psnr, r.ssim, r.frechet_distance);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
