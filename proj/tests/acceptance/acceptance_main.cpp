// Acceptance run: trains the toy pipeline (or reuses a matching one), checks
// the training gates, then prints one PASS/FAIL line per criterion 1-10.
// Exit status is nonzero if any gate or criterion fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "advdiff/experiment.hpp"
#include "advdiff/io.hpp"
#include "test_support.hpp"

namespace {

namespace fs = std::filesystem;
using namespace advdiff;
using nlohmann::json;

// Tolerances and budgets.
constexpr double kRoundTripTol = 1e-5;
constexpr int kMonteCarloDraws = 10000;
constexpr double kMonteCarloSigmas = 3.0;
constexpr double kGradRelTol = 1e-3;
constexpr int kGradCoords = 10;
constexpr int kGradPairs = 5;
constexpr int kReductionPairs = 10;
constexpr double kImprovedFraction = 0.9;
constexpr double kFdSelfTol = 1e-6;
constexpr double kFdShiftTol = 0.05;
constexpr double kBudgetTol = 1e-12;
constexpr double kCodecPsnrGate = 25.0;
constexpr double kRecognizerAccuracyGate = 0.9;
constexpr double kBudgetC1 = 60.0;
constexpr double kBudgetC2 = 120.0;
constexpr double kBudgetC4 = 900.0;
const std::vector<double> kTGrid = {10, 25, 45};
const std::string kAblationTarget = "ir152_toy";

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

class Reporter {
 public:
  bool all_pass() const { return ok_; }

  void gate(const std::string& name, bool pass, const std::string& detail) {
    std::printf("GATE %-26s %s  %s\n", name.c_str(), pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    ok_ = ok_ && pass;
    log_.push_back({{"gate", name}, {"pass", pass}, {"detail", detail}});
  }

  void criterion(int id, const std::string& name, double budget, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    std::string timing = fmt("%.1fs", secs);
    if (budget > 0.0) {
      timing += fmt(" / budget %.0fs", budget);
      if (secs > budget) {
        o.pass = false;
        o.detail += "; over time budget";
      }
    }
    std::printf("CRITERION %2d %-24s %s  %s  [%s]\n", id, name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                timing.c_str());
    std::fflush(stdout);
    ok_ = ok_ && o.pass;
    log_.push_back({{"criterion", id}, {"name", name}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", secs}});
  }

  const json& log() const { return log_; }

 private:
  bool ok_ = true;
  json log_ = json::array();
};

// eps that reproduces z0 exactly from any z_t.
class NoiseOracle final : public EpsilonPredictor {
 public:
  NoiseOracle(Tensor z0, const NoiseSchedule& sched) : z0_(std::move(z0)), sched_(sched) {}
  Tensor predict(const Tensor& z_t, int t, const Tensor&) const override {
    const double a = std::sqrt(sched_.alpha_bar(t)), b = std::sqrt(1.0 - sched_.alpha_bar(t));
    Tensor eps(z_t.shape());
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (z_t[i] - a * z0_[i]) / b;
    return eps;
  }

 private:
  Tensor z0_;
  const NoiseSchedule& sched_;
};

// --------------------------------------------------------------------------

bool same_pixels(const ImageSample& a, const ImageSample& b) {
  return a.pixels.shape() == b.pixels.shape() &&
         std::equal(a.pixels.data().begin(), a.pixels.data().end(), b.pixels.data().begin());
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

double mean_white(const std::vector<MetricsReport>& reports, const std::string& method) {
  std::vector<double> v;
  for (const auto& r : reports)
    if (r.method == method) v.push_back(r.white_box_asr);
  return mean_of(v);
}

double mean_black(const std::vector<MetricsReport>& reports, const std::string& method) {
  std::vector<double> v;
  for (const auto& r : reports)
    if (r.method == method) v.push_back(r.asr_per_model.at(r.black_box_model));
  return mean_of(v);
}

std::vector<std::string> white_names(const ExperimentConfig& cfg, const std::string& bb) {
  std::vector<std::string> out;
  for (const auto& r : cfg.recognizers)
    if (r != bb) out.push_back(r);
  return out;
}

bool checkpoints_match(const ExperimentConfig& cfg, const fs::path& stamp) {
  if (!fs::exists(stamp)) return false;
  try {
    return read_json(stamp).value("fingerprint", "") == cfg.fingerprint();
  } catch (const std::exception&) {
    return false;
  }
}

// --------------------------------------------------------------------------
// Criteria that need no trained models.

Outcome diffusion_oracles() {
  const NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  const Shape shape = {4, 8, 8};
  double worst_round_trip = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Tensor z0 = testing::random_tensor(shape, seed);
    const NoiseOracle oracle(z0, sched);
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto draw = [&] {
      Tensor t(shape);
      for (double& v : t.data()) v = normal(rng);
      return t;
    };
    LatentCode z = forward_diffuse({z0, 0}, sched.steps(), draw(), sched);
    for (int t = sched.steps(); t >= 1; --t) z = reverse_step(z, t, {Tensor(shape), 0}, oracle, sched, draw());
    worst_round_trip = std::max(worst_round_trip, (z.data - z0).max_abs());
  }

  double worst_z = 0.0;  // largest deviation in units of its standard error
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const double z : {0.0, 1.5}) {
    for (const int t : {1, 10, 25, 50}) {
      const LatentCode z0{Tensor({1}, z), 0};
      double sum = 0.0, sq = 0.0;
      for (int k = 0; k < kMonteCarloDraws; ++k) {
        const double v = forward_diffuse(z0, t, Tensor({1}, normal(rng)), sched).data[0];
        sum += v;
        sq += v * v;
      }
      const double n = kMonteCarloDraws;
      const double mean = sum / n, var = sq / n - mean * mean;
      const double want_mean = std::sqrt(sched.alpha_bar(t)) * z, want_var = 1.0 - sched.alpha_bar(t);
      worst_z = std::max(worst_z, std::abs(mean - want_mean) / std::sqrt(want_var / n));
      worst_z = std::max(worst_z, std::abs(var - want_var) / (want_var * std::sqrt(2.0 / (n - 1))));
    }
  }
  std::ostringstream d;
  d << "round-trip max|dz0|=" << worst_round_trip << " (tol " << kRoundTripTol << "), worst marginal deviation "
    << fmt("%.2f", worst_z) << " SE (tol " << kMonteCarloSigmas << ")";
  return {worst_round_trip <= kRoundTripTol && worst_z <= kMonteCarloSigmas, d.str()};
}

FeatureSet gaussian_set(int n, int d, double shift, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  FeatureSet out(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(d)));
  for (auto& row : out)
    for (double& v : row) v = normal(rng) + shift;
  return out;
}

Outcome metric_sanity(const Models& models, const Dataset& data) {
  const ImageSample& a = data.eval.front();
  const double p = psnr(a, a), s = ssim(a, a);
  const FeatureSet x = gaussian_set(64, 16, 0.3, 6);
  const double fd_self = frechet_distance(x, x);
  const double fd_shift = frechet_distance(gaussian_set(10000, 1, 0.0, 7), gaussian_set(10000, 1, 1.0, 8));

  // 10 hand-built pairs: 5 genuine (same identity), 5 impostors.
  const Recognizer& r = models.recognizers.front();
  std::vector<AdversarialPair> pairs;
  for (std::size_t i = 0; i < 5; ++i) {
    pairs.push_back({data.eval[i], data.eval[i + 1]});
    pairs.push_back({data.eval[i], data.eval[data.eval.size() - 1 - i]});
  }
  int count = 0;
  for (const auto& pr : pairs) {
    const auto ea = r.embed(pr.adversarial), eb = r.embed(pr.target);
    double dot = 0.0;
    for (std::size_t k = 0; k < ea.size(); ++k) dot += ea[k] * eb[k];
    count += dot > r.threshold()->tau;
  }
  const double asr_value = asr(pairs, r);
  const bool ok = p == kPsnrCapDb && std::abs(s - 1.0) <= 1e-12 && std::abs(fd_self) <= kFdSelfTol &&
                  std::abs(fd_shift - 1.0) <= kFdShiftTol && asr_value == count / 10.0;
  std::ostringstream d;
  d << "PSNR(a,a)=" << p << " SSIM(a,a)=" << s << " FD(X,X)=" << fd_self << " FD(1-D shift)=" << fmt("%.4f", fd_shift)
    << " ASR=" << asr_value << " vs count " << count << "/10";
  return {ok, d.str()};
}

Outcome baseline_invariants(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                            const std::vector<AttackPair>& pairs) {
  std::vector<const Recognizer*> white;
  for (const auto& n : white_names(cfg, cfg.recognizers.back())) white.push_back(&models.recognizer(n));
  double worst_excess = -1.0;
  bool pgd1_equals_fgsm = true, mi0_equals_pgd = true;
  const std::size_t n = std::min<std::size_t>(pairs.size(), 10);
  for (std::size_t i = 0; i < n; ++i) {
    const ImageSample& src = data.eval.at(pairs[i].source);
    const ImageSample& tgt = data.eval.at(pairs[i].target);
    const ImageSample f = fgsm_attack(src, tgt, white, cfg.eps_bound);
    const ImageSample p = pgd_attack(src, tgt, white, cfg.eps_bound, cfg.step_size, cfg.n_iter);
    const ImageSample m = mifgsm_attack(src, tgt, white, cfg.eps_bound, cfg.step_size, cfg.n_iter, cfg.momentum_decay);
    for (const ImageSample* out : {&f, &p, &m}) {
      for (std::size_t k = 0; k < src.pixels.size(); ++k) {
        worst_excess = std::max(worst_excess, std::abs(out->pixels[k] - src.pixels[k]) - cfg.eps_bound);
        if (out->pixels[k] < 0.0 || out->pixels[k] > 1.0) worst_excess = std::max(worst_excess, 1.0);
      }
    }
    pgd1_equals_fgsm = pgd1_equals_fgsm && same_pixels(pgd_attack(src, tgt, white, cfg.eps_bound, cfg.eps_bound, 1), f);
    mi0_equals_pgd = mi0_equals_pgd && same_pixels(mifgsm_attack(src, tgt, white, cfg.eps_bound, cfg.step_size,
                                                                 cfg.n_iter, 0.0), p);
  }
  std::ostringstream d;
  d << n << " pairs: max(|x'-x| - eps)=" << worst_excess << ", PGD(n=1)==FGSM " << (pgd1_equals_fgsm ? "yes" : "no")
    << ", MI-FGSM(mu=0)==PGD " << (mi0_equals_pgd ? "yes" : "no");
  return {worst_excess <= kBudgetTol && pgd1_equals_fgsm && mi0_equals_pgd, d.str()};
}

// --------------------------------------------------------------------------
// Criteria on the trained pipeline.

Outcome reduction_gate(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                       const std::vector<AttackPair>& pairs) {
  const AttackModels am = models.attack_models();
  const MaskOracle oracle = make_mask_oracle(cfg.mask);
  int identical = 0;
  for (int i = 0; i < kReductionPairs; ++i) {
    const AttackPair& p = pairs.at(static_cast<std::size_t>(i));
    AttackConfig a = cfg.attack;
    a.strength = 0.0;
    a.seed = p.seed;
    a.white_box = white_names(cfg, cfg.recognizers.back());
    const AttackResult adv = adv_diffusion_attack(data.eval.at(p.source), data.eval.at(p.target), am, oracle, a);
    const ImageSample inp = conditioned_inpainting(data.eval.at(p.source), am, oracle, a);
    identical += same_pixels(adv.adversarial, inp);
  }
  return {identical == kReductionPairs,
          std::to_string(identical) + "/" + std::to_string(kReductionPairs) + " pairs bit-identical at s=0, T=" +
              std::to_string(cfg.attack.steps)};
}

Outcome gradient_check(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                       const std::vector<AttackPair>& pairs) {
  std::vector<const Recognizer*> white;
  for (const auto& n : white_names(cfg, cfg.recognizers.back())) white.push_back(&models.recognizer(n));
  double worst = 0.0;
  for (int i = 0; i < kGradPairs; ++i) {
    const AttackPair& p = pairs.at(static_cast<std::size_t>(i) * pairs.size() / kGradPairs);
    const LatentCode z0 = encode(models.codec, data.eval.at(p.source));
    const auto targets = target_embeddings(white, data.eval.at(p.target));
    const LatentGradient g = adversarial_gradient(z0, targets, white, models.codec);
    auto f = [&](const Tensor& z) { return adversarial_gradient({z, 0}, targets, white, models.codec).similarity; };
    worst = std::max(worst, testing::max_fd_error(z0.data, g.gradient, f, kGradCoords, p.seed));
  }
  return {worst <= kGradRelTol, fmt("worst relative error %.3g", worst) + fmt(" (tol %.0e) over ", kGradRelTol) +
                                    std::to_string(kGradCoords) + " coords x " + std::to_string(kGradPairs) + " pairs"};
}

struct AttackRuns {
  ExperimentResult adv;
  std::vector<MethodRun> baseline;  // s = 0 per split
  double seconds = 0.0;
};

Outcome attack_efficacy(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                        const std::vector<AttackPair>& pairs, AttackRuns& runs) {
  const auto t0 = std::chrono::steady_clock::now();
  runs.adv = run_attack_experiment(cfg, models, data, "adv_diffusion");
  int improved = 0, total = 0;
  for (const auto& run : runs.adv.runs) {
    AttackConfig a = cfg.attack;
    a.strength = 0.0;
    a.white_box = white_names(cfg, run.black_box);
    runs.baseline.push_back(run_method(cfg, models, data, pairs, Method::adv_diffusion, a, run.black_box));
    const auto s_adv = pair_similarities(models, data, pairs, run, a.white_box);
    const auto s_base = pair_similarities(models, data, pairs, runs.baseline.back(), a.white_box);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      ++total;
      improved += s_adv[i] > s_base[i];
    }
  }
  runs.seconds = seconds_since(t0);
  const double frac = static_cast<double>(improved) / total;
  const double white = mean_white(runs.adv.reports, "adv_diffusion");
  const double clean = mean_white(runs.adv.reports, "clean");
  std::ostringstream d;
  d << improved << "/" << total << " (pair, split) similarities above s=0 (" << fmt("%.3f", frac) << ", need "
    << kImprovedFraction << "); white-box ASR " << fmt("%.3f", white) << " vs clean " << fmt("%.3f", clean)
    << "; s=" << cfg.attack.strength << " T=" << cfg.attack.steps;
  return {frac >= kImprovedFraction && white > clean, d.str()};
}

Outcome transfer_direction(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                           const AttackRuns& runs) {
  ExperimentConfig c = cfg;
  c.method = Method::fgsm;
  const ExperimentResult fgsm = run_attack_experiment(c, models, data, "fgsm");
  const double adv_bb = mean_black(runs.adv.reports, "adv_diffusion");
  const double fgsm_bb = mean_black(fgsm.reports, "fgsm");
  std::ostringstream d;
  d << "black-box ASR adv_diffusion " << fmt("%.3f", adv_bb) << " vs FGSM(eps=" << fmt("%.4f", cfg.eps_bound) << ") "
    << fmt("%.3f", fgsm_bb) << " (mean over leave-one-out splits)";
  return {adv_bb >= fgsm_bb, d.str()};
}

Outcome ablation_directions(const ExperimentConfig& cfg, const Models& models, const Dataset& data) {
  ExperimentConfig c = cfg;
  c.black_box = {kAblationTarget};
  const auto rows = run_ablation(c, models, data);
  const AblationRow& full = rows.at(0);
  const AblationRow& cs = rows.at(1);
  const AblationRow& nm = rows.at(2);
  std::ostringstream d;
  d << "target " << kAblationTarget << ": ASR full/const/no-mask " << fmt("%.3f", full.black_box_asr) << "/"
    << fmt("%.3f", cs.black_box_asr) << "/" << fmt("%.3f", nm.black_box_asr) << ", PSNR "
    << fmt("%.2f", full.psnr) << "/" << fmt("%.2f", cs.psnr) << "/" << fmt("%.2f", nm.psnr) << " dB";
  return {cs.black_box_asr >= full.black_box_asr && cs.psnr <= full.psnr && nm.psnr <= full.psnr, d.str()};
}

Outcome region_stealth(const Models& models, const Dataset& data, const std::vector<AttackPair>& pairs,
                       const AttackRuns& runs) {
  std::vector<double> in, out;
  for (const auto& run : runs.adv.runs) {
    const RegionChange rc = region_change(data, pairs, run);
    in.push_back(rc.sensitive);
    out.push_back(rc.agnostic);
  }
  // Reported only: the same measure on plain codec reconstructions, which
  // bounds how still any decoded image can keep the fine facial features.
  MethodRun recon;
  for (const auto& p : pairs)
    recon.outputs.push_back(decode(models.codec, encode(models.codec, data.eval.at(p.source))));
  const RegionChange floor = region_change(data, pairs, recon);
  const double s = mean_of(in), a = mean_of(out);
  return {s <= a, "mean |dx| sensitive " + fmt("%.4f", s) + " vs agnostic " + fmt("%.4f", a) +
                      "; codec reconstruction alone " + fmt("%.4f", floor.sensitive) + " vs " +
                      fmt("%.4f", floor.agnostic)};
}

Outcome t_sweep(const ExperimentConfig& cfg, const Models& models, const Dataset& data) {
  const auto rows = run_sweep(cfg, models, data, "T", kTGrid);
  std::vector<double> t, asr_values;
  std::ostringstream d;
  d << "white-box ASR";
  for (const auto& r : rows) {
    t.push_back(r.value);
    asr_values.push_back(r.white_box_asr);
    d << " T=" << r.value << ":" << fmt("%.3f", r.white_box_asr);
  }
  const double rho = spearman(t, asr_values);
  // A constant ASR column has no rank order; that is not a decreasing trend.
  const bool constant = std::isnan(rho);
  d << "; spearman " << (constant ? std::string("undefined (constant ASR)") : fmt("%.3f", rho));
  return {constant || rho >= 0.0, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run for the toy pipeline"};
  std::string run_dir = "acceptance_run", config_path;
  bool reuse = false;
  app.add_option("--run-dir", run_dir, "Run directory (checkpoints, reports, images)");
  app.add_option("--config", config_path, "Experiment config overriding the defaults")->check(CLI::ExistingFile);
  app.add_flag("--reuse", reuse, "Reuse checkpoints when their config fingerprint matches");
  CLI11_PARSE(app, argc, argv);

  ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_path);
  cfg.run_dir = run_dir;
  const auto started = std::chrono::steady_clock::now();
  Reporter rep;

  // Model-free criteria first so they report even if training fails.
  rep.criterion(1, "diffusion-oracles", kBudgetC1, diffusion_oracles);

  const fs::path stamp = cfg.checkpoints() / "acceptance_stamp.json";
  try {
    if (reuse && checkpoints_match(cfg, stamp)) {
      std::printf("reusing checkpoints in %s\n", cfg.checkpoints().string().c_str());
    } else {
      std::printf("training pipeline into %s\n", cfg.checkpoints().string().c_str());
      std::fflush(stdout);
      const auto t0 = std::chrono::steady_clock::now();
      stage_generate_data(cfg);
      stage_train_codec(cfg);
      stage_train_diffusion(cfg);
      stage_train_recognizers(cfg);
      write_json(stamp, {{"fingerprint", cfg.fingerprint()}});
      std::printf("training took %.0fs\n", seconds_since(t0));
    }
  } catch (const std::exception& e) {
    std::printf("training failed: %s\n", e.what());
    return 1;
  }
  write_json(cfg.run_dir / "config.json", cfg.to_json());

  const Dataset data = load_dataset(cfg.checkpoints() / "dataset");
  const Models models = load_models(cfg);
  const auto pairs = select_pairs(data, cfg.n_sources, cfg.n_targets, cfg.root_seed);

  const double codec_psnr = reconstruction_psnr(models.codec, data.eval);
  rep.gate("codec-heldout-psnr", codec_psnr >= kCodecPsnrGate,
           fmt("%.2f dB", codec_psnr) + fmt(" (need %.0f)", kCodecPsnrGate));
  const json diff_meta = read_json(cfg.checkpoints() / "diffusion.json");
  const double v0 = diff_meta.at("initial_val_loss"), v1 = diff_meta.at("final_val_loss");
  rep.gate("diffusion-val-loss", v1 < v0, fmt("%.4f", v0) + fmt(" -> %.4f", v1));
  for (const auto& r : read_json(cfg.run_dir / "reports" / "recognizers.json")) {
    const double acc = r.at("verification_accuracy");
    rep.gate("recognizer-" + r.at("name").get<std::string>(), acc >= kRecognizerAccuracyGate,
             fmt("accuracy %.3f", acc) + fmt(", tau %.4f", r.at("tau").get<double>()));
  }

  AttackRuns runs;
  rep.criterion(2, "reduction-s0", kBudgetC2, [&] { return reduction_gate(cfg, models, data, pairs); });
  rep.criterion(3, "gradient-fd", 0.0, [&] { return gradient_check(cfg, models, data, pairs); });
  rep.criterion(4, "white-box-efficacy", kBudgetC4, [&] { return attack_efficacy(cfg, models, data, pairs, runs); });
  rep.criterion(5, "transfer-vs-fgsm", 0.0, [&] { return transfer_direction(cfg, models, data, runs); });
  rep.criterion(6, "ablation-directions", 0.0, [&] { return ablation_directions(cfg, models, data); });
  rep.criterion(7, "region-stealth", 0.0, [&] { return region_stealth(models, data, pairs, runs); });
  rep.criterion(8, "t-sweep-direction", 0.0, [&] { return t_sweep(cfg, models, data); });
  rep.criterion(9, "metric-sanity", 0.0, [&] { return metric_sanity(models, data); });
  rep.criterion(10, "baseline-invariants", 0.0, [&] { return baseline_invariants(cfg, models, data, pairs); });

  fs::create_directories(cfg.run_dir / "reports");
  write_json(cfg.run_dir / "reports" / "acceptance.json",
             {{"results", rep.log()}, {"all_pass", rep.all_pass()}, {"seconds", seconds_since(started)}});
  std::printf("acceptance %s in %.0fs\n", rep.all_pass() ? "PASSED" : "FAILED", seconds_since(started));
  return rep.all_pass() ? 0 : 1;
}
