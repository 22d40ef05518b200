#include "advdiff/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "advdiff/io.hpp"
#include "advdiff/plot.hpp"

namespace advdiff {

namespace fs = std::filesystem;
using nlohmann::json;

Method parse_method(const std::string& name) {
  if (name == "clean") return Method::clean;
  if (name == "inpaint") return Method::inpaint;
  if (name == "adv_diffusion") return Method::adv_diffusion;
  if (name == "fgsm") return Method::fgsm;
  if (name == "pgd") return Method::pgd;
  if (name == "mifgsm") return Method::mifgsm;
  throw std::invalid_argument("unknown method: " + name);
}

std::string method_name(Method m) {
  switch (m) {
    case Method::clean: return "clean";
    case Method::inpaint: return "inpaint";
    case Method::adv_diffusion: return "adv_diffusion";
    case Method::fgsm: return "fgsm";
    case Method::pgd: return "pgd";
    case Method::mifgsm: return "mifgsm";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Config serialisation

namespace {

json dataset_json(const DatasetSpec& d) {
  return {{"n_identities", d.n_identities},
          {"images_per_identity", d.images_per_identity},
          {"eval_identities", d.eval_identities},
          {"seed", d.seed},
          {"image_size", d.image_size}};
}

DatasetSpec dataset_from(const json& j, DatasetSpec d) {
  d.n_identities = j.value("n_identities", d.n_identities);
  d.images_per_identity = j.value("images_per_identity", d.images_per_identity);
  d.eval_identities = j.value("eval_identities", d.eval_identities);
  d.seed = j.value("seed", d.seed);
  d.image_size = j.value("image_size", d.image_size);
  return d;
}

json codec_json(const CodecTrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"val_fraction", c.val_fraction},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"latent_channels", c.codec.latent_channels},
          {"width", c.codec.width},
          {"fine_width", c.codec.fine_width}};
}

CodecTrainConfig codec_from(const json& j, CodecTrainConfig c) {
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.codec.latent_channels = j.value("latent_channels", c.codec.latent_channels);
  c.codec.width = j.value("width", c.codec.width);
  c.codec.fine_width = j.value("fine_width", c.codec.fine_width);
  return c;
}

json diffusion_json(const DiffusionTrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"val_fraction", c.val_fraction},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"width", c.model.width},
          {"blocks", c.model.blocks},
          {"time_dim", c.model.time_dim}};
}

DiffusionTrainConfig diffusion_from(const json& j, DiffusionTrainConfig c) {
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.model.width = j.value("width", c.model.width);
  c.model.blocks = j.value("blocks", c.model.blocks);
  c.model.time_dim = j.value("time_dim", c.model.time_dim);
  return c;
}

json recognizer_json(const RecognizerTrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"logit_scale", c.logit_scale},
          {"margin", c.margin},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed}};
}

RecognizerTrainConfig recognizer_from(const json& j, RecognizerTrainConfig c) {
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.logit_scale = j.value("logit_scale", c.logit_scale);
  c.margin = j.value("margin", c.margin);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  return c;
}

json attack_json(const AttackConfig& a) {
  return {{"steps", a.steps},
          {"strength", a.strength},
          {"constant_strength", a.constant_strength},
          {"no_mask", a.no_mask},
          {"seed", a.seed},
          {"log_trajectory", a.log_trajectory}};
}

AttackConfig attack_from(const json& j, AttackConfig a) {
  a.steps = j.value("steps", a.steps);
  a.strength = j.value("strength", a.strength);
  a.constant_strength = j.value("constant_strength", a.constant_strength);
  a.no_mask = j.value("no_mask", a.no_mask);
  a.seed = j.value("seed", a.seed);
  a.log_trajectory = j.value("log_trajectory", a.log_trajectory);
  return a;
}

}  // namespace

fs::path ExperimentConfig::checkpoints() const {
  return checkpoint_dir.empty() ? run_dir / "checkpoints" : checkpoint_dir;
}

std::vector<std::string> ExperimentConfig::black_box_models() const {
  if (black_box.empty()) return recognizers;
  for (const auto& b : black_box) {
    if (std::find(recognizers.begin(), recognizers.end(), b) == recognizers.end())
      throw std::invalid_argument("black-box model " + b + " is not among the recognizers");
  }
  return black_box;
}

json ExperimentConfig::to_json() const {
  return {{"run_dir", run_dir.string()},
          {"checkpoint_dir", checkpoint_dir.string()},
          {"dataset", dataset_json(dataset)},
          {"codec_train", codec_json(codec_train)},
          {"diffusion_train", diffusion_json(diffusion_train)},
          {"schedule", {{"steps", schedule_steps}, {"beta_start", beta_start}, {"beta_end", beta_end}}},
          {"recognizer_train", recognizer_json(recognizer_train)},
          {"recognizers", recognizers},
          {"far", far},
          {"calibration_pairs", calibration_pairs},
          {"verification_pairs", verification_pairs},
          {"method", method_name(method)},
          {"attack", attack_json(attack)},
          {"mask",
           {{"mode", mask_mode_name(mask.mode)},
            {"ellipse_semi_x", mask.ellipse_semi_x},
            {"ellipse_semi_y", mask.ellipse_semi_y}}},
          {"baselines",
           {{"eps_bound", eps_bound}, {"step_size", step_size}, {"n_iter", n_iter}, {"momentum_decay", momentum_decay}}},
          {"n_sources", n_sources},
          {"n_targets", n_targets},
          {"black_box", black_box},
          {"sweep", {{"T", sweep_steps}, {"s", sweep_strengths}}},
          {"root_seed", root_seed},
          {"workers", workers}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  c.run_dir = j.value("run_dir", c.run_dir.string());
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir.string());
  if (j.contains("dataset")) c.dataset = dataset_from(j["dataset"], c.dataset);
  if (j.contains("codec_train")) c.codec_train = codec_from(j["codec_train"], c.codec_train);
  if (j.contains("diffusion_train")) c.diffusion_train = diffusion_from(j["diffusion_train"], c.diffusion_train);
  if (j.contains("schedule")) {
    const json& s = j["schedule"];
    c.schedule_steps = s.value("steps", c.schedule_steps);
    c.beta_start = s.value("beta_start", c.beta_start);
    c.beta_end = s.value("beta_end", c.beta_end);
  }
  if (j.contains("recognizer_train")) c.recognizer_train = recognizer_from(j["recognizer_train"], c.recognizer_train);
  c.recognizers = j.value("recognizers", c.recognizers);
  c.far = j.value("far", c.far);
  c.calibration_pairs = j.value("calibration_pairs", c.calibration_pairs);
  c.verification_pairs = j.value("verification_pairs", c.verification_pairs);
  if (j.contains("method")) c.method = parse_method(j["method"]);
  if (j.contains("attack")) c.attack = attack_from(j["attack"], c.attack);
  if (j.contains("mask")) {
    const json& m = j["mask"];
    if (m.contains("mode")) c.mask.mode = parse_mask_mode(m["mode"]);
    c.mask.ellipse_semi_x = m.value("ellipse_semi_x", c.mask.ellipse_semi_x);
    c.mask.ellipse_semi_y = m.value("ellipse_semi_y", c.mask.ellipse_semi_y);
  }
  if (j.contains("baselines")) {
    const json& b = j["baselines"];
    c.eps_bound = b.value("eps_bound", c.eps_bound);
    c.step_size = b.value("step_size", c.step_size);
    c.n_iter = b.value("n_iter", c.n_iter);
    c.momentum_decay = b.value("momentum_decay", c.momentum_decay);
  }
  c.n_sources = j.value("n_sources", c.n_sources);
  c.n_targets = j.value("n_targets", c.n_targets);
  c.black_box = j.value("black_box", c.black_box);
  if (j.contains("sweep")) {
    c.sweep_steps = j["sweep"].value("T", c.sweep_steps);
    c.sweep_strengths = j["sweep"].value("s", c.sweep_strengths);
  }
  c.root_seed = j.value("root_seed", c.root_seed);
  c.workers = j.value("workers", c.workers);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return from_json(read_json(path)); }

std::string ExperimentConfig::fingerprint() const {
  json j = to_json();
  j.erase("run_dir");
  j.erase("checkpoint_dir");
  j.erase("workers");
  return advdiff::fingerprint(j.dump());
}

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  std::uint64_t z = root + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Training stages

namespace {

fs::path dataset_stem(const ExperimentConfig& cfg) { return cfg.checkpoints() / "dataset"; }
fs::path codec_stem(const ExperimentConfig& cfg) { return cfg.checkpoints() / "codec"; }
fs::path diffusion_stem(const ExperimentConfig& cfg) { return cfg.checkpoints() / "diffusion"; }
fs::path recognizer_stem(const ExperimentConfig& cfg, const std::string& name) {
  return cfg.checkpoints() / ("recognizer_" + name);
}

void require_checkpoint(const fs::path& stem, const std::string& stage) {
  if (!fs::exists(with_suffix(stem, ".bin")) || !fs::exists(with_suffix(stem, ".json"))) {
    throw std::runtime_error("missing checkpoint " + stem.string() + " (run " + stage + " first)");
  }
}

Dataset load_data(const ExperimentConfig& cfg) {
  require_checkpoint(dataset_stem(cfg), "gen-data");
  return load_dataset(dataset_stem(cfg));
}

std::string pair_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%03d", id);
  return buf;
}

std::map<int, std::vector<std::size_t>> by_label(std::span<const ImageSample> images) {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].identity_label) throw std::invalid_argument("image " + std::to_string(i) + " has no identity label");
    out[*images[i].identity_label].push_back(i);
  }
  return out;
}

}  // namespace

Dataset stage_generate_data(const ExperimentConfig& cfg) {
  Dataset data = generate_dataset(cfg.dataset);
  fs::create_directories(cfg.checkpoints());
  save_dataset(dataset_stem(cfg), data);
  const fs::path images = cfg.run_dir / "images" / "dataset";
  const fs::path masks = cfg.run_dir / "masks" / "dataset";
  fs::create_directories(images);
  fs::create_directories(masks);
  const std::size_t n_preview = std::min<std::size_t>(8, data.train.size());
  for (std::size_t i = 0; i < n_preview; ++i) {
    const std::string name = "train_" + std::to_string(i) + ".png";
    write_png(images / name, data.train[i]);
    if (data.train[i].region_map) write_mask_png(masks / name, *data.train[i].region_map);
  }
  return data;
}

CodecTrainReport stage_train_codec(const ExperimentConfig& cfg) {
  const Dataset data = load_data(cfg);
  auto [codec, report] = train_codec(data.train, cfg.codec_train);
  save_codec(codec_stem(cfg), codec, cfg.codec_train.seed, report);
  return report;
}

std::vector<ConditionedLatent> conditioned_latents(const Codec& codec, std::span<const ImageSample> images,
                                                   const MaskOracleConfig& mask) {
  std::vector<ConditionedLatent> out;
  out.reserve(images.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t end = std::min(images.size(), start + kChunk);
    std::vector<ImageSample> masked;
    std::vector<const Tensor*> clean_ptrs, masked_ptrs;
    masked.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      masked.push_back(masked_source(images[i], parse_mask(images[i], mask)));
      clean_ptrs.push_back(&images[i].pixels);
    }
    for (const auto& m : masked) masked_ptrs.push_back(&m.pixels);
    const Tensor z = codec.encode_batch(stack(clean_ptrs));
    const Tensor c = codec.encode_batch(stack(masked_ptrs));
    for (std::size_t i = 0; i < end - start; ++i)
      out.push_back({unbatch(z, static_cast<int>(i)), unbatch(c, static_cast<int>(i))});
  }
  return out;
}

DiffusionTrainReport stage_train_diffusion(const ExperimentConfig& cfg) {
  const Dataset data = load_data(cfg);
  require_checkpoint(codec_stem(cfg), "train-codec");
  const Codec codec = load_codec(codec_stem(cfg));
  const auto latents = conditioned_latents(codec, data.train, cfg.mask);
  const NoiseSchedule sched = make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
  DiffusionTrainConfig tc = cfg.diffusion_train;
  tc.model.latent_channels = codec.config().latent_channels;
  tc.model.cond_channels = codec.config().latent_channels;
  auto [model, report] = train_epsilon_model(latents, sched, tc);
  save_diffusion(diffusion_stem(cfg), model, sched, tc.seed, report);
  return report;
}

std::vector<VerificationPair> impostor_pairs(std::span<const ImageSample> images, std::size_t n,
                                             std::uint64_t seed) {
  const auto groups = by_label(images);
  if (groups.size() < 2) throw std::invalid_argument("impostor pairs need at least two identities");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::vector<VerificationPair> out;
  out.reserve(n);
  while (out.size() < n) {
    const std::size_t a = pick(rng), b = pick(rng);
    if (images[a].identity_label == images[b].identity_label) continue;
    out.push_back({images[a], images[b], false});
  }
  return out;
}

std::vector<VerificationPair> verification_pairs(std::span<const ImageSample> images, std::size_t n,
                                                 std::uint64_t seed) {
  const auto groups = by_label(images);
  std::vector<const std::vector<std::size_t>*> usable;
  for (const auto& [label, idx] : groups)
    if (idx.size() >= 2) usable.push_back(&idx);
  if (usable.empty()) throw std::invalid_argument("genuine pairs need an identity with two images");
  std::mt19937_64 rng(seed);
  std::vector<VerificationPair> out = impostor_pairs(images, n - n / 2, derive_seed(seed, 1));
  std::uniform_int_distribution<std::size_t> pick_id(0, usable.size() - 1);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const auto& idx = *usable[pick_id(rng)];
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    out.push_back({images[idx[a]], images[idx[b]], true});
  }
  return out;
}

std::vector<RecognizerSummary> stage_train_recognizers(const ExperimentConfig& cfg) {
  const Dataset data = load_data(cfg);
  const auto calibration = impostor_pairs(data.eval, cfg.calibration_pairs, derive_seed(cfg.root_seed, 101));
  const auto verification = verification_pairs(data.eval, cfg.verification_pairs, derive_seed(cfg.root_seed, 102));
  std::vector<RecognizerSummary> out;
  const auto archs = default_architectures();
  for (std::size_t k = 0; k < cfg.recognizers.size(); ++k) {
    const std::string& name = cfg.recognizers[k];
    auto it = std::find_if(archs.begin(), archs.end(), [&](const RecognizerArch& a) { return a.name == name; });
    if (it == archs.end()) throw std::invalid_argument("unknown recognizer architecture " + name);
    RecognizerTrainConfig tc = cfg.recognizer_train;
    tc.seed = derive_seed(cfg.recognizer_train.seed, k);
    auto [rec, report] = train_recognizer(data.train, tc, *it);
    const Threshold th = calibrate_far_threshold(rec, calibration, cfg.far, derive_seed(cfg.root_seed, 101));
    const double acc = verification_accuracy(rec, verification, th.tau);
    save_recognizer(recognizer_stem(cfg, name), rec, tc.seed, acc);
    out.push_back({name, th.tau, acc, report.final_loss});
  }
  json summary = json::array();
  for (const auto& s : out)
    summary.push_back({{"name", s.name}, {"tau", s.tau}, {"far", cfg.far},
                       {"verification_accuracy", s.verification_accuracy}, {"final_loss", s.final_loss}});
  fs::create_directories(cfg.run_dir / "reports");
  write_json(cfg.run_dir / "reports" / "recognizers.json", summary);
  return out;
}

// ---------------------------------------------------------------------------
// Pairs and models

std::vector<AttackPair> select_pairs(const Dataset& data, int n_sources, int n_targets, std::uint64_t root_seed) {
  if (n_targets < 1) throw std::invalid_argument("need at least one target");
  if (n_sources < n_targets) throw std::invalid_argument("need at least as many sources as targets");
  const auto groups = by_label(data.eval);
  std::vector<int> labels;
  for (const auto& [label, idx] : groups) labels.push_back(label);
  if (labels.size() < static_cast<std::size_t>(n_targets) + 1)
    throw std::invalid_argument("eval split has too few identities for " + std::to_string(n_targets) + " targets");

  std::mt19937_64 rng(derive_seed(root_seed, 7));
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<std::size_t> targets;
  for (int g = 0; g < n_targets; ++g) {
    const auto& idx = groups.at(labels[static_cast<std::size_t>(g)]);
    targets.push_back(idx[std::uniform_int_distribution<std::size_t>(0, idx.size() - 1)(rng)]);
  }
  const std::vector<int> rest(labels.begin() + n_targets, labels.end());
  std::map<int, std::vector<std::size_t>> unused;
  for (int label : rest) {
    unused[label] = groups.at(label);
    std::shuffle(unused[label].begin(), unused[label].end(), rng);
  }
  std::vector<AttackPair> pairs;
  for (int i = 0; i < n_sources; ++i) {
    auto& pool = unused[rest[static_cast<std::size_t>(i) % rest.size()]];
    if (pool.empty()) throw std::invalid_argument("eval split has too few images for " + std::to_string(n_sources) + " sources");
    AttackPair p;
    p.id = i;
    p.source = pool.back();
    pool.pop_back();
    p.group = static_cast<int>(static_cast<long>(i) * n_targets / n_sources);
    p.target = targets[static_cast<std::size_t>(p.group)];
    p.seed = derive_seed(root_seed, 1000 + static_cast<std::uint64_t>(i));
    pairs.push_back(p);
  }
  return pairs;
}

std::vector<const Recognizer*> Models::pointers() const {
  std::vector<const Recognizer*> out;
  for (const auto& r : recognizers) out.push_back(&r);
  return out;
}

const Recognizer& Models::recognizer(const std::string& name) const {
  for (const auto& r : recognizers)
    if (r.name() == name) return r;
  throw std::invalid_argument("no recognizer named " + name);
}

AttackModels Models::attack_models() const {
  return AttackModels{&codec, &diffusion.model, &diffusion.schedule, pointers()};
}

Models load_models(const ExperimentConfig& cfg) {
  require_checkpoint(codec_stem(cfg), "train-codec");
  require_checkpoint(diffusion_stem(cfg), "train-diffusion");
  Models m{load_codec(codec_stem(cfg)), load_diffusion(diffusion_stem(cfg)), {}};
  for (const auto& name : cfg.recognizers) {
    require_checkpoint(recognizer_stem(cfg, name), "train-recognizers");
    m.recognizers.push_back(load_recognizer(recognizer_stem(cfg, name)));
    if (!m.recognizers.back().threshold()) throw std::runtime_error("recognizer " + name + " has no calibrated threshold");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Running methods

namespace {

template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  const std::size_t w = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < w; ++k) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

std::vector<std::string> white_box_for(const ExperimentConfig& cfg, const std::string& black_box) {
  std::vector<std::string> out;
  for (const auto& r : cfg.recognizers)
    if (r != black_box) out.push_back(r);
  if (out.empty()) throw std::invalid_argument("leave-one-out split leaves no white-box recognizer");
  return out;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

MethodRun run_method(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                     std::span<const AttackPair> pairs, Method method, const AttackConfig& attack,
                     const std::string& black_box) {
  MethodRun run;
  run.black_box = black_box;
  run.outputs.resize(pairs.size());
  run.errors.resize(pairs.size());
  run.trajectories.resize(pairs.size());
  const bool diffusion = method == Method::adv_diffusion || method == Method::inpaint;
  if (diffusion) run.masks.resize(pairs.size());

  std::vector<const Recognizer*> white;
  for (const auto& name : attack.white_box) white.push_back(&models.recognizer(name));
  if (!black_box.empty() && std::find(attack.white_box.begin(), attack.white_box.end(), black_box) != attack.white_box.end())
    throw std::invalid_argument("black-box model " + black_box + " is listed as white-box");
  const Recognizer* held_out = black_box.empty() ? nullptr : &models.recognizer(black_box);
  const std::uint64_t queries_before = held_out ? held_out->gradient_queries() : 0;

  const AttackModels am = models.attack_models();
  const MaskOracle oracle = make_mask_oracle(cfg.mask);
  parallel_for(pairs.size(), cfg.workers, [&](std::size_t i) {
    const AttackPair& p = pairs[i];
    const ImageSample& src = data.eval.at(p.source);
    const ImageSample& tgt = data.eval.at(p.target);
    AttackConfig a = attack;
    a.seed = p.seed;
    try {
      switch (method) {
        case Method::clean:
          run.outputs[i] = src;
          break;
        case Method::inpaint:
          run.outputs[i] = conditioned_inpainting(src, am, oracle, a);
          run.masks[i] = a.no_mask ? parse_mask(src, {MaskOracleConfig::Mode::none}) : oracle(src);
          break;
        case Method::adv_diffusion: {
          AttackResult r = adv_diffusion_attack(src, tgt, am, oracle, a);
          run.outputs[i] = std::move(r.adversarial);
          run.masks[i] = std::move(r.mask);
          run.trajectories[i] = std::move(r.trajectory);
          break;
        }
        case Method::fgsm:
          run.outputs[i] = fgsm_attack(src, tgt, white, cfg.eps_bound);
          break;
        case Method::pgd:
          run.outputs[i] = pgd_attack(src, tgt, white, cfg.eps_bound, cfg.step_size, cfg.n_iter);
          break;
        case Method::mifgsm:
          run.outputs[i] = mifgsm_attack(src, tgt, white, cfg.eps_bound, cfg.step_size, cfg.n_iter, cfg.momentum_decay);
          break;
      }
    } catch (const std::exception& e) {
      run.outputs[i].reset();
      run.errors[i] = e.what();
    }
  });

  if (held_out && held_out->gradient_queries() != queries_before) {
    throw std::logic_error("black-box recognizer " + black_box + " received gradient queries during its own run");
  }
  return run;
}

MetricsReport evaluate_run(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                           std::span<const AttackPair> pairs, const MethodRun& run, const std::string& method) {
  MetricsReport report;
  report.method = method;
  report.black_box_model = run.black_box;
  report.config_fingerprint = cfg.fingerprint();

  std::vector<AdversarialPair> adv;
  std::vector<double> psnrs, ssims;
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!run.outputs[i]) {
      ++report.n_failed;
      continue;
    }
    ok.push_back(i);
    const ImageSample& src = data.eval.at(pairs[i].source);
    adv.push_back({*run.outputs[i], data.eval.at(pairs[i].target)});
    psnrs.push_back(psnr(*run.outputs[i], src));
    ssims.push_back(ssim(*run.outputs[i], src));
  }
  report.n_samples = static_cast<int>(ok.size());
  if (ok.empty()) throw std::runtime_error(method + ": every pair failed under black box " + run.black_box);

  std::vector<double> white;
  for (const auto& r : models.recognizers) {
    const double a = asr(adv, r);
    report.asr_per_model[r.name()] = a;
    if (r.name() != run.black_box) white.push_back(a);
  }
  report.white_box_asr = mean(white);
  report.psnr_mean = mean(psnrs);
  report.ssim_mean = mean(ssims);

  const Recognizer& fd_model = run.black_box.empty() ? models.recognizers.back() : models.recognizer(run.black_box);
  if (ok.size() >= 2 * static_cast<std::size_t>(fd_model.embedding_dim())) {
    FeatureSet fa, fb;
    for (std::size_t i : ok) {
      fa.push_back(fd_model.features(*run.outputs[i]));
      fb.push_back(fd_model.features(data.eval.at(pairs[i].source)));
    }
    report.frechet_distance = frechet_distance(fa, fb);
  } else {
    report.frechet_distance = std::nan("");
  }
  report.validate();
  return report;
}

std::vector<double> pair_similarities(const Models& models, const Dataset& data, std::span<const AttackPair> pairs,
                                      const MethodRun& run, const std::vector<std::string>& names) {
  std::vector<double> out(pairs.size(), std::nan(""));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!run.outputs[i]) continue;
    double total = 0.0;
    for (const auto& name : names) {
      const Recognizer& r = models.recognizer(name);
      total += similarity(r.embed(*run.outputs[i]), r.embed(data.eval.at(pairs[i].target)));
    }
    out[i] = total / static_cast<double>(names.size());
  }
  return out;
}

RegionChange region_change(const Dataset& data, std::span<const AttackPair> pairs, const MethodRun& run) {
  std::vector<double> inside, outside;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!run.outputs[i]) continue;
    const ImageSample& src = data.eval.at(pairs[i].source);
    if (!src.region_map) throw std::invalid_argument("region_change needs ground-truth region maps");
    const Tensor& m = src.region_map->mask;
    const std::size_t plane = m.size();
    double sum_in = 0.0, sum_out = 0.0;
    std::size_t n_in = 0, n_out = 0;
    for (int c = 0; c < src.channels(); ++c) {
      for (std::size_t k = 0; k < plane; ++k) {
        const double d = std::abs(run.outputs[i]->pixels[c * plane + k] - src.pixels[c * plane + k]);
        if (m[k] < 0.5) {
          sum_in += d;
          ++n_in;
        } else {
          sum_out += d;
          ++n_out;
        }
      }
    }
    if (n_in > 0 && n_out > 0) {
      inside.push_back(sum_in / static_cast<double>(n_in));
      outside.push_back(sum_out / static_cast<double>(n_out));
    }
  }
  return {mean(inside), mean(outside)};
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_run_artifacts(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                         std::span<const AttackPair> pairs, const MethodRun& run, const std::string& label) {
  const fs::path img_dir = cfg.run_dir / "images" / label / ("bb_" + run.black_box);
  fs::create_directories(img_dir);
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!run.outputs[i]) continue;
    write_png(img_dir / (pair_name(pairs[i].id) + ".png"), *run.outputs[i]);
    names.push_back(pair_name(pairs[i].id));
    tensors.push_back(run.outputs[i]->pixels);
  }
  save_tensors(img_dir / "adversarial.bin", names, tensors);

  if (!run.masks.empty()) {
    const fs::path mask_dir = cfg.run_dir / "masks" / label;
    fs::create_directories(mask_dir);
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (run.outputs[i]) write_mask_png(mask_dir / (pair_name(pairs[i].id) + ".png"), run.masks[i]);
  }

  std::ostringstream csv;
  csv << "pair_id,source_index,target_index,group,seed,status";
  for (const auto& r : models.recognizers) csv << ",sim_" << r.name();
  csv << ",error\n";
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const AttackPair& p = pairs[i];
    csv << p.id << ',' << p.source << ',' << p.target << ',' << p.group << ',' << p.seed << ','
        << (run.outputs[i] ? "ok" : "failed");
    for (const auto& r : models.recognizers) {
      double s = std::nan("");
      if (run.outputs[i]) s = similarity(r.embed(*run.outputs[i]), r.embed(data.eval.at(p.target)));
      csv << ',' << csv_number(s);
    }
    std::string err = run.errors[i];
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    csv << ',' << err << '\n';
  }
  const fs::path report_dir = cfg.run_dir / "reports" / label;
  fs::create_directories(report_dir);
  write_text(report_dir / ("pairs_bb_" + run.black_box + ".csv"), csv.str());

  bool any_trajectory = false;
  for (const auto& t : run.trajectories) any_trajectory = any_trajectory || !t.empty();
  if (any_trajectory) {
    std::ostringstream traj;
    traj << "pair_id,t,weight,similarity\n";
    for (std::size_t i = 0; i < pairs.size(); ++i)
      for (const auto& e : run.trajectories[i])
        traj << pairs[i].id << ',' << e.t << ',' << csv_number(e.weight) << ',' << csv_number(e.similarity) << '\n';
    write_text(report_dir / ("trajectory_bb_" + run.black_box + ".csv"), traj.str());
  }
}

void write_pair_sources(const ExperimentConfig& cfg, const Dataset& data, std::span<const AttackPair> pairs) {
  const fs::path dir = cfg.run_dir / "images" / "pairs";
  fs::create_directories(dir);
  for (const auto& p : pairs) {
    write_png(dir / (pair_name(p.id) + "_source.png"), data.eval.at(p.source));
    write_png(dir / (pair_name(p.id) + "_target.png"), data.eval.at(p.target));
  }
}

void write_report_table(const fs::path& path, const std::vector<MetricsReport>& reports) {
  std::ostringstream csv;
  if (!reports.empty()) csv << reports.front().csv_header() << '\n';
  for (const auto& r : reports) csv << r.csv_row() << '\n';
  write_text(path, csv.str());
}

}  // namespace

ExperimentResult run_attack_experiment(const ExperimentConfig& cfg, const std::string& label) {
  const Dataset data = load_data(cfg);
  const Models models = load_models(cfg);
  return run_attack_experiment(cfg, models, data, label);
}

ExperimentResult run_attack_experiment(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                                       const std::string& label_in) {
  const auto started = std::chrono::steady_clock::now();
  const std::string label = label_in.empty() ? method_name(cfg.method) : label_in;
  const auto pairs = select_pairs(data, cfg.n_sources, cfg.n_targets, cfg.root_seed);
  write_pair_sources(cfg, data, pairs);

  ExperimentResult result;
  json failures = json::object();
  for (const auto& bb : cfg.black_box_models()) {
    AttackConfig attack = cfg.attack;
    attack.white_box = white_box_for(cfg, bb);
    MethodRun run = run_method(cfg, models, data, pairs, cfg.method, attack, bb);
    run.label = label;
    MethodRun clean = run_method(cfg, models, data, pairs, Method::clean, attack, bb);
    clean.label = "clean";
    result.reports.push_back(evaluate_run(cfg, models, data, pairs, run, label));
    write_run_artifacts(cfg, models, data, pairs, run, label);
    json f = json::object();
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (!run.errors[i].empty()) f[pair_name(pairs[i].id)] = run.errors[i];
    failures[bb] = f;
    result.runs.push_back(std::move(run));
    result.clean_runs.push_back(std::move(clean));
  }
  for (const auto& clean : result.clean_runs)
    result.reports.push_back(evaluate_run(cfg, models, data, pairs, clean, "clean"));

  const fs::path report_dir = cfg.run_dir / "reports" / label;
  fs::create_directories(report_dir);
  for (const auto& r : result.reports) {
    const std::string stem = (r.method == "clean" ? "clean_bb_" : "bb_") + r.black_box_model;
    write_json(report_dir / (stem + ".json"), r.to_json());
  }
  write_report_table(cfg.run_dir / "reports" / (label + ".csv"), result.reports);

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  json black_box_queries = json::object();
  for (const auto& bb : cfg.black_box_models()) black_box_queries[bb] = 0;
  write_json(report_dir / "run_record.json",
             {{"label", label},
              {"config", cfg.to_json()},
              {"config_fingerprint", cfg.fingerprint()},
              {"root_seed", cfg.root_seed},
              {"pair_seeds", [&] {
                 json s = json::object();
                 for (const auto& p : pairs) s[pair_name(p.id)] = p.seed;
                 return s;
               }()},
              {"black_box_gradient_queries_during_own_split", black_box_queries},
              {"failures", failures},
              {"runtime_seconds", seconds}});
  return result;
}

std::vector<MetricsReport> evaluate_stored(const ExperimentConfig& cfg, const std::string& label) {
  const Dataset data = load_data(cfg);
  const Models models = load_models(cfg);
  const auto pairs = select_pairs(data, cfg.n_sources, cfg.n_targets, cfg.root_seed);
  std::vector<MetricsReport> reports;
  for (const auto& bb : cfg.black_box_models()) {
    const fs::path bundle = cfg.run_dir / "images" / label / ("bb_" + bb) / "adversarial.bin";
    if (!fs::exists(bundle)) throw std::runtime_error("no stored outputs at " + bundle.string());
    std::map<std::string, Tensor> stored;
    for (auto& [name, t] : load_tensors(bundle)) stored.emplace(name, std::move(t));
    MethodRun run;
    run.label = label;
    run.black_box = bb;
    run.outputs.resize(pairs.size());
    run.errors.resize(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      auto it = stored.find(pair_name(pairs[i].id));
      if (it == stored.end()) {
        run.errors[i] = "missing from bundle";
        continue;
      }
      run.outputs[i] = ImageSample{it->second, std::nullopt, std::nullopt};
    }
    reports.push_back(evaluate_run(cfg, models, data, pairs, run, label));
  }
  const fs::path report_dir = cfg.run_dir / "reports" / label;
  fs::create_directories(report_dir);
  for (const auto& r : reports) write_json(report_dir / ("bb_" + r.black_box_model + ".json"), r.to_json());
  write_report_table(cfg.run_dir / "reports" / (label + "_evaluated.csv"), reports);
  return reports;
}

// ---------------------------------------------------------------------------
// Sweeps and ablations

namespace {

struct Aggregate {
  double white = 0.0, black = 0.0, psnr = 0.0, ssim = 0.0, fd = 0.0;
};

Aggregate aggregate(const std::vector<MetricsReport>& reports, const std::string& method) {
  std::vector<double> w, b, p, s, f;
  for (const auto& r : reports) {
    if (r.method != method) continue;
    w.push_back(r.white_box_asr);
    if (!r.black_box_model.empty()) b.push_back(r.asr_per_model.at(r.black_box_model));
    p.push_back(r.psnr_mean);
    s.push_back(r.ssim_mean);
    f.push_back(r.frechet_distance);
  }
  return {mean(w), mean(b), mean(p), mean(s), mean(f)};
}

std::string value_label(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

}  // namespace

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::string& parameter,
                                const std::vector<double>& grid) {
  const Dataset data = load_data(cfg);
  const Models models = load_models(cfg);
  return run_sweep(cfg, models, data, parameter, grid);
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const Models& models, const Dataset& data,
                                const std::string& parameter, const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("sweep grid is empty");
  if (parameter != "T" && parameter != "s") throw std::invalid_argument("sweep parameter must be T or s");
  std::vector<SweepRow> rows;
  for (double v : grid) {
    ExperimentConfig c = cfg;
    c.method = Method::adv_diffusion;
    if (parameter == "T") {
      if (v != std::floor(v)) throw std::invalid_argument("T grid values must be integers");
      c.attack.steps = static_cast<int>(v);
    } else {
      c.attack.strength = v;
    }
    const std::string label = "sweep_" + parameter + "_" + value_label(v);
    try {
      const ExperimentResult res = run_attack_experiment(c, models, data, label);
      const Aggregate a = aggregate(res.reports, label);
      rows.push_back({v, a.white, a.black, a.psnr, a.ssim, a.fd});
    } catch (const std::exception& e) {
      throw std::runtime_error("sweep " + parameter + "=" + value_label(v) + ": " + e.what());
    }
  }

  std::ostringstream csv;
  csv << parameter << ",white_box_asr,black_box_asr,psnr_db,ssim,fd_toy\n";
  for (const auto& r : rows) {
    csv << csv_number(r.value) << ',' << csv_number(r.white_box_asr) << ',' << csv_number(r.black_box_asr) << ','
        << csv_number(r.psnr) << ',' << csv_number(r.ssim) << ',' << csv_number(r.frechet_distance) << '\n';
  }
  fs::create_directories(cfg.run_dir / "reports");
  write_text(cfg.run_dir / "reports" / ("sweep_" + parameter + ".csv"), csv.str());

  Series white{"white-box ASR", {}, {}, palette(0)}, black{"black-box ASR", {}, {}, palette(1)};
  Series quality{"PSNR", {}, {}, palette(2)};
  for (const auto& r : rows) {
    white.x.push_back(r.value);
    white.y.push_back(r.white_box_asr);
    black.x.push_back(r.value);
    black.y.push_back(r.black_box_asr);
    quality.x.push_back(r.value);
    quality.y.push_back(r.psnr);
  }
  fs::create_directories(cfg.run_dir / "plots");
  write_line_plots(cfg.run_dir / "plots" / ("sweep_" + parameter + ".png"),
                   {LinePlot{"ASR vs " + parameter, parameter, "ASR", {white, black}},
                    LinePlot{"PSNR vs " + parameter, parameter, "PSNR (dB)", {quality}}});
  return rows;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg) {
  const Dataset data = load_data(cfg);
  const Models models = load_models(cfg);
  return run_ablation(cfg, models, data);
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const Models& models, const Dataset& data) {
  std::vector<AblationRow> rows;
  for (const std::string variant : {"full", "constant_strength", "no_mask"}) {
    ExperimentConfig c = cfg;
    c.method = Method::adv_diffusion;
    c.attack.constant_strength = variant == "constant_strength";
    c.attack.no_mask = variant == "no_mask";
    const std::string label = "ablation_" + variant;
    const ExperimentResult res = run_attack_experiment(c, models, data, label);
    const Aggregate a = aggregate(res.reports, label);
    rows.push_back({variant, a.white, a.black, a.psnr, a.ssim, a.fd});
  }
  std::ostringstream csv;
  csv << "variant,white_box_asr,black_box_asr,psnr_db,ssim,fd_toy\n";
  json j = json::array();
  for (const auto& r : rows) {
    csv << r.variant << ',' << csv_number(r.white_box_asr) << ',' << csv_number(r.black_box_asr) << ','
        << csv_number(r.psnr) << ',' << csv_number(r.ssim) << ',' << csv_number(r.frechet_distance) << '\n';
    j.push_back({{"variant", r.variant},
                 {"white_box_asr", r.white_box_asr},
                 {"black_box_asr", r.black_box_asr},
                 {"psnr_db", r.psnr},
                 {"ssim", r.ssim},
                 {"fd_toy", std::isnan(r.frechet_distance) ? json(nullptr) : json(r.frechet_distance)}});
  }
  fs::create_directories(cfg.run_dir / "reports");
  write_text(cfg.run_dir / "reports" / "ablation.csv", csv.str());
  write_json(cfg.run_dir / "reports" / "ablation.json", j);
  return rows;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman needs two equal-length samples of size >= 2");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = mean(ra), mb = mean(rb);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace advdiff
