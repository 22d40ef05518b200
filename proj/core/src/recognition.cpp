#include "advdiff/recognition.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "advdiff/io.hpp"

namespace advdiff {

namespace {

int head_inputs(const RecognizerArch& arch) {
  const int last = arch.stage_widths.back();
  if (!arch.flatten_head) return last;
  int size = arch.image_size;
  for (std::size_t s = 0; s < arch.stage_widths.size(); ++s) size = (size + 1) / 2;
  return last * size * size;
}

void build(const RecognizerArch& arch, nn::ParameterSet& params, std::uint64_t seed) {
  if (arch.stage_widths.empty()) throw std::invalid_argument("recognizer needs at least one stage");
  std::mt19937_64 rng(seed);
  int in = 3;
  for (std::size_t s = 0; s < arch.stage_widths.size(); ++s) {
    const int w = arch.stage_widths[s];
    const std::string stage = "stage" + std::to_string(s);
    nn::add_conv(params, stage + ".down", in, w, 3, rng);
    for (int c = 1; c < arch.convs_per_stage; ++c)
      nn::add_conv(params, stage + ".res" + std::to_string(c), w, w, 3, rng, 0.5);
    in = w;
  }
  nn::add_linear(params, "head", head_inputs(arch), arch.embedding_dim, rng);
}

}  // namespace

std::vector<RecognizerArch> default_architectures() {
  return {
      {"ir152_toy", {16, 32, 48}, 2, false, 16, 32},
      {"irse50_toy", {32, 48, 64}, 1, false, 16, 32},
      {"facenet_toy", {16, 32, 32}, 1, true, 16, 32},
      {"mobileface_toy", {8, 16, 32, 64}, 1, false, 16, 32},
  };
}

Recognizer::Recognizer(RecognizerArch arch, std::uint64_t seed) : arch_(std::move(arch)) {
  build(arch_, params_, seed);
}

Recognizer::Recognizer(RecognizerArch arch, nn::ParameterSet params) : arch_(std::move(arch)) {
  build(arch_, params_, 0);
  if (params.size() != params_.size()) throw std::invalid_argument("recognizer parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.name(i) != params_.name(i) || params[i].shape() != params_[i].shape())
      throw std::invalid_argument("recognizer parameter mismatch at " + params.name(i));
  }
  params_ = std::move(params);
}

ag::Var Recognizer::features(ag::Tape& tape, const nn::Bound& p, ag::Var x) const {
  if (x.value().rank() != 4 || x.shape()[1] != 3 || x.shape()[2] != arch_.image_size ||
      x.shape()[3] != arch_.image_size) {
    throw std::invalid_argument("recognizer " + arch_.name + ": bad input shape " +
                                shape_string(x.shape()));
  }
  std::size_t i = 0;
  // Centre pixels so the first layer does not start with a large shared offset.
  ag::Var h = ag::add(x, tape.constant(Tensor(x.shape(), -0.5)));
  for (std::size_t s = 0; s < arch_.stage_widths.size(); ++s) {
    h = ag::silu(ag::conv2d(h, p[i], p[i + 1], 2, 1));
    i += 2;
    for (int c = 1; c < arch_.convs_per_stage; ++c) {
      h = ag::add(h, ag::silu(ag::conv2d(h, p[i], p[i + 1], 1, 1)));
      i += 2;
    }
  }
  const int n = h.shape()[0];
  h = arch_.flatten_head ? ag::reshape(h, {n, static_cast<int>(h.value().size()) / n})
                         : ag::global_avg_pool(h);
  return ag::linear(h, p[i], p[i + 1]);
}

ag::Var Recognizer::embed(ag::Tape& tape, const nn::Bound& p, ag::Var x) const {
  return ag::l2_normalize_rows(features(tape, p, x));
}

Tensor Recognizer::embed_batch(const Tensor& images) const {
  ag::Tape tape;
  const nn::Bound p = nn::bind(tape, params_, false);
  return embed(tape, p, tape.constant(images)).value();
}

Tensor Recognizer::features_batch(const Tensor& images) const {
  ag::Tape tape;
  const nn::Bound p = nn::bind(tape, params_, false);
  return features(tape, p, tape.constant(images)).value();
}

std::vector<double> Recognizer::embed(const ImageSample& x) const {
  validate_image(x);
  return embed_batch(as_batch(x.pixels)).values();
}

std::vector<double> Recognizer::features(const ImageSample& x) const {
  validate_image(x);
  return features_batch(as_batch(x.pixels)).values();
}

double similarity(std::span<const double> e1, std::span<const double> e2) {
  if (e1.size() != e2.size()) throw std::invalid_argument("similarity: dimension mismatch");
  double n1 = 0.0, n2 = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < e1.size(); ++i) {
    n1 += e1[i] * e1[i];
    n2 += e2[i] * e2[i];
    dot += e1[i] * e2[i];
  }
  if (std::abs(std::sqrt(n1) - 1.0) > 1e-4 || std::abs(std::sqrt(n2) - 1.0) > 1e-4) {
    throw std::invalid_argument("similarity: inputs must be unit vectors");
  }
  return std::clamp(dot, -1.0, 1.0);
}

double threshold_from_scores(std::vector<double> scores, double far) {
  if (scores.empty()) throw std::invalid_argument("threshold_from_scores: no scores");
  if (!(far > 0.0 && far <= 1.0)) throw std::invalid_argument("FAR must lie in (0, 1]");
  std::sort(scores.begin(), scores.end());
  const std::size_t n = scores.size();
  const auto allowed = static_cast<std::size_t>(std::floor(far * static_cast<double>(n) + 1e-9));
  const std::size_t rank = allowed >= n ? 1 : n - allowed;  // 1-indexed
  return scores[rank - 1];
}

Threshold calibrate_far_threshold(Recognizer& r, std::span<const VerificationPair> impostors,
                                  double far, std::uint64_t pair_seed, std::size_t min_pairs) {
  if (impostors.size() < min_pairs) {
    throw std::invalid_argument("calibration needs at least " + std::to_string(min_pairs) +
                                " impostor pairs, got " + std::to_string(impostors.size()));
  }
  std::vector<double> scores;
  scores.reserve(impostors.size());
  for (const auto& pair : impostors) {
    if (pair.same_identity) throw std::invalid_argument("calibration set contains a genuine pair");
    scores.push_back(similarity(r.embed(pair.image_a), r.embed(pair.image_b)));
  }
  Threshold t{threshold_from_scores(std::move(scores), far), far, pair_seed, impostors.size()};
  r.set_threshold(t);
  return t;
}

double verification_accuracy(const Recognizer& r, std::span<const VerificationPair> pairs, double tau) {
  if (pairs.empty()) throw std::invalid_argument("verification_accuracy: no pairs");
  std::size_t correct = 0;
  for (const auto& pair : pairs) {
    const bool accept = similarity(r.embed(pair.image_a), r.embed(pair.image_b)) > tau;
    correct += accept == pair.same_identity ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

std::pair<Recognizer, RecognizerTrainReport> train_recognizer(std::span<const ImageSample> dataset,
                                                              const RecognizerTrainConfig& cfg,
                                                              const RecognizerArch& arch) {
  std::map<int, std::size_t> per_identity;
  for (const auto& x : dataset) {
    if (!x.identity_label) throw std::invalid_argument("train_recognizer: unlabelled image");
    validate_image(x);
    ++per_identity[*x.identity_label];
  }
  if (per_identity.size() < cfg.min_identities) {
    throw std::invalid_argument("train_recognizer: need at least " + std::to_string(cfg.min_identities) +
                                " identities, got " + std::to_string(per_identity.size()));
  }
  for (const auto& [id, count] : per_identity) {
    if (count < cfg.min_images_per_identity) {
      throw std::invalid_argument("train_recognizer: identity " + std::to_string(id) + " has only " +
                                  std::to_string(count) + " images");
    }
  }
  std::map<int, int> class_of;
  for (const auto& [id, count] : per_identity) class_of.emplace(id, static_cast<int>(class_of.size()));
  const int classes = static_cast<int>(class_of.size());

  std::mt19937_64 rng(cfg.seed);
  Recognizer model(arch, cfg.seed ^ 0x94d049bb133111ebULL);
  // Class-centre weights live beside the model and are discarded after training.
  nn::ParameterSet all = model.parameters();
  const std::size_t n_model = all.size();
  {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor centres({classes, arch.embedding_dim});
    for (double& v : centres.data()) v = normal(rng);
    all.add("class_centres", std::move(centres));
  }

  RecognizerTrainReport report;
  nn::Adam opt(cfg.learning_rate);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), dataset.size());
  std::size_t correct = 0, seen = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Tensor*> items;
    std::vector<int> labels;
    for (std::size_t b = 0; b < batch; ++b) {
      const ImageSample& x = dataset[pick(rng)];
      items.push_back(&x.pixels);
      labels.push_back(class_of.at(*x.identity_label));
    }
    ag::Tape tape;
    const nn::Bound p = nn::bind(tape, all, true);
    nn::Bound model_params;
    model_params.vars.assign(p.vars.begin(), p.vars.begin() + static_cast<std::ptrdiff_t>(n_model));
    ag::Var emb = model.embed(tape, model_params, tape.constant(stack(items)));
    ag::Var centres = ag::l2_normalize_rows(p[n_model]);
    ag::Var cosine = ag::linear(emb, centres, ag::Var());
    Tensor margin(cosine.shape());
    for (std::size_t b = 0; b < batch; ++b)
      margin[b * static_cast<std::size_t>(classes) + static_cast<std::size_t>(labels[b])] = -cfg.margin;
    ag::Var logits = ag::scale(ag::add(cosine, tape.constant(std::move(margin))), cfg.logit_scale);
    ag::Var loss = ag::cross_entropy(logits, labels);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw std::runtime_error("recognizer " + arch.name + " training diverged at step " +
                               std::to_string(step));
    }
    if (step == 0) report.initial_loss = value;
    report.train_loss.push_back(value);
    if (step >= cfg.steps - 100) {
      const Tensor& c = cosine.value();
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = c.ptr() + b * static_cast<std::size_t>(classes);
        correct += std::max_element(row, row + classes) - row == labels[b] ? 1 : 0;
        ++seen;
      }
    }
    tape.backward(loss);
    std::vector<Tensor> grads = nn::gradients(tape, p);
    nn::clip_global_norm(grads, cfg.grad_clip);
    const double progress = static_cast<double>(step) / cfg.steps;
    opt.set_learning_rate(cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * progress))));
    opt.step(all, grads);
  }
  report.final_loss = report.train_loss.back();
  report.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
  for (std::size_t i = 0; i < n_model; ++i) model.parameters()[i] = all[i];
  return {std::move(model), std::move(report)};
}

void save_recognizer(const std::filesystem::path& stem, const Recognizer& r, std::uint64_t train_seed,
                     double verification_acc) {
  nn::save_blob(with_suffix(stem, ".bin"), r.parameters());
  const auto& a = r.arch();
  nlohmann::json meta = {{"kind", "recognizer"},
                         {"name", a.name},
                         {"stage_widths", a.stage_widths},
                         {"convs_per_stage", a.convs_per_stage},
                         {"flatten_head", a.flatten_head},
                         {"embedding_dim", a.embedding_dim},
                         {"image_size", a.image_size},
                         {"train_seed", train_seed},
                         {"verification_accuracy", verification_acc}};
  if (r.threshold()) {
    meta["threshold"] = {{"tau", r.threshold()->tau},
                         {"far", r.threshold()->far},
                         {"pair_seed", r.threshold()->pair_seed},
                         {"n_pairs", r.threshold()->n_pairs}};
  }
  write_json(with_suffix(stem, ".json"), meta);
}

Recognizer load_recognizer(const std::filesystem::path& stem) {
  const nlohmann::json meta = read_json(with_suffix(stem, ".json"));
  RecognizerArch a;
  a.name = meta.at("name");
  a.stage_widths = meta.at("stage_widths").get<std::vector<int>>();
  a.convs_per_stage = meta.at("convs_per_stage");
  a.flatten_head = meta.at("flatten_head");
  a.embedding_dim = meta.at("embedding_dim");
  a.image_size = meta.at("image_size");
  Recognizer r(a, nn::load_blob(with_suffix(stem, ".bin")));
  if (meta.contains("threshold")) {
    const auto& t = meta.at("threshold");
    r.set_threshold(Threshold{t.at("tau"), t.at("far"), t.at("pair_seed").get<std::uint64_t>(),
                              t.at("n_pairs").get<std::size_t>()});
  }
  return r;
}

}  // namespace advdiff
