#pragma once

// Toy identity-embedding networks, cosine similarity, and FAR-calibrated
// decision thresholds.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advdiff/autograd.hpp"
#include "advdiff/nn.hpp"
#include "advdiff/types.hpp"

namespace advdiff {

/// Thresholds published for the real pre-trained models at FAR 0.01. Kept for
/// anyone plugging those models in; toy recognizers calibrate their own.
inline const std::map<std::string, double> kPublishedThresholds = {
    {"IRSE50", 0.241}, {"IR152", 0.167}, {"FaceNet", 0.409}, {"MobileFace", 0.302}};

struct RecognizerArch {
  std::string name;
  std::vector<int> stage_widths;  // each stage starts with a stride-2 conv
  int convs_per_stage = 1;        // extra stride-1 residual convs = convs_per_stage - 1
  bool flatten_head = false;      // flatten instead of global average pooling
  int embedding_dim = 16;
  int image_size = 32;
};

/// The four variants standing in for IR152, IRSE50, FaceNet and MobileFace.
std::vector<RecognizerArch> default_architectures();

struct Threshold {
  double tau = 0.0;
  double far = 0.0;
  std::uint64_t pair_seed = 0;
  std::size_t n_pairs = 0;
};

class Recognizer {
 public:
  Recognizer(RecognizerArch arch, std::uint64_t seed);
  Recognizer(RecognizerArch arch, nn::ParameterSet params);

  const std::string& name() const { return arch_.name; }
  const RecognizerArch& arch() const { return arch_; }
  int embedding_dim() const { return arch_.embedding_dim; }

  /// Pre-normalisation features (N x d); also the Frechet feature space.
  ag::Var features(ag::Tape& tape, const nn::Bound& p, ag::Var images) const;
  /// Unit-norm embeddings (N x d).
  ag::Var embed(ag::Tape& tape, const nn::Bound& p, ag::Var images) const;

  std::vector<double> embed(const ImageSample& x) const;
  std::vector<double> features(const ImageSample& x) const;
  /// Embeddings of an N x 3 x H x W batch, N x d.
  Tensor embed_batch(const Tensor& images) const;
  Tensor features_batch(const Tensor& images) const;

  const std::optional<Threshold>& threshold() const { return threshold_; }
  void set_threshold(Threshold t) { threshold_ = t; }

  const nn::ParameterSet& parameters() const { return params_; }
  nn::ParameterSet& parameters() { return params_; }

  /// Counts gradient evaluations made through this model (shared by copies).
  void note_gradient_query() const { queries_->fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t gradient_queries() const { return queries_->load(std::memory_order_relaxed); }
  void reset_gradient_queries() const { queries_->store(0); }

 private:
  RecognizerArch arch_;
  nn::ParameterSet params_;
  std::optional<Threshold> threshold_;
  std::shared_ptr<std::atomic<std::uint64_t>> queries_ =
      std::make_shared<std::atomic<std::uint64_t>>(0);
};

/// Cosine similarity of unit vectors; rejects norms off by more than 1e-4.
double similarity(std::span<const double> e1, std::span<const double> e2);

struct VerificationPair {
  ImageSample image_a;
  ImageSample image_b;
  bool same_identity = false;
};

/// Largest tau such that the fraction of scores strictly above tau is at most
/// `far`: the (n - floor(far n))-th order statistic, 1-indexed ascending.
double threshold_from_scores(std::vector<double> scores, double far);

/// Calibrates and stores tau on `r` from >= 1000 impostor pairs.
Threshold calibrate_far_threshold(Recognizer& r, std::span<const VerificationPair> impostors,
                                  double far, std::uint64_t pair_seed,
                                  std::size_t min_pairs = 1000);

/// Accuracy of the decision similarity > tau over labelled pairs.
double verification_accuracy(const Recognizer& r, std::span<const VerificationPair> pairs, double tau);

struct RecognizerTrainConfig {
  int steps = 1000;
  int batch_size = 32;
  double learning_rate = 3e-3;
  double logit_scale = 16.0;
  double margin = 0.2;
  double grad_clip = 5.0;
  std::uint64_t seed = 23;
  std::size_t min_identities = 20;
  std::size_t min_images_per_identity = 10;
};

struct RecognizerTrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  std::vector<double> train_loss;
};

/// Cosine-margin softmax training over identity labels. Deterministic per seed.
std::pair<Recognizer, RecognizerTrainReport> train_recognizer(std::span<const ImageSample> dataset,
                                                              const RecognizerTrainConfig& cfg,
                                                              const RecognizerArch& arch);

/// `<stem>.bin` + `<stem>.json` (architecture, tau, FAR, calibration seed).
void save_recognizer(const std::filesystem::path& stem, const Recognizer& r, std::uint64_t train_seed,
                     double verification_acc);
Recognizer load_recognizer(const std::filesystem::path& stem);

}  // namespace advdiff
