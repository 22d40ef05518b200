#pragma once

// Attack success rate at a calibrated threshold, PSNR, SSIM and a Frechet
// feature distance.

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advdiff/types.hpp"

namespace advdiff {

class Recognizer;

/// PSNR reported for identical images (zero MSE).
inline constexpr double kPsnrCapDb = 100.0;

/// 10 log10(1 / MSE) for [0, 1] images, capped at kPsnrCapDb.
double psnr(const ImageSample& a, const ImageSample& b);

/// Windowed SSIM on the channel-mean grayscale image: 11x11 Gaussian window
/// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, averaged over all valid windows.
double ssim(const ImageSample& a, const ImageSample& b);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

using FeatureSet = std::vector<std::vector<double>>;

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). Each set needs at
/// least 2 d samples for feature dimension d.
double frechet_distance(const FeatureSet& a, const FeatureSet& b);

/// Fraction of scores strictly above tau.
double acceptance_rate(std::span<const double> scores, double tau);

struct AdversarialPair {
  ImageSample adversarial;
  ImageSample target;
};

/// Fraction of pairs whose embedding similarity exceeds the recognizer's
/// calibrated threshold. Throws on an empty set or an uncalibrated recognizer.
double asr(std::span<const AdversarialPair> pairs, const Recognizer& r);

struct MetricsReport {
  std::string method;
  std::string black_box_model;
  std::map<std::string, double> asr_per_model;
  double white_box_asr = 0.0;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  double frechet_distance = 0.0;  // FD(toy), not comparable to Inception FID; NaN if too few samples
  int n_samples = 0;
  int n_failed = 0;
  std::string config_fingerprint;

  void validate() const;
  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  /// Header and row for flat CSV; models are emitted in map order.
  std::string csv_header() const;
  std::string csv_row() const;
};

}  // namespace advdiff
