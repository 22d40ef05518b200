#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "advdiff/metrics.hpp"
#include "advdiff/recognition.hpp"
#include "test_support.hpp"

namespace advdiff {
namespace {

using testing::random_image;

ImageSample constant_image(double v, int size = 32) { return {Tensor({3, size, size}, v), std::nullopt, std::nullopt}; }

TEST(Psnr, CapForIdenticalImages) {
  const ImageSample a = random_image(1);
  EXPECT_EQ(psnr(a, a), kPsnrCapDb);
  EXPECT_EQ(kPsnrCapDb, 100.0);
}

TEST(Psnr, UniformOffsetOfOneTenthIsTwentyDb) {
  const ImageSample a = testing::random_image(2);
  ImageSample b = a;
  for (double& v : b.pixels.data()) v = std::min(1.0, v + 0.1);
  ImageSample c{testing::random_tensor({3, 32, 32}, 3, 0.0, 0.9), std::nullopt, std::nullopt};
  ImageSample d = c;
  for (double& v : d.pixels.data()) v += 0.1;
  EXPECT_NEAR(psnr(c, d), 20.0, 1e-9);
  EXPECT_EQ(psnr(c, d), psnr(d, c));
  EXPECT_EQ(psnr(a, b), psnr(b, a));
  EXPECT_THROW(psnr(a, constant_image(0.5, 16)), std::invalid_argument);
}

TEST(Ssim, SelfSimilarityAndSymmetry) {
  const ImageSample a = random_image(4), b = random_image(5);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-14);
  EXPECT_LT(ssim(a, b), 0.5);
}

TEST(Ssim, TwoConstantClosedForm) {
  // Means 0 and 1, zero variances and covariance: (C1 * C2) / ((1 + C1) * C2).
  const double c1 = 0.01 * 0.01;
  EXPECT_NEAR(ssim(constant_image(0.0), constant_image(1.0)), c1 / (1.0 + c1), 1e-15);
}

TEST(Ssim, RejectsSmallOrMismatchedImages) {
  EXPECT_THROW(ssim(constant_image(0.2, 8), constant_image(0.2, 8)), std::invalid_argument);
  EXPECT_THROW(ssim(constant_image(0.2), constant_image(0.2, 16)), std::invalid_argument);
}

FeatureSet gaussian_set(int n, int d, double mean, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(mean, 1.0);
  FeatureSet out(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(d)));
  for (auto& row : out)
    for (double& v : row) v = normal(rng);
  return out;
}

TEST(Frechet, SelfDistanceIsZero) {
  const FeatureSet x = gaussian_set(64, 16, 0.3, 6);
  EXPECT_NEAR(frechet_distance(x, x), 0.0, 1e-6);
}

TEST(Frechet, UnivariateUnitShift) {
  const FeatureSet a = gaussian_set(10000, 1, 0.0, 7), b = gaussian_set(10000, 1, 1.0, 8);
  EXPECT_NEAR(frechet_distance(a, b), 1.0, 0.05);
}

TEST(Frechet, SymmetricAndOrderInvariant) {
  const FeatureSet a = gaussian_set(80, 8, 0.0, 9), b = gaussian_set(60, 8, 0.5, 10);
  FeatureSet shuffled = a;
  std::mt19937_64 rng(11);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const double d = frechet_distance(a, b);
  EXPECT_GT(d, 0.0);
  EXPECT_NEAR(frechet_distance(b, a), d, 1e-9);
  EXPECT_NEAR(frechet_distance(shuffled, b), d, 1e-9);
}

TEST(Frechet, RejectsDegenerateInput) {
  EXPECT_THROW(frechet_distance(gaussian_set(31, 16, 0, 12), gaussian_set(64, 16, 0, 13)), std::invalid_argument);
  EXPECT_THROW(frechet_distance(gaussian_set(64, 16, 0, 12), gaussian_set(64, 8, 0, 13)), std::invalid_argument);
  FeatureSet bad = gaussian_set(64, 4, 0, 14);
  bad[3][1] = std::nan("");
  EXPECT_THROW(frechet_distance(bad, gaussian_set(64, 4, 0, 15)), std::invalid_argument);
}

TEST(Asr, CountsPairsAboveThreshold) {
  Recognizer r({"small", {8, 16, 16}, 1, false, 16, 32}, 16);
  std::vector<AdversarialPair> pairs;
  std::vector<double> scores;
  for (int i = 0; i < 10; ++i) {
    pairs.push_back({random_image(100 + i), random_image(200 + i)});
    const auto ea = r.embed(pairs.back().adversarial), eb = r.embed(pairs.back().target);
    double dot = 0.0;
    for (std::size_t k = 0; k < ea.size(); ++k) dot += ea[k] * eb[k];
    scores.push_back(dot);
  }
  EXPECT_THROW(asr(pairs, r), std::invalid_argument);  // not calibrated yet
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const double tau = 0.5 * (sorted[3] + sorted[4]);
  r.set_threshold({tau, 0.01, 0, 1000});
  const auto count = std::count_if(scores.begin(), scores.end(), [&](double s) { return s > tau; });
  EXPECT_EQ(count, 6);
  EXPECT_NEAR(asr(pairs, r), count / 10.0, 1e-15);
  EXPECT_THROW(asr(std::span<const AdversarialPair>{}, r), std::invalid_argument);
}

TEST(Asr, SelfPairsAlwaysSucceed) {
  Recognizer r({"small", {8, 16, 16}, 1, false, 16, 32}, 17);
  r.set_threshold({0.99, 0.01, 0, 1000});
  std::vector<AdversarialPair> pairs;
  for (int i = 0; i < 5; ++i) pairs.push_back({random_image(300 + i), random_image(300 + i)});
  EXPECT_EQ(asr(pairs, r), 1.0);
}

TEST(AcceptanceRate, HandList) {
  const std::vector<double> s = {0.1, 0.5, 0.5, 0.9};
  EXPECT_EQ(acceptance_rate(s, 0.5), 0.25);
  EXPECT_EQ(acceptance_rate(s, 0.0), 1.0);
}

TEST(MetricsReport, JsonRoundTripAndValidation) {
  MetricsReport r;
  r.method = "adv_diffusion";
  r.black_box_model = "facenet_toy";
  r.asr_per_model = {{"facenet_toy", 0.25}, {"ir152_toy", 0.75}};
  r.white_box_asr = 0.75;
  r.psnr_mean = 21.5;
  r.ssim_mean = 0.6;
  r.frechet_distance = std::nan("");
  r.n_samples = 50;
  r.config_fingerprint = "abc";
  r.validate();
  const MetricsReport back = MetricsReport::from_json(r.to_json());
  EXPECT_EQ(back.asr_per_model, r.asr_per_model);
  EXPECT_TRUE(std::isnan(back.frechet_distance));
  EXPECT_TRUE(r.to_json().at("fd_toy").is_null());
  EXPECT_EQ(r.csv_header(),
            "method,black_box_model,asr_facenet_toy,asr_ir152_toy,white_box_asr,psnr_db,ssim,fd_toy,n_samples,"
            "n_failed,config_fingerprint");
  r.asr_per_model["ir152_toy"] = 1.5;
  EXPECT_THROW(r.validate(), std::logic_error);
  r.asr_per_model["ir152_toy"] = 0.5;
  r.n_samples = 0;
  EXPECT_THROW(r.validate(), std::logic_error);
}

}  // namespace
}  // namespace advdiff
