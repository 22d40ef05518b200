#include <gtest/gtest.h>

#include <cmath>

#include "advdiff/attack.hpp"
#include "advdiff/dataset.hpp"
#include "test_support.hpp"

namespace advdiff {
namespace {

// Untrained but fixed models: enough for every structural property.
class AttackFixture : public ::testing::Test {
 protected:
  AttackFixture()
      : codec_(small_codec(), 1),
        eps_(small_eps(), 2),
        sched_(make_schedule(50, 1e-4, 0.02)),
        data_(generate_dataset(4, 2, 3)) {
    for (int k = 0; k < 3; ++k) {
      RecognizerArch arch = default_architectures()[static_cast<std::size_t>(k)];
      recognizers_.emplace_back(arch, 10 + k);
    }
    for (const auto& r : recognizers_) models_.recognizers.push_back(&r);
    models_.codec = &codec_;
    models_.eps_model = &eps_;
    models_.schedule = &sched_;
  }

  static CodecConfig small_codec() {
    CodecConfig c;
    c.width = 8;
    c.fine_width = 8;
    return c;
  }
  static EpsilonModelConfig small_eps() {
    EpsilonModelConfig c;
    c.width = 8;
    c.time_dim = 8;
    return c;
  }

  AttackConfig config(double s, int steps = 6) const {
    AttackConfig cfg;
    cfg.steps = steps;
    cfg.strength = s;
    cfg.white_box = {"ir152_toy", "irse50_toy"};
    cfg.seed = 42;
    return cfg;
  }

  const ImageSample& source() const { return data_.train[0]; }
  const ImageSample& target() const { return data_.eval[0]; }
  std::vector<const Recognizer*> white() const { return {&recognizers_[0], &recognizers_[1]}; }

  Codec codec_;
  EpsilonModel eps_;
  NoiseSchedule sched_;
  Dataset data_;
  std::vector<Recognizer> recognizers_;
  AttackModels models_;
  MaskOracle oracle_ = make_mask_oracle({});
};

TEST_F(AttackFixture, ZeroStrengthEqualsConditionedInpainting) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    AttackConfig cfg = config(0.0);
    cfg.seed = seed;
    const AttackResult adv = adv_diffusion_attack(source(), target(), models_, oracle_, cfg);
    const ImageSample plain = conditioned_inpainting(source(), models_, oracle_, cfg);
    EXPECT_EQ(adv.adversarial.pixels, plain.pixels);
  }
}

TEST_F(AttackFixture, SeedDeterminesOutput) {
  const AttackConfig cfg = config(50.0);
  const AttackResult a = adv_diffusion_attack(source(), target(), models_, oracle_, cfg);
  const AttackResult b = adv_diffusion_attack(source(), target(), models_, oracle_, cfg);
  EXPECT_EQ(a.adversarial.pixels, b.adversarial.pixels);
  AttackConfig other = cfg;
  other.seed = 43;
  EXPECT_NE(adv_diffusion_attack(source(), target(), models_, oracle_, other).adversarial.pixels,
            a.adversarial.pixels);
  validate_image(a.adversarial);
  EXPECT_EQ(a.similarity_to_target.size(), 3u);
  EXPECT_EQ(a.mask.mask, source().region_map->mask);
}

TEST_F(AttackFixture, PositiveStrengthChangesOutput) {
  const AttackResult a = adv_diffusion_attack(source(), target(), models_, oracle_, config(50.0));
  const ImageSample plain = conditioned_inpainting(source(), models_, oracle_, config(50.0));
  EXPECT_NE(a.adversarial.pixels, plain.pixels);
}

TEST_F(AttackFixture, TrajectoryHasOneEntryPerStep) {
  AttackConfig cfg = config(30.0, 8);
  cfg.log_trajectory = true;
  const AttackResult a = adv_diffusion_attack(source(), target(), models_, oracle_, cfg);
  ASSERT_EQ(a.trajectory.size(), 8u);
  for (std::size_t k = 0; k < a.trajectory.size(); ++k) {
    const int t = 8 - static_cast<int>(k);
    EXPECT_EQ(a.trajectory[k].t, t);
    EXPECT_EQ(a.trajectory[k].weight, adaptive_weight(t, sched_, 30.0));
    EXPECT_GE(a.trajectory[k].similarity, -1.0);
    EXPECT_LE(a.trajectory[k].similarity, 1.0);
  }
  cfg.constant_strength = true;
  for (const auto& e : adv_diffusion_attack(source(), target(), models_, oracle_, cfg).trajectory)
    EXPECT_EQ(e.weight, 30.0 * sched_.posterior_sigma(8));
}

TEST_F(AttackFixture, NoMaskConditionsOnFullSource) {
  AttackConfig cfg = config(0.0);
  cfg.no_mask = true;
  const AttackResult a = adv_diffusion_attack(source(), target(), models_, oracle_, cfg);
  EXPECT_EQ(a.mask.count_agnostic(), 0u);
  const MaskOracle none = make_mask_oracle({MaskOracleConfig::Mode::none});
  AttackConfig masked = config(0.0);
  EXPECT_EQ(a.adversarial.pixels, conditioned_inpainting(source(), models_, none, masked).pixels);
}

TEST_F(AttackFixture, AdaptiveWeightClosedForm) {
  for (int t = 1; t <= 50; ++t) EXPECT_EQ(adaptive_weight(t, sched_, 0.0), 0.0);
  for (int t = 2; t <= 50; ++t) EXPECT_GT(adaptive_weight(t, sched_, 300.0), adaptive_weight(t - 1, sched_, 300.0));
  for (const int t : {1, 25, 50}) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 49.0;
    EXPECT_NEAR(adaptive_weight(t, sched_, 300.0), 300.0 * std::sqrt(beta), 1e-12);
  }
  EXPECT_NEAR(adaptive_weight(1, sched_, 300.0), 3.0, 1e-12);
  EXPECT_NEAR(adaptive_weight(50, sched_, 300.0), 300.0 * std::sqrt(0.02), 1e-12);
}

TEST_F(AttackFixture, LatentGradientMatchesFiniteDifferences) {
  const std::vector<const Recognizer*> one = {&recognizers_[0]};
  const auto targets = target_embeddings(one, target());
  const LatentCode z0 = encode(codec_, source());
  const LatentGradient g = adversarial_gradient(z0, targets, one, codec_);
  auto f = [&](const Tensor& z) { return adversarial_gradient({z, 0}, targets, one, codec_).similarity; };
  EXPECT_LE(testing::max_fd_error(z0.data, g.gradient, f, 10, 5), 1e-3);
}

TEST_F(AttackFixture, EnsembleGradientIsMeanOfSingles) {
  const LatentCode z0 = encode(codec_, source());
  const auto all = white();
  const LatentGradient both = adversarial_gradient(z0, target(), all, codec_);
  const std::vector<const Recognizer*> a = {all[0]}, b = {all[1]};
  const LatentGradient ga = adversarial_gradient(z0, target(), a, codec_);
  const LatentGradient gb = adversarial_gradient(z0, target(), b, codec_);
  for (std::size_t i = 0; i < both.gradient.size(); ++i)
    EXPECT_NEAR(both.gradient[i], 0.5 * (ga.gradient[i] + gb.gradient[i]), 1e-7);
  EXPECT_NEAR(both.similarity, 0.5 * (ga.similarity + gb.similarity), 1e-12);
}

TEST_F(AttackFixture, SelfTargetIsStationary) {
  // With the target equal to the image's own embedding the normalisation
  // Jacobian removes the only gradient direction.
  const auto w = white();
  const auto targets = target_embeddings(w, source());
  const PixelGradient g = pixel_gradient(source(), targets, w);
  EXPECT_NEAR(g.similarity, 1.0, 1e-12);
  EXPECT_LT(g.gradient.max_abs(), 1e-9);
}

TEST_F(AttackFixture, OnlyWhiteBoxModelsAreQueried) {
  for (const auto& r : recognizers_) r.reset_gradient_queries();
  adv_diffusion_attack(source(), target(), models_, oracle_, config(10.0, 4));
  EXPECT_EQ(recognizers_[0].gradient_queries(), 4u);
  EXPECT_EQ(recognizers_[1].gradient_queries(), 4u);
  EXPECT_EQ(recognizers_[2].gradient_queries(), 0u);
  fgsm_attack(source(), target(), white());
  EXPECT_EQ(recognizers_[2].gradient_queries(), 0u);
}

TEST_F(AttackFixture, ConfigValidation) {
  AttackConfig cfg = config(-1.0);
  EXPECT_THROW(cfg.validate(sched_), std::invalid_argument);
  cfg = config(1.0, 51);
  EXPECT_THROW(cfg.validate(sched_), std::invalid_argument);
  cfg = config(1.0, 0);
  EXPECT_THROW(cfg.validate(sched_), std::invalid_argument);
  cfg = config(1.0);
  cfg.white_box.clear();
  EXPECT_THROW(cfg.validate(sched_), std::invalid_argument);
  cfg = config(1.0);
  cfg.white_box = {"arcface"};
  EXPECT_THROW(adv_diffusion_attack(source(), target(), models_, oracle_, cfg), std::invalid_argument);
}

TEST_F(AttackFixture, StepErrorsCarryStepIndex) {
  // A predictor returning NaN makes the latent gradient non-finite.
  class NanPredictor final : public EpsilonPredictor {
   public:
    Tensor predict(const Tensor& z, int, const Tensor&) const override { return Tensor(z.shape(), std::nan("")); }
  } nan_model;
  AttackModels broken = models_;
  broken.eps_model = &nan_model;
  try {
    adv_diffusion_attack(source(), target(), broken, oracle_, config(10.0, 5));
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("t=5"), std::string::npos) << e.what();
  }
}

double linf(const ImageSample& a, const ImageSample& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

TEST_F(AttackFixture, FgsmRespectsBudget) {
  const auto w = white();
  EXPECT_EQ(fgsm_attack(source(), target(), w, 0.0).pixels, source().pixels);
  const ImageSample x = fgsm_attack(source(), target(), w);
  EXPECT_LE(linf(x, source()), kDefaultEpsBound + 1e-9);
  EXPECT_GT(linf(x, source()), 0.0);
  validate_image(x);
  EXPECT_THROW(fgsm_attack(source(), target(), w, 1.0), std::invalid_argument);
}

TEST_F(AttackFixture, PgdSingleStepEqualsFgsm) {
  const auto w = white();
  EXPECT_EQ(pgd_attack(source(), target(), w, kDefaultEpsBound, kDefaultEpsBound, 1).pixels,
            fgsm_attack(source(), target(), w).pixels);
}

TEST_F(AttackFixture, IterativeBaselinesStayInBall) {
  const auto w = white();
  const ImageSample p = pgd_attack(source(), target(), w);
  const ImageSample m = mifgsm_attack(source(), target(), w);
  for (const ImageSample* x : {&p, &m}) {
    EXPECT_LE(linf(*x, source()), kDefaultEpsBound + 1e-9);
    validate_image(*x);
  }
  EXPECT_EQ(mifgsm_attack(source(), target(), w).pixels, m.pixels);
  EXPECT_THROW(pgd_attack(source(), target(), w, kDefaultEpsBound, 0.01, 0), std::invalid_argument);
  EXPECT_THROW(mifgsm_attack(source(), target(), w, kDefaultEpsBound, 0.01, 3, -0.5), std::invalid_argument);
}

TEST_F(AttackFixture, MomentumOffEqualsPgd) {
  const auto w = white();
  EXPECT_EQ(mifgsm_attack(source(), target(), w, kDefaultEpsBound, 2.0 / 255.0, 5, 0.0).pixels,
            pgd_attack(source(), target(), w, kDefaultEpsBound, 2.0 / 255.0, 5).pixels);
}

TEST_F(AttackFixture, BaselinesRaiseTargetSimilarity) {
  const auto w = white();
  const auto targets = target_embeddings(w, target());
  const double before = pixel_gradient(source(), targets, w).similarity;
  const double after = pixel_gradient(pgd_attack(source(), target(), w), targets, w).similarity;
  EXPECT_GT(after, before);
}

}  // namespace
}  // namespace advdiff
