// Per-operation costs at the default model sizes. Weights are random; the
// timings do not depend on training.

#include <benchmark/benchmark.h>

#include <random>

#include "advdiff/attack.hpp"
#include "advdiff/dataset.hpp"

namespace {

using namespace advdiff;

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = n(rng);
  return t;
}

struct Models {
  Codec codec{CodecConfig{}, 1};
  EpsilonModel eps{EpsilonModelConfig{}, 2};
  NoiseSchedule sched = make_schedule(50, 1e-4, 0.02);
  std::vector<Recognizer> recognizers;
  Dataset data = generate_dataset({8, 4, 4, 3, 32});

  Models() {
    const auto archs = default_architectures();
    for (std::size_t k = 0; k < archs.size(); ++k) recognizers.emplace_back(archs[k], 10 + k);
  }
  AttackModels attack_models() const {
    AttackModels m{&codec, &eps, &sched, {}};
    for (const auto& r : recognizers) m.recognizers.push_back(&r);
    return m;
  }
  std::vector<const Recognizer*> white() const { return {&recognizers[0], &recognizers[1], &recognizers[2]}; }
};

const Models& models() {
  static const Models m;
  return m;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const Tensor x0 = random_tensor({8, c, 16, 16}, 1), w0 = random_tensor({c, c, 3, 3}, 2), b0 = random_tensor({c}, 3);
  for (auto _ : state) {
    ag::Tape tape;
    ag::Var x = tape.leaf(x0), w = tape.leaf(w0), b = tape.leaf(b0);
    ag::Var y = ag::conv2d(x, w, b, 1, 1);
    tape.backward(ag::sum(y));
    benchmark::DoNotOptimize(tape.grad(w));
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(32);

void BM_Decode(benchmark::State& state) {
  const Tensor z = random_tensor({1, 4, 8, 8}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(models().codec.decode_batch(z));
}
BENCHMARK(BM_Decode);

void BM_ReverseStep(benchmark::State& state) {
  const Shape shape = {4, 8, 8};
  const LatentCode z{random_tensor(shape, 5), 45}, c{random_tensor(shape, 6), 0};
  const Tensor noise = random_tensor(shape, 7);
  for (auto _ : state) benchmark::DoNotOptimize(reverse_step(z, 45, c, models().eps, models().sched, noise));
}
BENCHMARK(BM_ReverseStep);

void BM_AdversarialGradient(benchmark::State& state) {
  const LatentCode z0{random_tensor({4, 8, 8}, 8), 0};
  const auto white = models().white();
  const auto targets = target_embeddings(white, models().data.eval[0]);
  for (auto _ : state) benchmark::DoNotOptimize(adversarial_gradient(z0, targets, white, models().codec));
}
BENCHMARK(BM_AdversarialGradient);

void BM_AttackT45(benchmark::State& state) {
  const Models& m = models();
  const AttackModels am = m.attack_models();
  const MaskOracle oracle = make_mask_oracle({});
  AttackConfig cfg;
  cfg.strength = 30.0;
  cfg.white_box = {"ir152_toy", "irse50_toy", "facenet_toy"};
  for (auto _ : state) {
    benchmark::DoNotOptimize(adv_diffusion_attack(m.data.eval[0], m.data.eval[4], am, oracle, cfg));
  }
}
BENCHMARK(BM_AttackT45)->Unit(benchmark::kMillisecond);

void BM_Fgsm(benchmark::State& state) {
  const auto white = models().white();
  for (auto _ : state)
    benchmark::DoNotOptimize(fgsm_attack(models().data.eval[0], models().data.eval[4], white, 8.0 / 255.0));
}
BENCHMARK(BM_Fgsm);

}  // namespace

BENCHMARK_MAIN();
