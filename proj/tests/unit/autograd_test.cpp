#include <gtest/gtest.h>

#include <cmath>

#include "advdiff/autograd.hpp"
#include "test_support.hpp"

namespace advdiff {
namespace {

using testing::random_tensor;
using Builder = std::function<ag::Var(const std::vector<ag::Var>&)>;

// Scalarises the op output with fixed random weights and compares every
// input's analytic gradient against central differences.
double op_gradient_error(const std::vector<Tensor>& inputs, const Builder& build, std::uint64_t seed = 1) {
  Tensor weights;
  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    ag::Tape tape;
    std::vector<ag::Var> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x));
    ag::Var out = build(vars);
    if (weights.empty()) weights = random_tensor(out.shape(), seed + 99);
    ag::Var loss = ag::sum(ag::mul(out, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return loss.value()[0];
  };
  std::vector<Tensor> grads;
  evaluate(inputs, &grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor& xk) {
      std::vector<Tensor> xs = inputs;
      xs[k] = xk;
      return evaluate(xs, nullptr);
    };
    worst = std::max(worst, testing::max_fd_error(inputs[k], grads[k], f, 8, seed + k));
  }
  return worst;
}

constexpr double kTol = 1e-6;

TEST(Autograd, ElementwiseGradients) {
  const Tensor a = random_tensor({2, 3, 4}, 1), b = random_tensor({2, 3, 4}, 2);
  EXPECT_LT(op_gradient_error({a, b}, [](auto& v) { return ag::add(v[0], v[1]); }), kTol);
  EXPECT_LT(op_gradient_error({a, b}, [](auto& v) { return ag::sub(v[0], v[1]); }), kTol);
  EXPECT_LT(op_gradient_error({a, b}, [](auto& v) { return ag::mul(v[0], v[1]); }), kTol);
  EXPECT_LT(op_gradient_error({a}, [](auto& v) { return ag::scale(v[0], -2.5); }), kTol);
  EXPECT_LT(op_gradient_error({a}, [](auto& v) { return ag::silu(v[0]); }), kTol);
  EXPECT_LT(op_gradient_error({a}, [](auto& v) { return ag::sigmoid(v[0]); }), kTol);
}

TEST(Autograd, ShapeOpGradients) {
  const Tensor x = random_tensor({2, 3, 4, 4}, 3), y = random_tensor({2, 2, 4, 4}, 4);
  EXPECT_LT(op_gradient_error({x}, [](auto& v) { return ag::reshape(v[0], {6, 16}); }), kTol);
  EXPECT_LT(op_gradient_error({x, y}, [](auto& v) { return ag::concat_channels(v[0], v[1]); }), kTol);
  EXPECT_LT(op_gradient_error({x}, [](auto& v) { return ag::upsample2x(v[0]); }), kTol);
  EXPECT_LT(op_gradient_error({x}, [](auto& v) { return ag::space_to_depth2(v[0]); }), kTol);
  EXPECT_LT(op_gradient_error({random_tensor({2, 8, 3, 3}, 5)}, [](auto& v) { return ag::depth_to_space2(v[0]); }),
            kTol);
  EXPECT_LT(op_gradient_error({x}, [](auto& v) { return ag::global_avg_pool(v[0]); }), kTol);
}

TEST(Autograd, PixelShuffleRoundTripIsExact) {
  ag::Tape tape;
  const Tensor x = random_tensor({2, 3, 6, 8}, 6);
  ag::Var folded = ag::space_to_depth2(tape.constant(x));
  EXPECT_EQ(folded.shape(), (Shape{2, 12, 3, 4}));
  EXPECT_EQ(ag::depth_to_space2(folded).value(), x);
  // Pixel (y, x) = (3, 5) of channel 1 lands in channel 1*4 + (1*2 + 1) at (1, 2).
  EXPECT_EQ(folded.value()[((0 * 12 + 7) * 3 + 1) * 4 + 2], x[((0 * 3 + 1) * 6 + 3) * 8 + 5]);
}

TEST(Autograd, ConvolutionGradients) {
  const Tensor x = random_tensor({2, 3, 6, 6}, 7), w = random_tensor({4, 3, 3, 3}, 8), b = random_tensor({4}, 9);
  EXPECT_LT(op_gradient_error({x, w, b}, [](auto& v) { return ag::conv2d(v[0], v[1], v[2], 1, 1); }), kTol);
  EXPECT_LT(op_gradient_error({x, w, b}, [](auto& v) { return ag::conv2d(v[0], v[1], v[2], 2, 1); }), kTol);
  EXPECT_LT(op_gradient_error({x, w}, [](auto& v) { return ag::conv2d(v[0], v[1], ag::Var(), 1, 0); }), kTol);
}

TEST(Autograd, ConvolutionMatchesDirectSum) {
  const int n = 2, cin = 3, cout = 4, h = 7, k = 3, stride = 2, pad = 1;
  const Tensor x = random_tensor({n, cin, h, h}, 10), w = random_tensor({cout, cin, k, k}, 11);
  const Tensor b = random_tensor({cout}, 12);
  ag::Tape tape;
  const Tensor y = ag::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), stride, pad).value();
  const int ho = (h + 2 * pad - k) / stride + 1;
  ASSERT_EQ(y.shape(), (Shape{n, cout, ho, ho}));
  for (int s = 0; s < n; ++s)
    for (int co = 0; co < cout; ++co)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < ho; ++ox) {
          double acc = b[co];
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= h || ix >= h) continue;
                acc += w[((co * cin + ci) * k + ky) * k + kx] * x[((s * cin + ci) * h + iy) * h + ix];
              }
          EXPECT_NEAR(y[((s * cout + co) * ho + oy) * ho + ox], acc, 1e-12);
        }
}

TEST(Autograd, DenseAndNormalisationGradients) {
  const Tensor x = random_tensor({3, 5}, 13), w = random_tensor({4, 5}, 14), b = random_tensor({4}, 15);
  EXPECT_LT(op_gradient_error({x, w, b}, [](auto& v) { return ag::linear(v[0], v[1], v[2]); }), kTol);
  EXPECT_LT(op_gradient_error({x}, [](auto& v) { return ag::l2_normalize_rows(v[0]); }), kTol);
  EXPECT_LT(op_gradient_error({x, random_tensor({3, 5}, 16)}, [](auto& v) { return ag::row_dot(v[0], v[1]); }), kTol);
  const Tensor img = random_tensor({3, 4, 2, 2}, 17), off = random_tensor({3, 4}, 18);
  EXPECT_LT(op_gradient_error({img, off}, [](auto& v) { return ag::add_channel_offset(v[0], v[1]); }), kTol);
}

TEST(Autograd, LossGradients) {
  const Tensor a = random_tensor({3, 5}, 19), b = random_tensor({3, 5}, 20);
  EXPECT_LT(op_gradient_error({a}, [](auto& v) { return ag::mean(v[0]); }), kTol);
  EXPECT_LT(op_gradient_error({a, b}, [](auto& v) { return ag::mse(v[0], v[1]); }), kTol);
  const std::vector<int> labels = {4, 0, 2};
  EXPECT_LT(op_gradient_error({a}, [&](auto& v) { return ag::cross_entropy(v[0], labels); }), kTol);
}

TEST(Autograd, NormalisedRowsHaveUnitNorm) {
  ag::Tape tape;
  const Tensor e = ag::l2_normalize_rows(tape.constant(random_tensor({4, 16}, 21))).value();
  for (int r = 0; r < 4; ++r) {
    double n = 0.0;
    for (int c = 0; c < 16; ++c) n += e[r * 16 + c] * e[r * 16 + c];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
  }
}

TEST(Autograd, ConstantsReceiveNoGradient) {
  ag::Tape tape;
  ag::Var c = tape.constant(random_tensor({3}, 22));
  ag::Var x = tape.leaf(random_tensor({3}, 23));
  tape.backward(ag::sum(ag::mul(c, x)));
  EXPECT_FALSE(tape.requires_grad(c));
  EXPECT_EQ(tape.grad(c), Tensor({3}));
  EXPECT_EQ(tape.grad(x), c.value());
}

TEST(Autograd, RejectsBadShapes) {
  ag::Tape tape;
  ag::Var a = tape.leaf(Tensor({2, 3}));
  ag::Var b = tape.leaf(Tensor({3, 2}));
  EXPECT_THROW(ag::add(a, b), std::invalid_argument);
  EXPECT_THROW(tape.backward(a), std::invalid_argument);
  ag::Var img = tape.leaf(Tensor({1, 3, 4, 4}));
  EXPECT_THROW(ag::conv2d(img, tape.leaf(Tensor({2, 4, 3, 3})), ag::Var(), 1, 1), std::invalid_argument);
  EXPECT_THROW(ag::depth_to_space2(tape.leaf(Tensor({1, 3, 2, 2}))), std::invalid_argument);
}

}  // namespace
}  // namespace advdiff
