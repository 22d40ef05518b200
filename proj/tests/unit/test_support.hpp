#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "advdiff/tensor.hpp"
#include "advdiff/types.hpp"

namespace advdiff::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline Tensor gaussian_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = n(rng);
  return t;
}

inline ImageSample random_image(std::uint64_t seed, int size = 32) {
  return ImageSample{random_tensor({3, size, size}, seed, 0.05, 0.95), std::nullopt, std::nullopt};
}

/// |a - n| / max(|a|, |n|), treating pairs both below `floor` as agreeing.
inline double relative_error(double analytic, double numeric, double floor = 1e-9) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < floor) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

/// Worst relative error between `grad` and central differences of `f` at
/// `n_coords` random coordinates of `x`.
inline double max_fd_error(const Tensor& x, const Tensor& grad, const std::function<double(const Tensor&)>& f,
                           int n_coords, std::uint64_t seed, double h = 1e-5) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  double worst = 0.0;
  for (int k = 0; k < n_coords; ++k) {
    const std::size_t i = pick(rng);
    Tensor plus = x, minus = x;
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (f(plus) - f(minus)) / (2.0 * h);
    worst = std::max(worst, relative_error(grad[i], numeric));
  }
  return worst;
}

}  // namespace advdiff::testing
