#include "advdiff/types.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace advdiff {

std::size_t IdentityMask::count_agnostic() const {
  return static_cast<std::size_t>(
      std::count_if(mask.data().begin(), mask.data().end(), [](double v) { return v != 0.0; }));
}

void validate_image(const ImageSample& x) {
  if (x.pixels.rank() != 3 || x.pixels.dim(0) != 3) {
    throw std::invalid_argument("image must be 3 x H x W, got " + shape_string(x.pixels.shape()));
  }
  for (double v : x.pixels.data()) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw std::invalid_argument("image pixel outside [0, 1]: " + std::to_string(v));
    }
  }
}

Tensor as_batch(const Tensor& chw) {
  Shape s = chw.shape();
  s.insert(s.begin(), 1);
  return chw.reshaped(std::move(s));
}

Tensor stack(const std::vector<const Tensor*>& items) {
  if (items.empty()) throw std::invalid_argument("stack: no items");
  const Shape& inner = items.front()->shape();
  Shape s = inner;
  s.insert(s.begin(), static_cast<int>(items.size()));
  Tensor out(s);
  const std::size_t n = items.front()->size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != inner) throw std::invalid_argument("stack: shape mismatch");
    std::copy_n(items[i]->ptr(), n, out.ptr() + i * n);
  }
  return out;
}

Tensor unbatch(const Tensor& batch, int i) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_size(s);
  std::vector<double> data(batch.ptr() + static_cast<std::size_t>(i) * n,
                           batch.ptr() + static_cast<std::size_t>(i + 1) * n);
  return Tensor(std::move(s), std::move(data));
}

}  // namespace advdiff
