#pragma once

#include <optional>

#include "advdiff/tensor.hpp"

namespace advdiff {

/// Binary per-pixel mask (1 x H x W). 1 marks identity-agnostic (editable)
/// pixels, 0 marks identity-sensitive (preserved) pixels.
struct IdentityMask {
  Tensor mask;

  int height() const { return mask.dim(1); }
  int width() const { return mask.dim(2); }
  std::size_t count_agnostic() const;
  std::size_t count_sensitive() const { return mask.size() - count_agnostic(); }
};

/// RGB image (3 x H x W) with values in [0, 1].
struct ImageSample {
  Tensor pixels;
  std::optional<int> identity_label;
  /// Ground-truth region map recorded by a generator, if any.
  std::optional<IdentityMask> region_map;

  int channels() const { return pixels.dim(0); }
  int height() const { return pixels.dim(1); }
  int width() const { return pixels.dim(2); }
};

/// Latent tensor (C x H x W) tagged with its diffusion level.
struct LatentCode {
  Tensor data;
  int step_index = 0;

  const Shape& shape() const { return data.shape(); }
};

/// Throws unless `x` is 3 x H x W with every value finite and within [0, 1].
void validate_image(const ImageSample& x);

/// Adds a leading batch axis: (C,H,W) -> (1,C,H,W).
Tensor as_batch(const Tensor& chw);
/// Stacks equally shaped (C,H,W) tensors into (N,C,H,W).
Tensor stack(const std::vector<const Tensor*>& items);
/// Slice i of an (N,...) tensor as a tensor without the batch axis.
Tensor unbatch(const Tensor& batch, int i);

}  // namespace advdiff
