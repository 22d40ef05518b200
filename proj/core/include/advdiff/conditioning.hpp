#pragma once

// Identity mask M, the masked source x_m = x ⊙ (1 - M), and the latent
// condition c = E(x_m).

#include <functional>
#include <string>

#include "advdiff/codec.hpp"
#include "advdiff/types.hpp"

namespace advdiff {

struct MaskOracleConfig {
  enum class Mode {
    ground_truth,  // generator region map when present, ellipse otherwise
    ellipse,       // centred-ellipse heuristic regardless of metadata
    none,          // all-sensitive: nothing is editable, x_m = x
  };
  Mode mode = Mode::ground_truth;
  double ellipse_semi_x = 0.35;  // fraction of width
  double ellipse_semi_y = 0.45;  // fraction of height
};

MaskOracleConfig::Mode parse_mask_mode(const std::string& name);
std::string mask_mode_name(MaskOracleConfig::Mode mode);

/// Pluggable face-parsing replacement; must be deterministic.
using MaskOracle = std::function<IdentityMask(const ImageSample&)>;

/// Mask whose interior ellipse (centred, semi-axes sx*W and sy*H, tested at
/// pixel centres) is identity-sensitive (0); everything else is 1.
IdentityMask ellipse_mask(int height, int width, double semi_x, double semi_y);

IdentityMask parse_mask(const ImageSample& x, const MaskOracleConfig& cfg);
MaskOracle make_mask_oracle(MaskOracleConfig cfg);

/// Zeroes every pixel the mask marks agnostic; sensitive pixels pass through.
ImageSample masked_source(const ImageSample& x, const IdentityMask& m);

/// c = E(x_m).
LatentCode make_condition(const Codec& codec, const ImageSample& x_m);

}  // namespace advdiff
