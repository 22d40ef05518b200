#include "advdiff/conditioning.hpp"

#include <stdexcept>

namespace advdiff {

MaskOracleConfig::Mode parse_mask_mode(const std::string& name) {
  if (name == "ground_truth") return MaskOracleConfig::Mode::ground_truth;
  if (name == "ellipse") return MaskOracleConfig::Mode::ellipse;
  if (name == "none") return MaskOracleConfig::Mode::none;
  throw std::invalid_argument("unknown mask oracle mode: " + name);
}

std::string mask_mode_name(MaskOracleConfig::Mode mode) {
  switch (mode) {
    case MaskOracleConfig::Mode::ground_truth: return "ground_truth";
    case MaskOracleConfig::Mode::ellipse: return "ellipse";
    case MaskOracleConfig::Mode::none: return "none";
  }
  return "unknown";
}

IdentityMask ellipse_mask(int height, int width, double semi_x, double semi_y) {
  Tensor m({1, height, width}, 1.0);
  const double cx = width / 2.0, cy = height / 2.0;
  const double ax = semi_x * width, ay = semi_y * height;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dx = (x + 0.5 - cx) / ax;
      const double dy = (y + 0.5 - cy) / ay;
      if (dx * dx + dy * dy <= 1.0) m[static_cast<std::size_t>(y) * width + x] = 0.0;
    }
  }
  return IdentityMask{std::move(m)};
}

IdentityMask parse_mask(const ImageSample& x, const MaskOracleConfig& cfg) {
  const int h = x.height(), w = x.width();
  switch (cfg.mode) {
    case MaskOracleConfig::Mode::none:
      return IdentityMask{Tensor({1, h, w}, 0.0)};
    case MaskOracleConfig::Mode::ground_truth:
      if (x.region_map) {
        if (x.region_map->mask.shape() != Shape{1, h, w})
          throw std::invalid_argument("parse_mask: region map shape does not match image");
        return *x.region_map;
      }
      [[fallthrough]];
    case MaskOracleConfig::Mode::ellipse:
      return ellipse_mask(h, w, cfg.ellipse_semi_x, cfg.ellipse_semi_y);
  }
  throw std::logic_error("parse_mask: unhandled mode");
}

MaskOracle make_mask_oracle(MaskOracleConfig cfg) {
  return [cfg](const ImageSample& x) { return parse_mask(x, cfg); };
}

ImageSample masked_source(const ImageSample& x, const IdentityMask& m) {
  if (m.mask.rank() != 3 || m.mask.dim(0) != 1 || m.height() != x.height() || m.width() != x.width()) {
    throw std::invalid_argument("masked_source: mask " + shape_string(m.mask.shape()) +
                                " does not match image " + shape_string(x.pixels.shape()));
  }
  ImageSample out = x;
  const std::size_t plane = static_cast<std::size_t>(x.height()) * x.width();
  for (int c = 0; c < x.channels(); ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out.pixels[c * plane + i] = x.pixels[c * plane + i] * (1.0 - m.mask[i]);
  return out;
}

LatentCode make_condition(const Codec& codec, const ImageSample& x_m) { return encode(codec, x_m); }

}  // namespace advdiff
