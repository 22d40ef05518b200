#include "advdiff/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "advdiff/io.hpp"

namespace advdiff {

namespace {

using Rgb = std::array<double, 3>;

constexpr double kFaceCx = 16.0, kFaceCy = 17.0, kFaceAx = 10.5, kFaceAy = 12.5;
constexpr double kEyeY = 13.5, kNoseTop = 14.5;

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

Rgb palette(const std::vector<Rgb>& stops, double t) {
  t = std::clamp(t, 0.0, 1.0) * static_cast<double>(stops.size() - 1);
  const std::size_t i = std::min(stops.size() - 2, static_cast<std::size_t>(t));
  return lerp(stops[i], stops[i + 1], t - static_cast<double>(i));
}

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb rgb{};
  if (hp < 1) rgb = {c, x, 0};
  else if (hp < 2) rgb = {x, c, 0};
  else if (hp < 3) rgb = {0, c, x};
  else if (hp < 4) rgb = {0, x, c};
  else if (hp < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  const double m = v - c;
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

double mouth_y(const FaceIdentity& id) { return kNoseTop + id.nose_length + 2.5; }

struct SensitiveRegion {
  double cx, cy, ax, ay;
  bool contains(double u, double v) const {
    const double dx = (u - cx) / ax, dy = (v - cy) / ay;
    return dx * dx * dx * dx + dy * dy * dy * dy <= 1.0;
  }
};

// Squircle enclosing eyes, nose and mouth with a 1 px margin.
SensitiveRegion sensitive_region(const FaceIdentity& id) {
  const double top = kEyeY - id.eye_size * 0.8 - 1.0;
  const double bottom = mouth_y(id) + std::max(0.0, id.mouth_curvature) + 0.6 + 1.0;
  const double half_w = std::max(id.eye_spacing + id.eye_size * 1.25, id.mouth_width) + 1.0;
  return {kFaceCx, (top + bottom) / 2.0, half_w, (bottom - top) / 2.0};
}

Rgb shade(const SyntheticFaceSpec& spec, double u, double v, double size) {
  const FaceIdentity& id = spec.identity;
  const FaceNuisance& nz = spec.nuisance;
  const double scale = size / 32.0;
  u /= scale;
  v /= scale;

  Rgb col = hsv(nz.background_hue, 0.35, 0.7);
  const double bg = nz.background_gradient * (v / 32.0 - 0.5) +
                    nz.texture_amplitude * std::sin(0.9 * u + 0.7 * v + nz.texture_phase);
  for (double& c : col) c += bg;

  const double fx = (u - kFaceCx) / kFaceAx, fy = (v - kFaceCy) / kFaceAy;
  const bool in_face = fx * fx + fy * fy <= 1.0;
  const double hx = (u - kFaceCx) / (kFaceAx + 1.8), hy = (v - (kFaceCy - 1.0)) / (kFaceAy + 1.8);
  const bool in_head = hx * hx + hy * hy <= 1.0;
  const Rgb hair = palette({{0.1, 0.08, 0.07}, {0.4, 0.25, 0.12}, {0.85, 0.72, 0.4},
                            {0.65, 0.25, 0.1}, {0.6, 0.6, 0.6}},
                           nz.hair_hue);
  if (in_head && !in_face && v < kFaceCy) col = hair;
  if (in_face) {
    const Rgb skin = palette({{1.0, 0.86, 0.74}, {0.87, 0.66, 0.5}, {0.56, 0.39, 0.28}}, id.face_hue);
    col = {skin[0] * id.face_tone, skin[1] * id.face_tone, skin[2] * id.face_tone};
    if (v < kFaceCy - kFaceAy + nz.hair_height) col = hair;

    // Nose: vertical capsule.
    const double nv = std::clamp(v, kNoseTop, kNoseTop + id.nose_length);
    if (std::hypot(u - kFaceCx, v - nv) <= 0.7) {
      for (double& c : col) c *= 0.72;
    }
    // Eyes: sclera ellipse with a round iris.
    for (double side : {-1.0, 1.0}) {
      const double ex = kFaceCx + side * id.eye_spacing;
      const double dx = (u - ex) / (id.eye_size * 1.25), dy = (v - kEyeY) / (id.eye_size * 0.8);
      if (dx * dx + dy * dy <= 1.0) {
        col = {0.95, 0.95, 0.93};
        if (std::hypot(u - ex, v - kEyeY) <= id.eye_size * 0.6) {
          col = palette({{0.25, 0.45, 0.75}, {0.35, 0.55, 0.3}, {0.4, 0.25, 0.12}}, id.eye_color);
        }
      }
    }
    // Mouth: parabolic arc, positive curvature lowers the centre (smile).
    const double t = (u - kFaceCx) / id.mouth_width;
    if (std::abs(t) <= 1.0) {
      const double arc = mouth_y(id) + id.mouth_curvature * (1.0 - t * t);
      if (std::abs(v - arc) <= 0.6) col = {0.7, 0.2, 0.25};
    }
  }
  for (double& c : col) c = std::clamp(c, 0.0, 1.0);
  return col;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

FaceIdentity FaceIdentity::sample(std::mt19937_64& rng) {
  FaceIdentity id;
  id.eye_spacing = uniform(rng, 3.0, 5.0);
  id.eye_size = uniform(rng, 1.2, 2.0);
  id.nose_length = uniform(rng, 2.5, 5.5);
  id.mouth_curvature = uniform(rng, -1.2, 1.2);
  id.mouth_width = uniform(rng, 2.5, 5.0);
  id.face_hue = uniform(rng, 0.0, 1.0);
  id.face_tone = uniform(rng, 0.75, 1.0);
  id.eye_color = uniform(rng, 0.0, 1.0);
  return id;
}

FaceNuisance FaceNuisance::sample(std::mt19937_64& rng) {
  FaceNuisance nz;
  nz.background_hue = uniform(rng, 0.0, 1.0);
  nz.background_gradient = uniform(rng, -0.2, 0.2);
  nz.hair_height = uniform(rng, 1.0, 4.5);
  nz.hair_hue = uniform(rng, 0.0, 1.0);
  nz.texture_phase = uniform(rng, 0.0, 6.283185307179586);
  nz.texture_amplitude = uniform(rng, 0.0, 0.05);
  return nz;
}

IdentityMask face_region_map(const FaceIdentity& id, int size) {
  const SensitiveRegion region = sensitive_region(id);
  const double scale = size / 32.0;
  Tensor m({1, size, size}, 1.0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (region.contains((x + 0.5) / scale, (y + 0.5) / scale))
        m[static_cast<std::size_t>(y) * size + x] = 0.0;
  return IdentityMask{std::move(m)};
}

ImageSample render_face(const SyntheticFaceSpec& spec, int size) {
  constexpr int kSub = 4;
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  Tensor pixels({3, size, size});
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const Rgb c = shade(spec, x + (sx + 0.5) / kSub, y + (sy + 0.5) / kSub, size);
          for (int ch = 0; ch < 3; ++ch) acc[static_cast<std::size_t>(ch)] += c[static_cast<std::size_t>(ch)];
        }
      }
      for (int ch = 0; ch < 3; ++ch)
        pixels[ch * plane + static_cast<std::size_t>(y) * size + x] = acc[static_cast<std::size_t>(ch)] / (kSub * kSub);
    }
  }
  return ImageSample{std::move(pixels), std::nullopt, face_region_map(spec.identity, size)};
}

Dataset generate_dataset(const DatasetSpec& spec) {
  if (spec.n_identities < 2) throw std::invalid_argument("generate_dataset: need at least 2 identities");
  if (spec.images_per_identity < 1) throw std::invalid_argument("generate_dataset: need at least 1 image per identity");
  if (spec.eval_identities < 1 || spec.eval_identities >= spec.n_identities) {
    throw std::invalid_argument("generate_dataset: eval identities must be in [1, n_identities)");
  }
  Dataset data;
  data.spec = spec;
  std::mt19937_64 rng(spec.seed);
  for (int i = 0; i < spec.n_identities; ++i) data.identities.push_back(FaceIdentity::sample(rng));
  const int n_train = spec.n_identities - spec.eval_identities;
  for (int i = 0; i < spec.n_identities; ++i) {
    for (int k = 0; k < spec.images_per_identity; ++k) {
      ImageSample img = render_face({data.identities[static_cast<std::size_t>(i)], FaceNuisance::sample(rng)},
                                    spec.image_size);
      img.identity_label = i;
      (i < n_train ? data.train : data.eval).push_back(std::move(img));
    }
  }
  return data;
}

Dataset generate_dataset(int n_identities, int images_per_identity, std::uint64_t seed) {
  DatasetSpec spec;
  spec.n_identities = n_identities;
  spec.images_per_identity = images_per_identity;
  spec.eval_identities = std::max(1, n_identities * 3 / 8);
  spec.seed = seed;
  return generate_dataset(spec);
}

namespace {

void pack(const std::vector<ImageSample>& images, const std::string& prefix,
          std::vector<std::string>& names, std::vector<Tensor>& tensors, int size) {
  const int n = static_cast<int>(images.size());
  Tensor px({n, 3, size, size}), maps({n, 1, size, size}), labels({n});
  const std::size_t img = 3 * static_cast<std::size_t>(size) * size;
  const std::size_t map = static_cast<std::size_t>(size) * size;
  for (int i = 0; i < n; ++i) {
    const auto& x = images[static_cast<std::size_t>(i)];
    std::copy_n(x.pixels.ptr(), img, px.ptr() + static_cast<std::size_t>(i) * img);
    if (x.region_map) std::copy_n(x.region_map->mask.ptr(), map, maps.ptr() + static_cast<std::size_t>(i) * map);
    labels[static_cast<std::size_t>(i)] = x.identity_label.value_or(-1);
  }
  names.insert(names.end(), {prefix + ".pixels", prefix + ".region_maps", prefix + ".labels"});
  tensors.push_back(std::move(px));
  tensors.push_back(std::move(maps));
  tensors.push_back(std::move(labels));
}

std::vector<ImageSample> unpack(const std::vector<std::pair<std::string, Tensor>>& items,
                                const std::string& prefix) {
  const Tensor* px = nullptr;
  const Tensor* maps = nullptr;
  const Tensor* labels = nullptr;
  for (const auto& [name, t] : items) {
    if (name == prefix + ".pixels") px = &t;
    if (name == prefix + ".region_maps") maps = &t;
    if (name == prefix + ".labels") labels = &t;
  }
  if (!px || !maps || !labels) throw std::runtime_error("dataset blob missing split " + prefix);
  std::vector<ImageSample> out;
  for (int i = 0; i < px->dim(0); ++i) {
    ImageSample x{unbatch(*px, i), static_cast<int>((*labels)[static_cast<std::size_t>(i)]),
                  IdentityMask{unbatch(*maps, i)}};
    if (*x.identity_label < 0) x.identity_label.reset();
    out.push_back(std::move(x));
  }
  return out;
}

nlohmann::json identity_json(const FaceIdentity& id) {
  return {{"eye_spacing", id.eye_spacing}, {"eye_size", id.eye_size},
          {"nose_length", id.nose_length}, {"mouth_curvature", id.mouth_curvature},
          {"mouth_width", id.mouth_width}, {"face_hue", id.face_hue},
          {"face_tone", id.face_tone},     {"eye_color", id.eye_color}};
}

FaceIdentity identity_from_json(const nlohmann::json& j) {
  FaceIdentity id;
  id.eye_spacing = j.at("eye_spacing");
  id.eye_size = j.at("eye_size");
  id.nose_length = j.at("nose_length");
  id.mouth_curvature = j.at("mouth_curvature");
  id.mouth_width = j.at("mouth_width");
  id.face_hue = j.at("face_hue");
  id.face_tone = j.at("face_tone");
  id.eye_color = j.at("eye_color");
  return id;
}

}  // namespace

void save_dataset(const std::filesystem::path& stem, const Dataset& data) {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  pack(data.train, "train", names, tensors, data.spec.image_size);
  pack(data.eval, "eval", names, tensors, data.spec.image_size);
  save_tensors(with_suffix(stem, ".bin"), names, tensors);
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& id : data.identities) ids.push_back(identity_json(id));
  write_json(with_suffix(stem, ".json"),
             {{"kind", "synthetic_faces"},
              {"n_identities", data.spec.n_identities},
              {"images_per_identity", data.spec.images_per_identity},
              {"eval_identities", data.spec.eval_identities},
              {"seed", data.spec.seed},
              {"image_size", data.spec.image_size},
              {"n_train_images", data.train.size()},
              {"n_eval_images", data.eval.size()},
              {"identities", ids}});
}

Dataset load_dataset(const std::filesystem::path& stem) {
  const nlohmann::json meta = read_json(with_suffix(stem, ".json"));
  Dataset data;
  data.spec.n_identities = meta.at("n_identities");
  data.spec.images_per_identity = meta.at("images_per_identity");
  data.spec.eval_identities = meta.at("eval_identities");
  data.spec.seed = meta.at("seed").get<std::uint64_t>();
  data.spec.image_size = meta.at("image_size");
  for (const auto& j : meta.at("identities")) data.identities.push_back(identity_from_json(j));
  const auto items = load_tensors(with_suffix(stem, ".bin"));
  data.train = unpack(items, "train");
  data.eval = unpack(items, "eval");
  return data;
}

}  // namespace advdiff
