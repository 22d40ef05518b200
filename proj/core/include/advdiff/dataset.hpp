#pragma once

// Procedural synthetic faces. Identity parameters shape the inner face
// (eyes, nose, mouth, skin); nuisance parameters only touch hair and
// background, which lie outside the recorded identity-sensitive region.

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "advdiff/types.hpp"

namespace advdiff {

struct FaceIdentity {
  double eye_spacing = 4.0;      // half distance between eye centres, px
  double eye_size = 1.6;         // eye radius, px
  double nose_length = 4.0;      // px
  double mouth_curvature = 0.0;  // arc height, px (positive smiles)
  double mouth_width = 3.5;      // half width, px
  double face_hue = 0.5;         // position on the skin palette, [0, 1]
  double face_tone = 0.8;        // skin brightness
  double eye_color = 0.5;        // position on the iris palette, [0, 1]

  static FaceIdentity sample(std::mt19937_64& rng);
};

struct FaceNuisance {
  double background_hue = 0.5;
  double background_gradient = 0.0;
  double hair_height = 3.0;  // fringe depth below the crown, px
  double hair_hue = 0.5;
  double texture_phase = 0.0;
  double texture_amplitude = 0.02;

  static FaceNuisance sample(std::mt19937_64& rng);
};

struct SyntheticFaceSpec {
  FaceIdentity identity;
  FaceNuisance nuisance;
};

/// Ground-truth region map for an identity: 0 inside the ellipse enclosing
/// eyes, nose and mouth, 1 elsewhere.
IdentityMask face_region_map(const FaceIdentity& id, int size = 32);

/// Renders a 3 x size x size face (4x4 supersampled) with its region map.
ImageSample render_face(const SyntheticFaceSpec& spec, int size = 32);

struct DatasetSpec {
  int n_identities = 160;
  int images_per_identity = 12;
  int eval_identities = 60;  // identities held out from training
  std::uint64_t seed = 1;
  int image_size = 32;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<FaceIdentity> identities;
  std::vector<ImageSample> train;  // labels in [0, n - eval)
  std::vector<ImageSample> eval;   // labels in [n - eval, n)
};

/// Deterministic in `spec`; train and eval identity sets are disjoint.
Dataset generate_dataset(const DatasetSpec& spec);
Dataset generate_dataset(int n_identities, int images_per_identity, std::uint64_t seed);

/// `<stem>.bin` (images + region maps) and `<stem>.json` (spec, counts).
void save_dataset(const std::filesystem::path& stem, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& stem);

}  // namespace advdiff
