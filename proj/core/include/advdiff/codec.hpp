#pragma once

// Deterministic convolutional autoencoder (E, D) between 3 x 32 x 32 images
// and a 4 x 8 x 8 latent space.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "advdiff/autograd.hpp"
#include "advdiff/nn.hpp"
#include "advdiff/types.hpp"

namespace advdiff {

struct CodecConfig {
  int image_channels = 3;
  int image_size = 32;
  int latent_channels = 4;
  int width = 32;       // channels at the 8x8 stage
  int fine_width = 32;  // channels at the 16x16 stage (2x2 pixel blocks)

  int latent_size() const { return image_size / 4; }
  Shape latent_shape() const { return {latent_channels, latent_size(), latent_size()}; }
  Shape image_shape() const { return {image_channels, image_size, image_size}; }
};

class Codec {
 public:
  Codec(CodecConfig config, std::uint64_t seed);
  Codec(CodecConfig config, nn::ParameterSet params, double latent_scale);

  /// Differentiable passes over N x C x H x W batches. `p` must come from
  /// binding parameters() on the same tape.
  ag::Var encode(ag::Tape& tape, const nn::Bound& p, ag::Var images) const;
  /// Output squashed by a sigmoid, so always in (0, 1).
  ag::Var decode(ag::Tape& tape, const nn::Bound& p, ag::Var latents) const;

  Tensor encode_batch(const Tensor& images) const;
  Tensor decode_batch(const Tensor& latents) const;

  const CodecConfig& config() const { return config_; }
  const nn::ParameterSet& parameters() const { return params_; }
  nn::ParameterSet& parameters() { return params_; }
  /// Raw encoder outputs are divided by this so latents have unit spread.
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s) { latent_scale_ = s; }

  std::size_t encoder_param_count() const { return encoder_params_; }

 private:
  CodecConfig config_;
  nn::ParameterSet params_;
  std::size_t encoder_params_ = 0;
  double latent_scale_ = 1.0;
};

/// E(x): deterministic latent with step_index 0.
LatentCode encode(const Codec& codec, const ImageSample& x);
/// D(z): image in [0, 1].
ImageSample decode(const Codec& codec, const LatentCode& z);

struct CodecTrainConfig {
  int steps = 1000;
  int batch_size = 32;
  double learning_rate = 2e-3;
  double val_fraction = 0.1;
  double grad_clip = 5.0;
  std::uint64_t seed = 11;
  CodecConfig codec;
};

struct CodecTrainReport {
  double initial_loss = 0.0;
  double final_train_loss = 0.0;
  double val_psnr = 0.0;
  std::vector<double> train_loss;
};

/// Trains on reconstruction MSE. Deterministic per seed.
std::pair<Codec, CodecTrainReport> train_codec(std::span<const ImageSample> dataset,
                                              const CodecTrainConfig& cfg,
                                              std::size_t min_dataset_size = 100);

/// Mean reconstruction PSNR (dB) of decode(encode(x)) over `images`.
double reconstruction_psnr(const Codec& codec, std::span<const ImageSample> images);

/// `<stem>.bin` + `<stem>.json` (latent shape, latent scale, PSNR, seed).
void save_codec(const std::filesystem::path& stem, const Codec& codec, std::uint64_t seed,
                const CodecTrainReport& report);
Codec load_codec(const std::filesystem::path& stem);

}  // namespace advdiff
