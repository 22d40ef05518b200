#include "advdiff/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "advdiff/io.hpp"
#include "advdiff/metrics.hpp"

namespace advdiff {

namespace {

void check_latent_shape(const CodecConfig& c, const Tensor& z) {
  if (z.rank() != 4 || z.dim(1) != c.latent_channels || z.dim(2) != c.latent_size() ||
      z.dim(3) != c.latent_size()) {
    throw std::invalid_argument("latent shape " + shape_string(z.shape()) +
                                " does not match codec latent " + shape_string(c.latent_shape()));
  }
}

void check_image_shape(const CodecConfig& c, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != c.image_channels || x.dim(2) != c.image_size ||
      x.dim(3) != c.image_size) {
    throw std::invalid_argument("image shape " + shape_string(x.shape()) +
                                " does not match codec input " + shape_string(c.image_shape()));
  }
}

}  // namespace

Codec::Codec(CodecConfig config, std::uint64_t seed) : config_(config) {
  if (config_.image_size % 4 != 0) throw std::invalid_argument("codec image size must be divisible by 4");
  std::mt19937_64 rng(seed);
  const int w = config_.width, f = config_.fine_width, c4 = 4 * config_.image_channels;
  nn::add_conv(params_, "enc.in", c4, f, 3, rng);
  nn::add_conv(params_, "enc.down", f, w, 3, rng);
  nn::add_conv(params_, "enc.res", w, w, 3, rng, 0.5);
  nn::add_conv(params_, "enc.out", w, config_.latent_channels, 3, rng);
  encoder_params_ = params_.size();
  nn::add_conv(params_, "dec.in", config_.latent_channels, w, 3, rng);
  nn::add_conv(params_, "dec.res", w, w, 3, rng, 0.5);
  nn::add_conv(params_, "dec.up", w, f, 3, rng);
  nn::add_conv(params_, "dec.mid", f, f, 3, rng, 0.5);
  nn::add_conv(params_, "dec.out", f, c4, 3, rng);
}

Codec::Codec(CodecConfig config, nn::ParameterSet params, double latent_scale)
    : Codec(config, 0) {
  if (params.size() != params_.size()) throw std::invalid_argument("codec parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.name(i) != params_.name(i) || params[i].shape() != params_[i].shape())
      throw std::invalid_argument("codec parameter mismatch at " + params.name(i));
  }
  params_ = std::move(params);
  latent_scale_ = latent_scale;
}

// Full-resolution pixels are folded into channels at 16x16 so no conv runs at
// 32x32.
ag::Var Codec::encode(ag::Tape&, const nn::Bound& p, ag::Var x) const {
  check_image_shape(config_, x.value());
  ag::Var h = ag::silu(ag::conv2d(ag::space_to_depth2(x), p[0], p[1], 1, 1));
  h = ag::silu(ag::conv2d(h, p[2], p[3], 2, 1));
  h = ag::add(h, ag::conv2d(h, p[4], p[5], 1, 1));
  h = ag::conv2d(ag::silu(h), p[6], p[7], 1, 1);
  return ag::scale(h, 1.0 / latent_scale_);
}

ag::Var Codec::decode(ag::Tape&, const nn::Bound& p, ag::Var z) const {
  check_latent_shape(config_, z.value());
  const std::size_t o = encoder_params_;
  ag::Var h = ag::silu(ag::conv2d(ag::scale(z, latent_scale_), p[o], p[o + 1], 1, 1));
  h = ag::add(h, ag::conv2d(h, p[o + 2], p[o + 3], 1, 1));
  h = ag::silu(ag::conv2d(ag::upsample2x(ag::silu(h)), p[o + 4], p[o + 5], 1, 1));
  h = ag::add(h, ag::conv2d(h, p[o + 6], p[o + 7], 1, 1));
  h = ag::conv2d(ag::silu(h), p[o + 8], p[o + 9], 1, 1);
  return ag::sigmoid(ag::depth_to_space2(h));
}

Tensor Codec::encode_batch(const Tensor& images) const {
  ag::Tape tape;
  const nn::Bound p = nn::bind(tape, params_, false);
  return encode(tape, p, tape.constant(images)).value();
}

Tensor Codec::decode_batch(const Tensor& latents) const {
  ag::Tape tape;
  const nn::Bound p = nn::bind(tape, params_, false);
  return decode(tape, p, tape.constant(latents)).value();
}

LatentCode encode(const Codec& codec, const ImageSample& x) {
  validate_image(x);
  Tensor z = codec.encode_batch(as_batch(x.pixels));
  return LatentCode{z.reshaped(codec.config().latent_shape()), 0};
}

ImageSample decode(const Codec& codec, const LatentCode& z) {
  if (z.data.shape() != codec.config().latent_shape()) {
    throw std::invalid_argument("decode: latent shape " + shape_string(z.data.shape()) +
                                " does not match codec latent " +
                                shape_string(codec.config().latent_shape()));
  }
  Tensor x = codec.decode_batch(as_batch(z.data));
  return ImageSample{x.reshaped(codec.config().image_shape()), std::nullopt, std::nullopt};
}

double reconstruction_psnr(const Codec& codec, std::span<const ImageSample> images) {
  if (images.empty()) throw std::invalid_argument("reconstruction_psnr: no images");
  double total = 0.0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    std::vector<const Tensor*> items;
    for (std::size_t i = start; i < std::min(images.size(), start + kChunk); ++i)
      items.push_back(&images[i].pixels);
    const Tensor recon = codec.decode_batch(codec.encode_batch(stack(items)));
    for (std::size_t i = 0; i < items.size(); ++i) {
      ImageSample r{unbatch(recon, static_cast<int>(i)), std::nullopt, std::nullopt};
      total += psnr(images[start + i], r);
    }
  }
  return total / static_cast<double>(images.size());
}

std::pair<Codec, CodecTrainReport> train_codec(std::span<const ImageSample> dataset,
                                              const CodecTrainConfig& cfg,
                                              std::size_t min_dataset_size) {
  if (dataset.size() < min_dataset_size) {
    throw std::invalid_argument("train_codec: need at least " + std::to_string(min_dataset_size) +
                                " images, got " + std::to_string(dataset.size()));
  }
  for (const auto& x : dataset) validate_image(x);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(dataset.size()));
  if (dataset.size() < 2) n_val = 0;
  std::vector<ImageSample> train, val;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val : train).push_back(dataset[order[i]]);
  if (val.empty()) val = train;

  Codec codec(cfg.codec, cfg.seed ^ 0x2545f4914f6cdd1dULL);
  CodecTrainReport report;
  nn::Adam opt(cfg.learning_rate);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), train.size());
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Tensor*> items;
    for (std::size_t b = 0; b < batch; ++b) items.push_back(&train[pick(rng)].pixels);
    const Tensor x = stack(items);
    ag::Tape tape;
    const nn::Bound p = nn::bind(tape, codec.parameters(), true);
    ag::Var xv = tape.constant(x);
    ag::Var recon = codec.decode(tape, p, codec.encode(tape, p, xv));
    ag::Var loss = ag::mse(recon, xv);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw std::runtime_error("codec training diverged at step " + std::to_string(step));
    }
    if (step == 0) report.initial_loss = value;
    report.train_loss.push_back(value);
    tape.backward(loss);
    std::vector<Tensor> grads = nn::gradients(tape, p);
    nn::clip_global_norm(grads, cfg.grad_clip);
    const double progress = static_cast<double>(step) / cfg.steps;
    opt.set_learning_rate(cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * progress))));
    opt.step(codec.parameters(), grads);
  }
  report.final_train_loss = report.train_loss.back();

  // Rescale so encoded training latents have unit RMS; decode undoes it.
  double ss = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < train.size(); start += 64) {
    std::vector<const Tensor*> items;
    for (std::size_t i = start; i < std::min(train.size(), start + 64); ++i) items.push_back(&train[i].pixels);
    const Tensor z = codec.encode_batch(stack(items));
    for (double v : z.data()) ss += v * v;
    count += z.size();
  }
  const double rms = std::sqrt(ss / static_cast<double>(count));
  if (rms > 0.0 && std::isfinite(rms)) codec.set_latent_scale(rms);

  report.val_psnr = reconstruction_psnr(codec, val);
  return {std::move(codec), std::move(report)};
}

void save_codec(const std::filesystem::path& stem, const Codec& codec, std::uint64_t seed,
                const CodecTrainReport& report) {
  nn::save_blob(with_suffix(stem, ".bin"), codec.parameters());
  const auto& c = codec.config();
  write_json(with_suffix(stem, ".json"),
             {{"kind", "codec"},
              {"image_shape", c.image_shape()},
              {"latent_shape", c.latent_shape()},
              {"width", c.width},
              {"fine_width", c.fine_width},
              {"latent_scale", codec.latent_scale()},
              {"val_psnr_db", report.val_psnr},
              {"train_seed", seed}});
}

Codec load_codec(const std::filesystem::path& stem) {
  const nlohmann::json meta = read_json(with_suffix(stem, ".json"));
  CodecConfig c;
  const auto image = meta.at("image_shape").get<std::vector<int>>();
  const auto latent = meta.at("latent_shape").get<std::vector<int>>();
  c.image_channels = image.at(0);
  c.image_size = image.at(1);
  c.latent_channels = latent.at(0);
  c.width = meta.at("width");
  c.fine_width = meta.at("fine_width");
  return Codec(c, nn::load_blob(with_suffix(stem, ".bin")), meta.at("latent_scale").get<double>());
}

}  // namespace advdiff
