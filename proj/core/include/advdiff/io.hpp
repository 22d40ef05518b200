#pragma once

// File helpers: structured-text (JSON) records, lossless PNG output, tensor
// bundles and CSV rows.

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "advdiff/tensor.hpp"
#include "advdiff/types.hpp"

namespace advdiff {

/// `stem` with `suffix` appended to the filename (not replacing an extension).
std::filesystem::path with_suffix(const std::filesystem::path& stem, const std::string& suffix);

void write_json(const std::filesystem::path& path, const nlohmann::json& value);
nlohmann::json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// 8-bit RGB PNG of a 3 x H x W image in [0, 1].
void write_png(const std::filesystem::path& path, const ImageSample& image);
/// 1-bit grayscale PNG; agnostic pixels (mask = 1) are written white.
void write_mask_png(const std::filesystem::path& path, const IdentityMask& mask);
/// 8-bit RGB PNG from interleaved rows of width*height*3 bytes.
void write_rgb_png(const std::filesystem::path& path, int width, int height,
                   const std::vector<unsigned char>& rgb);
/// Reads an 8-bit RGB PNG back into a 3 x H x W image.
ImageSample read_png(const std::filesystem::path& path);

/// Named tensors in the checkpoint blob format.
void save_tensors(const std::filesystem::path& path, const std::vector<std::string>& names,
                  const std::vector<Tensor>& tensors);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::filesystem::path& path);

/// 64-bit FNV-1a of a string, rendered as 16 hex digits.
std::string fingerprint(const std::string& text);

}  // namespace advdiff
