#include "advdiff/io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "advdiff/nn.hpp"

namespace advdiff {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

unsigned char to_byte(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

void write_png_rows(const std::filesystem::path& path, int width, int height, int bit_depth,
                    int color_type, const std::vector<std::vector<unsigned char>>& rows) {
  ensure_parent(path);
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng error writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& row : rows) png_write_row(png, row.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

std::filesystem::path with_suffix(const std::filesystem::path& stem, const std::string& suffix) {
  std::filesystem::path p = stem;
  p += suffix;
  return p;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& value) {
  write_text(path, value.dump(2) + "\n");
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_png(const std::filesystem::path& path, const ImageSample& image) {
  const int h = image.height(), w = image.width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> rgb(plane * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            to_byte(image.pixels[c * plane + static_cast<std::size_t>(y) * w + x]);
  write_rgb_png(path, w, h, rgb);
}

void write_rgb_png(const std::filesystem::path& path, int width, int height,
                   const std::vector<unsigned char>& rgb) {
  std::vector<std::vector<unsigned char>> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    auto begin = rgb.begin() + static_cast<std::ptrdiff_t>(y) * width * 3;
    rows[static_cast<std::size_t>(y)].assign(begin, begin + width * 3);
  }
  write_png_rows(path, width, height, 8, PNG_COLOR_TYPE_RGB, rows);
}

void write_mask_png(const std::filesystem::path& path, const IdentityMask& mask) {
  const int h = mask.height(), w = mask.width();
  std::vector<std::vector<unsigned char>> rows(static_cast<std::size_t>(h),
                                               std::vector<unsigned char>((w + 7) / 8, 0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.mask[static_cast<std::size_t>(y) * w + x] != 0.0)
        rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x / 8)] |=
            static_cast<unsigned char>(0x80 >> (x % 8));
  write_png_rows(path, w, h, 1, PNG_COLOR_TYPE_GRAY, rows);
}

ImageSample read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw std::runtime_error("cannot read PNG " + path.string());
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw std::runtime_error("cannot decode PNG " + path.string());
  }
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor pixels({3, h, w});
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) pixels[c * plane + p] = buf[p * 3 + c] / 255.0;
  return ImageSample{std::move(pixels), std::nullopt, std::nullopt};
}

void save_tensors(const std::filesystem::path& path, const std::vector<std::string>& names,
                  const std::vector<Tensor>& tensors) {
  if (names.size() != tensors.size()) throw std::invalid_argument("save_tensors: size mismatch");
  nn::ParameterSet set;
  for (std::size_t i = 0; i < names.size(); ++i) set.add(names[i], tensors[i]);
  nn::save_blob(path, set);
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::filesystem::path& path) {
  const nn::ParameterSet set = nn::load_blob(path);
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < set.size(); ++i) out.emplace_back(set.name(i), set[i]);
  return out;
}

std::string fingerprint(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace advdiff
