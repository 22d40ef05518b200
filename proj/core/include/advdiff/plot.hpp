#pragma once

// Minimal raster line plots written as PNG.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace advdiff {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::array<unsigned char, 3> color{31, 119, 180};
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

/// Panels are stacked vertically in one image, each `panel_width` x `panel_height`.
void write_line_plots(const std::filesystem::path& path, const std::vector<LinePlot>& panels,
                      int panel_width = 520, int panel_height = 300);

/// Default colour for the i-th series.
std::array<unsigned char, 3> palette(std::size_t i);

}  // namespace advdiff
