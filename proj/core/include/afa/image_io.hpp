#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "afa/types.hpp"

namespace afa {

/// Decoded raster with values in [0, 1], channel-major (C, H, W).
struct Image {
  ImageShape shape;
  std::vector<double> pixels;
};

/// PNG (via libpng) and binary PGM/PPM (P5/P6). Grayscale inputs are
/// replicated to three channels; alpha is dropped.
Image load_image(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const Image& image);
void save_ppm(const std::filesystem::path& path, const Image& image);

/// Bilinear resampling of a region [x0, x0 + w) x [y0, y0 + h) of `src` to `out`
/// (half-pixel centers, edge clamped).
std::vector<double> resize_region(std::span<const double> src, ImageShape shape, double x0, double y0, double w,
                                  double h, int out_h, int out_w);

}  // namespace afa
