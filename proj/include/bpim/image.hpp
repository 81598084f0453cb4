#pragma once

#include <array>
#include <filesystem>

#include "bpim/geometry.hpp"
#include "bpim/tensor.hpp"

namespace bpim::image {

/// RGB images are [3, H, W] tensors with values in [0, 1].
using Rgb = std::array<double, 3>;

/// Reads an 8-bit PNG (gray, RGB or with alpha) as RGB. Throws std::runtime_error.
Tensor read_png(const std::filesystem::path& path);
/// Writes 8-bit RGB; values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Tensor& img);

/// Bilinear resize with half-pixel centres.
Tensor resize_bilinear(const Tensor& img, std::int64_t oh, std::int64_t ow);

/// Draws the outline of a box given in pixel corners (x1, y1) .. (x2, y2),
/// exclusive of x2/y2, clipped to the image.
void draw_rect(Tensor& img, std::int64_t x1, std::int64_t y1, std::int64_t x2, std::int64_t y2, const Rgb& color,
               int thickness = 1);

/// Pixel corners of a normalised box: floor of the left/top edge and ceil of
/// the right/bottom edge, clamped to the image.
std::array<std::int64_t, 4> pixel_corners(const geometry::Box& box, std::int64_t width, std::int64_t height);

/// Distinct colour per class index.
Rgb class_color(int cls);

}  // namespace bpim::image
