#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "urcdm/tensor.hpp"

// Images are Tensor[C,H,W] (or batched [N,C,H,W]) with values in [0,1].
namespace urcdm::image {

constexpr double kWhite = 1.0;

// Exact area averaging with fractional box weights (any ratio, up or down).
Tensor area_resize(const Tensor& img, std::size_t out_h, std::size_t out_w);

// Rect at (y, x) of size h×w; out-of-bounds pixels take `fill`.
Tensor crop(const Tensor& img, long y, long x, std::size_t h, std::size_t w, double fill = kWhite);

// Center crop when larger, symmetric white padding when smaller.
Tensor crop_or_pad(const Tensor& img, std::size_t out_h, std::size_t out_w);

// Writes `src` [C,h,w] into `dst` [C,H,W] at (y, x). Must fit.
void paste(Tensor& dst, const Tensor& src, std::size_t y, std::size_t x);

// Bilinear value at fractional pixel-center coordinates, edges clamped.
double sample_bilinear(const Tensor& img, std::size_t channel, double y, double x);

// Snap to the 8-bit grid used by the raster files.
Tensor quantize8(const Tensor& img);

// Dihedral transform k in [0,8): k&3 quarter turns, k&4 horizontal flip.
Tensor dihedral(const Tensor& img, int k);

// 8-bit RGB PNG I/O via libpng. Input must be [3,H,W].
std::vector<std::uint8_t> encode_png(const Tensor& img);
Tensor decode_png(const std::vector<std::uint8_t>& bytes);
void write_png(const std::string& path, const Tensor& img);
Tensor read_png(const std::string& path);

}  // namespace urcdm::image
