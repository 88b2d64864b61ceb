#pragma once

#include <random>
#include <span>
#include <vector>

#include "declip/autodiff.hpp"

namespace declip {

/// Axis-aligned box in normalized image coordinates, x to the right, y down.
struct CropBox {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;

  double area() const { return (x1 - x0) * (y1 - y0); }
  /// Throws ErrorKind::Degenerate unless inside the unit square with positive area.
  void validate() const;
  bool operator==(const CropBox&) const = default;
};

/// Row-major m × n partition of the unit square (m rows, n columns).
std::vector<CropBox> grid_boxes(std::size_t m, std::size_t n);

/// Draws m, n uniformly from [lo, hi] and returns grid_boxes(m, n).
std::vector<CropBox> sample_grid(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 6);

/// One bilinear sample at each of the N×N bin centers of `box` over a C×H×W
/// map, with half-pixel alignment. Returns N²×C rows in row-major bin order.
Tensor roi_align(const Tensor& features, const CropBox& box, std::size_t n);
/// Same sampling over HW×C token rows laid out on `grid`.
Tensor roi_align_tokens(const Tensor& tokens, Grid grid, const CropBox& box, std::size_t n);
Var roi_align(Var tokens, Grid grid, const CropBox& box, std::size_t n);

/// softmax over rows of cos(f_s row, f_t), then the weighted sum of f_s rows.
Var weighted_region_pool(Var f_s, Var f_t);
Tensor weighted_region_pool(const Tensor& f_s, const Tensor& f_t);

/// Bilinear resample of the boxed region of a 3×R×R image to 3×out×out.
Tensor crop_resize(const Tensor& image, const CropBox& box, std::size_t out_res);

/// Bilinear resample of an H×W plane to out_h × out_w (half-pixel centers).
Tensor upsample_bilinear(const Tensor& plane, std::size_t out_h, std::size_t out_w);

/// Per-channel (x - mean) / std over a 3×R×R image.
Tensor normalize_image(const Tensor& image, std::span<const double, 3> mean, std::span<const double, 3> std);

}  // namespace declip
