#include "declip/region.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace declip {

void CropBox::validate() const {
  const bool finite = std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1);
  if (!finite || x0 < 0.0 || y0 < 0.0 || x1 > 1.0 || y1 > 1.0 || !(x0 < x1) || !(y0 < y1)) {
    fail(ErrorKind::Degenerate, "crop box must lie in the unit square with positive area");
  }
}

std::vector<CropBox> grid_boxes(std::size_t m, std::size_t n) {
  if (m == 0 || n == 0) fail(ErrorKind::Parameter, "grid needs at least one row and column");
  std::vector<CropBox> boxes;
  boxes.reserve(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      boxes.push_back({static_cast<double>(c) / static_cast<double>(n),
                       static_cast<double>(r) / static_cast<double>(m),
                       static_cast<double>(c + 1) / static_cast<double>(n),
                       static_cast<double>(r + 1) / static_cast<double>(m)});
    }
  return boxes;
}

std::vector<CropBox> sample_grid(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  if (lo < 1 || lo > hi) {
    fail(ErrorKind::Parameter, "grid range must satisfy 1 <= lo <= hi, got [" + std::to_string(lo) + ", " +
                                   std::to_string(hi) + "]");
  }
  std::uniform_int_distribution<std::size_t> dist(lo, hi);
  const auto m = dist(rng);
  const auto n = dist(rng);
  return grid_boxes(m, n);
}

namespace {

struct Tap {
  std::size_t index;  // flattened y * W + x
  double weight;
};

/// Four bilinear taps at continuous pixel-index coordinate (y, x), clamped to the map.
std::array<Tap, 4> bilinear_taps(double y, double x, std::size_t h, std::size_t w) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y1 = std::min(y0 + 1, h - 1);
  const auto x1 = std::min(x0 + 1, w - 1);
  const double ly = y - static_cast<double>(y0), lx = x - static_cast<double>(x0);
  return {{{y0 * w + x0, (1 - ly) * (1 - lx)},
           {y0 * w + x1, (1 - ly) * lx},
           {y1 * w + x0, ly * (1 - lx)},
           {y1 * w + x1, ly * lx}}};
}

std::vector<std::array<Tap, 4>> roi_taps(Grid grid, const CropBox& box, std::size_t n) {
  box.validate();
  if (n == 0) fail(ErrorKind::Parameter, "RoI grid side must be >= 1");
  const double fh = static_cast<double>(grid.h), fw = static_cast<double>(grid.w);
  const double bh = (box.y1 - box.y0) * fh, bw = (box.x1 - box.x0) * fw;
  if (bh < 1e-9 || bw < 1e-9) fail(ErrorKind::Degenerate, "box collapses on the feature grid");
  std::vector<std::array<Tap, 4>> taps;
  taps.reserve(n * n);
  for (std::size_t by = 0; by < n; ++by)
    for (std::size_t bx = 0; bx < n; ++bx) {
      const double cy = box.y0 * fh + (static_cast<double>(by) + 0.5) * bh / static_cast<double>(n);
      const double cx = box.x0 * fw + (static_cast<double>(bx) + 0.5) * bw / static_cast<double>(n);
      taps.push_back(bilinear_taps(cy - 0.5, cx - 0.5, grid.h, grid.w));
    }
  return taps;
}

}  // namespace

Tensor roi_align_tokens(const Tensor& tokens, Grid grid, const CropBox& box, std::size_t n) {
  require_matrix(tokens, "roi_align");
  if (tokens.rows() != grid.size()) fail(ErrorKind::Dimension, "roi_align token count does not match grid");
  const auto taps = roi_taps(grid, box, n);
  const auto c = tokens.cols();
  Tensor out({taps.size(), c});
  for (std::size_t s = 0; s < taps.size(); ++s)
    for (const auto& tap : taps[s])
      for (std::size_t j = 0; j < c; ++j) out.at(s, j) += tap.weight * tokens.at(tap.index, j);
  return out;
}

Tensor roi_align(const Tensor& features, const CropBox& box, std::size_t n) {
  if (features.rank() != 3) fail(ErrorKind::Dimension, "roi_align expects a CxHxW map");
  const Grid grid{features.shape()[1], features.shape()[2]};
  const auto c = features.shape()[0];
  Tensor tokens({grid.size(), c});
  for (std::size_t t = 0; t < grid.size(); ++t)
    for (std::size_t k = 0; k < c; ++k) tokens.at(t, k) = features[k * grid.size() + t];
  return roi_align_tokens(tokens, grid, box, n);
}

Var roi_align(Var tokens, Grid grid, const CropBox& box, std::size_t n) {
  Graph& g = *tokens.graph();
  Tensor out = roi_align_tokens(tokens.value(), grid, box, n);
  auto taps = roi_taps(grid, box, n);
  const Var parents[] = {tokens};
  return g.record(std::move(out), parents, [tokens, taps = std::move(taps)](Graph& gr, const Tensor& go) {
    auto& gt = gr.grad_slot(tokens);
    const auto c = go.cols();
    for (std::size_t s = 0; s < taps.size(); ++s)
      for (const auto& tap : taps[s])
        for (std::size_t j = 0; j < c; ++j) gt.at(tap.index, j) += tap.weight * go.at(s, j);
  });
}

Var weighted_region_pool(Var f_s, Var f_t) {
  const Var sims = cosine_matrix(f_s, f_t);  // N² × 1
  const Var weights = softmax_rows(transpose(sims), 1.0);
  return matmul(weights, f_s);
}

Tensor weighted_region_pool(const Tensor& f_s, const Tensor& f_t) {
  Graph g;
  return weighted_region_pool(g.constant(f_s), g.constant(f_t)).value();
}

Tensor crop_resize(const Tensor& image, const CropBox& box, std::size_t out_res) {
  box.validate();
  if (image.rank() != 3 || image.shape()[0] != 3 || image.shape()[1] != image.shape()[2]) {
    fail(ErrorKind::Dimension, "crop_resize expects a 3xRxR image, got " + shape_str(image.shape()));
  }
  if (out_res == 0) fail(ErrorKind::Parameter, "output resolution must be positive");
  const auto r = image.shape()[1];
  const double fr = static_cast<double>(r);
  const double sy = (box.y1 - box.y0) * fr / static_cast<double>(out_res);
  const double sx = (box.x1 - box.x0) * fr / static_cast<double>(out_res);
  Tensor out({3, out_res, out_res});
  for (std::size_t oy = 0; oy < out_res; ++oy)
    for (std::size_t ox = 0; ox < out_res; ++ox) {
      const double y = box.y0 * fr + (static_cast<double>(oy) + 0.5) * sy - 0.5;
      const double x = box.x0 * fr + (static_cast<double>(ox) + 0.5) * sx - 0.5;
      const auto taps = bilinear_taps(y, x, r, r);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = 0.0;
        for (const auto& tap : taps) v += tap.weight * image[ch * r * r + tap.index];
        out[(ch * out_res + oy) * out_res + ox] = v;
      }
    }
  return out;
}

Tensor upsample_bilinear(const Tensor& plane, std::size_t out_h, std::size_t out_w) {
  require_matrix(plane, "upsample_bilinear");
  if (out_h == 0 || out_w == 0) fail(ErrorKind::Parameter, "output size must be positive");
  const auto h = plane.rows(), w = plane.cols();
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  Tensor out({out_h, out_w});
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto taps = bilinear_taps((static_cast<double>(oy) + 0.5) * sy - 0.5,
                                      (static_cast<double>(ox) + 0.5) * sx - 0.5, h, w);
      double v = 0.0;
      for (const auto& tap : taps) v += tap.weight * plane[tap.index];
      out.at(oy, ox) = v;
    }
  return out;
}

Tensor normalize_image(const Tensor& image, std::span<const double, 3> mean, std::span<const double, 3> std) {
  if (image.rank() != 3 || image.shape()[0] != 3) fail(ErrorKind::Dimension, "normalize_image expects 3xHxW");
  const auto plane = image.shape()[1] * image.shape()[2];
  Tensor out = image;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    if (!(std[ch] > 0.0)) fail(ErrorKind::Parameter, "normalization std must be positive");
    for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] = (image[ch * plane + i] - mean[ch]) / std[ch];
  }
  return out;
}

}  // namespace declip
