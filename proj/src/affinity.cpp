#include "declip/affinity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "declip/container.hpp"
#include "declip/region.hpp"

namespace declip {

namespace {
constexpr double kTol = 1e-6;
}

void AffinityMatrix::validate() const {
  require_matrix(values, "affinity");
  const auto n = values.rows();
  if (values.cols() != n || n != grid.size()) fail(ErrorKind::Dimension, "affinity must be HW x HW for its grid");
  switch (kind) {
    case AffinityKind::Cosine:
      for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(values.at(i, i) - 1.0) > kTol) fail(ErrorKind::Degenerate, "cosine affinity diagonal != 1");
        for (std::size_t j = 0; j < n; ++j) {
          const double v = values.at(i, j);
          if (v < -1.0 - kTol || v > 1.0 + kTol || std::abs(v - values.at(j, i)) > kTol) {
            fail(ErrorKind::Degenerate, "cosine affinity out of range or asymmetric");
          }
        }
      }
      break;
    case AffinityKind::Stochastic:
      require_row_stochastic(values, kTol, "stochastic affinity");
      break;
    case AffinityKind::Raw:
      values.check_finite("raw affinity");
      break;
  }
}

Tensor SdAttentionStack::slice(std::size_t layer) const {
  if (layer >= layers()) fail(ErrorKind::Range, "attention layer out of range");
  const auto hw = maps.shape()[1];
  const auto begin = maps.values().begin() + static_cast<std::ptrdiff_t>(layer * hw * hw);
  return Tensor({hw, hw}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(hw * hw)));
}

void SdAttentionStack::validate() const {
  if (maps.rank() != 3 || maps.shape()[1] != maps.shape()[2]) {
    fail(ErrorKind::Dimension, "attention stack must be L x HW x HW, got " + shape_str(maps.shape()));
  }
  if (maps.shape()[1] != grid.size()) fail(ErrorKind::Dimension, "attention stack does not match its grid");
  for (std::size_t l = 0; l < layers(); ++l) {
    require_row_stochastic(slice(l), kTol, ("attention slice " + std::to_string(l)).c_str());
  }
}

AffinityMatrix vfm_affinity(const Tensor& tokens, Grid grid) {
  require_matrix(tokens, "vfm_affinity");
  if (tokens.rows() != grid.size()) fail(ErrorKind::Dimension, "VFM token count does not match grid");
  Tensor s = cosine_matrix(tokens, tokens);
  // Exact symmetry and unit diagonal, independent of summation order.
  const auto n = s.rows();
  for (std::size_t i = 0; i < n; ++i) {
    s.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::clamp(s.at(i, j), -1.0, 1.0);
      s.at(i, j) = v;
      s.at(j, i) = v;
    }
  }
  return {std::move(s), AffinityKind::Cosine, grid};
}

AffinityMatrix fuse_sd_attention(const SdAttentionStack& stack) {
  stack.validate();
  if (stack.layers() == 0) fail(ErrorKind::Parameter, "empty attention stack");
  Tensor acc = stack.slice(0);
  for (std::size_t l = 1; l < stack.layers(); ++l) acc = matmul(acc, stack.slice(l));
  return {std::move(acc), AffinityKind::Stochastic, stack.grid};
}

AffinityMatrix complete_affinity(const AffinityMatrix& a_hat, const AffinityMatrix& s_vfm) {
  if (!(a_hat.grid == s_vfm.grid) || a_hat.values.shape() != s_vfm.values.shape()) {
    fail(ErrorKind::Dimension, "completion operands have different token grids");
  }
  return {matmul(a_hat.values, s_vfm.values), AffinityKind::Raw, s_vfm.grid};
}

SdAttentionStack synth_sd_attention(const Tensor& labels, double sharpness, std::mt19937_64& rng,
                                    std::size_t layers) {
  require_matrix(labels, "synth_sd_attention labels");
  if (!(sharpness >= 0.0)) fail(ErrorKind::Parameter, "sharpness must be >= 0");
  if (layers == 0) fail(ErrorKind::Parameter, "need at least one layer");
  const Grid grid{labels.rows(), labels.cols()};
  const auto hw = grid.size();
  for (double v : labels.values()) {
    if (v < 0.0) fail(ErrorKind::Parameter, "segment map leaves tokens unlabeled");
  }
  std::uniform_real_distribution<double> jitter(0.5, 1.5);
  SdAttentionStack stack;
  stack.grid = grid;
  stack.source = StackSource::Synthetic;
  stack.tag = "synthetic sharpness=" + std::to_string(sharpness);
  stack.maps = Tensor({layers, hw, hw});
  for (std::size_t l = 0; l < layers; ++l) {
    const double s = sharpness * jitter(rng);
    const bool hard = std::isinf(s);
    for (std::size_t i = 0; i < hw; ++i) {
      double* row = &stack.maps[(l * hw + i) * hw];
      double total = 0.0;
      for (std::size_t j = 0; j < hw; ++j) {
        const bool same = labels[i] == labels[j];
        // exp(s·same) / exp(s) keeps values bounded; the infinite limit drops cross-segment mass.
        const double w = hard ? (same ? 1.0 : 0.0) : (same ? 1.0 : std::exp(-s));
        row[j] = w;
        total += w;
      }
      for (std::size_t j = 0; j < hw; ++j) row[j] /= total;
    }
  }
  return stack;
}

double within_segment_mass(const Tensor& affinity, const Tensor& labels, double tau) {
  const Tensor p = softmax_rows(affinity, tau);
  if (p.rows() != labels.numel()) fail(ErrorKind::Dimension, "label count does not match affinity");
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) {
      if (labels[i] == labels[j]) m += p.at(i, j);
    }
    total += m;
  }
  return total / static_cast<double>(p.rows());
}

void write_pgm(const std::filesystem::path& path, const Tensor& plane) {
  require_matrix(plane, "write_pgm");
  const auto [lo_it, hi_it] = std::minmax_element(plane.values().begin(), plane.values().end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  std::string bytes = "P5\n" + std::to_string(plane.cols()) + " " + std::to_string(plane.rows()) + "\n255\n";
  for (double v : plane.values()) {
    const double u = span > 0.0 ? (v - lo) / span : 0.0;
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
  }
  write_text_atomic(path, bytes);
}

std::vector<AttentionDump> dump_attention_analysis(const VitParams& model, const Tensor& image,
                                                   std::span<const std::size_t> layers,
                                                   std::optional<std::size_t> query,
                                                   const std::filesystem::path& out_dir) {
  const auto& cfg = model.config;
  const Grid grid = cfg.grid();
  for (auto l : layers) {
    if (l >= cfg.depth) fail(ErrorKind::Range, "layer " + std::to_string(l) + " out of range");
  }
  if (query && *query >= grid.size()) {
    fail(ErrorKind::Range, "query token " + std::to_string(*query) + " out of range");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + out_dir.string());

  const std::size_t row_index = query ? *query + 1 : 0;
  const auto res = image.shape().at(1);
  std::vector<AttentionDump> dumps;
  for (auto l : layers) {
    AttentionDump d;
    d.layer = l;
    d.full = mean_over_heads(capture_attention(image, model, l));
    const auto t = d.full.rows();
    d.query_row = d.full.row_slice(row_index, row_index + 1);
    d.query_map = Tensor({grid.h, grid.w});
    for (std::size_t j = 0; j + 1 < t; ++j) d.query_map[j] = d.query_row[j + 1];
    d.query_upsampled = upsample_bilinear(d.query_map, res, res);

    const std::string stem = "attn_layer" + std::to_string(l);
    d.full_pgm = out_dir / (stem + "_full.pgm");
    d.query_pgm = out_dir / (stem + "_query.pgm");
    d.sidecar = out_dir / (stem + ".dten");
    write_pgm(d.full_pgm, d.full);
    write_pgm(d.query_pgm, d.query_upsampled);
    write_tensor(d.sidecar, {{"full", d.full},
                             {"query_row", d.query_row},
                             {"query_map", d.query_map},
                             {"query_upsampled", d.query_upsampled}});
    dumps.push_back(std::move(d));
  }
  return dumps;
}

}  // namespace declip
