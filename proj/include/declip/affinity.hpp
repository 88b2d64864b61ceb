#pragma once

#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "declip/vit.hpp"

namespace declip {

enum class AffinityKind {
  Cosine,      // symmetric, unit diagonal, entries in [-1, 1]
  Stochastic,  // nonnegative rows summing to 1
  Raw,         // completed affinity before any distribution conversion
};

struct AffinityMatrix {
  Tensor values;  // HW × HW
  AffinityKind kind = AffinityKind::Raw;
  Grid grid;

  /// Checks the invariants of `kind` at tolerance 1e-6.
  void validate() const;
};

enum class StackSource { Ingested, Synthetic };

/// L row-stochastic HW×HW maps sharing one token grid.
struct SdAttentionStack {
  Tensor maps;  // L × HW × HW
  Grid grid;
  StackSource source = StackSource::Ingested;
  std::string tag;  // provenance, e.g. "t=45/50 up_blocks" or "synthetic s=4"

  std::size_t layers() const { return maps.shape()[0]; }
  Tensor slice(std::size_t layer) const;
  void validate() const;
};

/// Pairwise cosine similarity of HW×D VFM tokens.
AffinityMatrix vfm_affinity(const Tensor& tokens, Grid grid);

/// Ordered chain product A[0]·A[1]·…·A[L-1] in 64-bit.
AffinityMatrix fuse_sd_attention(const SdAttentionStack& stack);

/// Ŝ = Â × S_vfm. Each output row is a convex combination of S_vfm rows.
AffinityMatrix complete_affinity(const AffinityMatrix& a_hat, const AffinityMatrix& s_vfm);

/// Synthetic stand-in for diffusion self-attention: row i of each map puts
/// weight exp(s_l · [label_i == label_j]) on token j, with a per-layer
/// sharpness s_l = sharpness · U(0.5, 1.5). Labels are an H×W map.
SdAttentionStack synth_sd_attention(const Tensor& labels, double sharpness, std::mt19937_64& rng,
                                    std::size_t layers = 4);

/// Fraction of each row's softmax mass that lands on same-label tokens,
/// averaged over rows.
double within_segment_mass(const Tensor& affinity, const Tensor& labels, double tau = 1.0);

struct AttentionDump {
  std::size_t layer = 0;
  Tensor full;            // (1+HW) × (1+HW), mean over heads
  Tensor query_row;       // 1 × (1+HW), the selected row including the CLS column
  Tensor query_map;       // H × W image-token part of the row
  Tensor query_upsampled; // R × R
  std::filesystem::path full_pgm, query_pgm, sidecar;
};

/// For each layer, writes the mean-over-heads map and the query row
/// (bilinearly upsampled to input resolution) as P5 grey maps, plus a DTEN
/// sidecar with the raw values. `query` indexes image tokens; nullopt selects CLS.
std::vector<AttentionDump> dump_attention_analysis(const VitParams& model, const Tensor& image,
                                                   std::span<const std::size_t> layers,
                                                   std::optional<std::size_t> query,
                                                   const std::filesystem::path& out_dir);

/// Binary grey map (P5), min-max scaled to 0..255; a constant plane maps to 0.
void write_pgm(const std::filesystem::path& path, const Tensor& plane);

}  // namespace declip
