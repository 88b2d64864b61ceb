#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "declip/autodiff.hpp"

namespace declip {

struct VitConfig {
  std::size_t image_res = 32;
  std::size_t patch = 8;
  std::size_t depth = 2;
  std::size_t width = 16;  // C
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t embed_dim = 0;  // vision-language projection width; 0 disables it
  double init_std = 0.02;
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return width / heads; }
  std::size_t grid_side() const { return image_res / patch; }
  Grid grid() const { return {grid_side(), grid_side()}; }
  std::size_t num_tokens() const { return 1 + grid_side() * grid_side(); }
  /// Width of the dense output (embed_dim when projecting, else width).
  std::size_t out_dim() const { return embed_dim ? embed_dim : width; }
  void validate() const;
  bool operator==(const VitConfig&) const = default;
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;  // output projection (Proj)
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;  // FFN
};

/// Full parameter set of a small ViT. Weights are stored input-major, so a
/// linear layer computes x · W + b on row tokens.
class VitParams {
 public:
  VitConfig config;
  Tensor patch_w;    // (3·p²) × C
  Tensor patch_b;    // 1 × C
  Tensor cls_token;  // 1 × C
  Tensor pos_embed;  // (1 + h·w) × C
  std::vector<BlockParams> blocks;
  Tensor vl_proj;    // C × E, empty when config.embed_dim == 0

  /// Gaussian(0, init_std) projections and embeddings, zero biases, unit norm
  /// scales. Deterministic in `seed`.
  static VitParams init(const VitConfig& config, std::uint64_t seed);

  bool frozen() const noexcept { return frozen_; }
  void freeze() noexcept { frozen_ = true; }
  /// A frozen copy sharing nothing with the source.
  VitParams frozen_copy() const;
  VitParams trainable_copy() const;

  /// Visits every tensor in a fixed order with its stable name.
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  /// Mutable traversal; throws ErrorKind::Mode on a frozen instance.
  void for_each_mut(const std::function<void(const std::string&, Tensor&)>& fn);

  std::size_t parameter_count() const;
  bool bitwise_equal(const VitParams& other) const;

 private:
  bool frozen_ = false;
};

struct BlockVars {
  Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Parameters bound into a graph. Trainable tensors become gradient leaves.
struct VitVars {
  const VitParams* params = nullptr;
  Var patch_w, patch_b, cls_token, pos_embed, vl_proj;
  std::vector<BlockVars> blocks;
  /// (name, var) for every tensor, in VitParams::for_each order.
  std::vector<std::pair<std::string, Var>> named;
};

/// Binds params into `g`. When `trainable` is set, the last `trainable_layers`
/// blocks (and, if all blocks are trainable, the embeddings and projection)
/// become gradient leaves; everything else is constant. Frozen params cannot
/// be bound as trainable.
VitVars bind_params(Graph& g, const VitParams& params, bool trainable,
                    std::optional<std::size_t> trainable_layers = std::nullopt);

/// Intermediates of one block forward.
struct BlockTrace {
  Tensor input;                  // T × C
  Tensor q, k;                   // T × C (q doubles as x_context in decoupled mode)
  std::vector<Tensor> attention; // per head, T × T
};

struct ForwardTrace {
  std::vector<BlockTrace> blocks;
};

enum class EncodeMode { Standard, Decoupled };

/// Unfolds a 3×R×R image into (R/p)² rows of 3·p² pixels, ordered (channel, dy, dx).
Tensor patchify(const Tensor& image, std::size_t patch);

Var patch_embed(const VitVars& vars, const Tensor& image);
/// Pre-norm block: Y = X + Proj(Attn_qk · V), Z = Y + FFN(LN(Y)).
Var attention_block(const BlockVars& b, Var x, const VitConfig& cfg, BlockTrace* trace = nullptr);

struct DecoupledVars {
  Var x_context;  // HW × C, query projection of the block input
  Var x_content;  // HW × C, Proj(Attn_context · V) without residual or FFN
  Var content_all;  // (1+HW) × C including the CLS row
  Tensor attn_full;    // (1+HW) × (1+HW), mean over heads
  Tensor attn_context; // HW × HW, image-token block of attn_full, rows renormalized
};

DecoupledVars decoupled_block(const BlockVars& b, Var x, const VitConfig& cfg, BlockTrace* trace = nullptr);

struct EncodedVars {
  Grid grid;
  Var dense;  // HW × out_dim: the dense features in vision-language space
  Var cls;    // 1 × out_dim
  std::optional<DecoupledVars> decoupled;
  Var final_tokens;  // (1+HW) × C output of the last block (standard mode)
};

EncodedVars encode_graph(const VitVars& vars, const Tensor& image, EncodeMode mode,
                         ForwardTrace* trace = nullptr);

// Tensor-level API (no gradient recording).

struct DenseFeatures {
  Tensor dense;   // D × H × W
  Tensor cls;     // D
  Tensor tokens;  // HW × D
  Grid grid;
};

struct DecoupledOutput {
  Tensor x_context;
  Tensor x_content;
  Tensor attn_context;
  Tensor attn_full;
};

Tensor patch_embed(const Tensor& image, const VitParams& params);
Tensor attention_block(const Tensor& x, const VitParams& params, std::size_t block);
/// Mode error when params are frozen: the teacher runs standard blocks only.
DecoupledOutput decoupled_block(const Tensor& x, const VitParams& params, std::size_t block);

DenseFeatures encode_dense(const Tensor& image, const VitParams& params, EncodeMode mode,
                           DecoupledOutput* decoupled = nullptr, ForwardTrace* trace = nullptr);
/// Z[0] after the final standard block, through the projection when present.
Tensor encode_cls(const Tensor& image, const VitParams& params);
/// Per-head attention of block `layer`, shape (1+HW) × (1+HW) × heads.
Tensor capture_attention(const Tensor& image, const VitParams& params, std::size_t layer);
/// Mean over the head axis of a capture_attention result.
Tensor mean_over_heads(const Tensor& per_head);

/// Reshapes HW × D tokens into a D × H × W map and back.
Tensor tokens_to_map(const Tensor& tokens, Grid grid);
Tensor map_to_tokens(const Tensor& map);

}  // namespace declip
