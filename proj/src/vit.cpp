#include "declip/vit.hpp"

#include <cmath>
#include <random>

namespace declip {

void VitConfig::validate() const {
  if (patch == 0 || image_res == 0 || depth == 0 || width == 0 || heads == 0 || mlp_ratio == 0) {
    fail(ErrorKind::Parameter, "ViT extents must be positive");
  }
  if (width % heads != 0) {
    fail(ErrorKind::Parameter, "width " + std::to_string(width) + " not divisible by heads " +
                                   std::to_string(heads));
  }
  if (image_res % patch != 0) {
    fail(ErrorKind::Dimension, "resolution " + std::to_string(image_res) + " not divisible by patch " +
                                   std::to_string(patch));
  }
  if (!(init_std > 0.0) || !(norm_eps > 0.0)) fail(ErrorKind::Parameter, "init_std and norm_eps must be positive");
}

VitParams VitParams::init(const VitConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto c = config.width;
  const auto hidden = c * config.mlp_ratio;
  const double sd = config.init_std;
  VitParams p;
  p.config = config;
  p.patch_w = Tensor::randn({3 * config.patch * config.patch, c}, rng, sd);
  p.patch_b = Tensor::zeros({1, c});
  p.cls_token = Tensor::randn({1, c}, rng, sd);
  p.pos_embed = Tensor::randn({config.num_tokens(), c}, rng, sd);
  for (std::size_t i = 0; i < config.depth; ++i) {
    BlockParams b;
    b.ln1_g = Tensor::full({1, c}, 1.0);
    b.ln1_b = Tensor::zeros({1, c});
    b.wq = Tensor::randn({c, c}, rng, sd);
    b.bq = Tensor::zeros({1, c});
    b.wk = Tensor::randn({c, c}, rng, sd);
    b.bk = Tensor::zeros({1, c});
    b.wv = Tensor::randn({c, c}, rng, sd);
    b.bv = Tensor::zeros({1, c});
    b.wo = Tensor::randn({c, c}, rng, sd);
    b.bo = Tensor::zeros({1, c});
    b.ln2_g = Tensor::full({1, c}, 1.0);
    b.ln2_b = Tensor::zeros({1, c});
    b.w1 = Tensor::randn({c, hidden}, rng, sd);
    b.b1 = Tensor::zeros({1, hidden});
    b.w2 = Tensor::randn({hidden, c}, rng, sd);
    b.b2 = Tensor::zeros({1, c});
    p.blocks.push_back(std::move(b));
  }
  if (config.embed_dim) p.vl_proj = Tensor::randn({c, config.embed_dim}, rng, sd);
  return p;
}

VitParams VitParams::frozen_copy() const {
  VitParams p = *this;
  p.frozen_ = true;
  return p;
}

VitParams VitParams::trainable_copy() const {
  VitParams p = *this;
  p.frozen_ = false;
  return p;
}

namespace {

template <typename P, typename F>
void visit_params(P& p, F&& fn) {
  fn(std::string("patch_w"), p.patch_w);
  fn(std::string("patch_b"), p.patch_b);
  fn(std::string("cls_token"), p.cls_token);
  fn(std::string("pos_embed"), p.pos_embed);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    fn(pre + "ln1_g", b.ln1_g);
    fn(pre + "ln1_b", b.ln1_b);
    fn(pre + "wq", b.wq);
    fn(pre + "bq", b.bq);
    fn(pre + "wk", b.wk);
    fn(pre + "bk", b.bk);
    fn(pre + "wv", b.wv);
    fn(pre + "bv", b.bv);
    fn(pre + "wo", b.wo);
    fn(pre + "bo", b.bo);
    fn(pre + "ln2_g", b.ln2_g);
    fn(pre + "ln2_b", b.ln2_b);
    fn(pre + "w1", b.w1);
    fn(pre + "b1", b.b1);
    fn(pre + "w2", b.w2);
    fn(pre + "b2", b.b2);
  }
  if (!p.vl_proj.empty()) fn(std::string("vl_proj"), p.vl_proj);
}

}  // namespace

void VitParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_params(*this, fn);
}

void VitParams::for_each_mut(const std::function<void(const std::string&, Tensor&)>& fn) {
  if (frozen_) fail(ErrorKind::Mode, "frozen parameters reject writes");
  visit_params(*this, fn);
}

std::size_t VitParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

bool VitParams::bitwise_equal(const VitParams& other) const {
  std::vector<const Tensor*> a, b;
  for_each([&](const std::string&, const Tensor& t) { a.push_back(&t); });
  other.for_each([&](const std::string&, const Tensor& t) { b.push_back(&t); });
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i]->bitwise_equal(*b[i])) return false;
  }
  return true;
}

VitVars bind_params(Graph& g, const VitParams& params, bool trainable,
                    std::optional<std::size_t> trainable_layers) {
  if (trainable && params.frozen()) fail(ErrorKind::Mode, "cannot bind frozen parameters as trainable");
  const auto depth = params.config.depth;
  const std::size_t layers = trainable_layers.value_or(depth);
  if (layers > depth) fail(ErrorKind::Parameter, "trainable_layers exceeds depth");
  const std::size_t first_trainable = depth - layers;

  VitVars v;
  v.params = &params;
  auto bind = [&](const std::string& name, const Tensor& t, bool grad) {
    Var var = g.leaf(t, grad);
    v.named.emplace_back(name, var);
    return var;
  };
  const bool embeddings = trainable && layers == depth;
  v.patch_w = bind("patch_w", params.patch_w, embeddings);
  v.patch_b = bind("patch_b", params.patch_b, embeddings);
  v.cls_token = bind("cls_token", params.cls_token, embeddings);
  v.pos_embed = bind("pos_embed", params.pos_embed, embeddings);
  for (std::size_t i = 0; i < depth; ++i) {
    const auto& b = params.blocks[i];
    const bool t = trainable && i >= first_trainable;
    const std::string pre = "blocks." + std::to_string(i) + ".";
    BlockVars bv;
    bv.ln1_g = bind(pre + "ln1_g", b.ln1_g, t);
    bv.ln1_b = bind(pre + "ln1_b", b.ln1_b, t);
    bv.wq = bind(pre + "wq", b.wq, t);
    bv.bq = bind(pre + "bq", b.bq, t);
    bv.wk = bind(pre + "wk", b.wk, t);
    bv.bk = bind(pre + "bk", b.bk, t);
    bv.wv = bind(pre + "wv", b.wv, t);
    bv.bv = bind(pre + "bv", b.bv, t);
    bv.wo = bind(pre + "wo", b.wo, t);
    bv.bo = bind(pre + "bo", b.bo, t);
    bv.ln2_g = bind(pre + "ln2_g", b.ln2_g, t);
    bv.ln2_b = bind(pre + "ln2_b", b.ln2_b, t);
    bv.w1 = bind(pre + "w1", b.w1, t);
    bv.b1 = bind(pre + "b1", b.b1, t);
    bv.w2 = bind(pre + "w2", b.w2, t);
    bv.b2 = bind(pre + "b2", b.b2, t);
    v.blocks.push_back(bv);
  }
  if (!params.vl_proj.empty()) v.vl_proj = bind("vl_proj", params.vl_proj, trainable && layers > 0);
  return v;
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3 || image.shape()[0] != 3 || image.shape()[1] != image.shape()[2]) {
    fail(ErrorKind::Dimension, "image must be 3xRxR, got " + shape_str(image.shape()));
  }
  const auto res = image.shape()[1];
  if (patch == 0 || res % patch != 0) {
    fail(ErrorKind::Dimension, "resolution " + std::to_string(res) + " not divisible by patch " +
                                   std::to_string(patch));
  }
  const auto side = res / patch;
  Tensor out({side * side, 3 * patch * patch});
  for (std::size_t py = 0; py < side; ++py)
    for (std::size_t px = 0; px < side; ++px) {
      double* row = &out.at(py * side + px, 0);
      std::size_t k = 0;
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx) {
            row[k++] = image[(ch * res + py * patch + dy) * res + px * patch + dx];
          }
    }
  return out;
}

Var patch_embed(const VitVars& vars, const Tensor& image) {
  const auto& cfg = vars.params->config;
  if (image.rank() == 3 && image.shape()[1] != cfg.image_res) {
    fail(ErrorKind::Dimension, "image resolution " + std::to_string(image.shape()[1]) +
                                   " does not match model resolution " + std::to_string(cfg.image_res));
  }
  Graph& g = *vars.patch_w.graph();
  const Var patches = g.constant(patchify(image, cfg.patch));
  const Var emb = add_row(matmul(patches, vars.patch_w), vars.patch_b);
  const Var parts[] = {vars.cls_token, emb};
  return add(concat_rows(parts), vars.pos_embed);
}

namespace {

Var affine_norm(Var x, Var gamma, Var beta, double eps) {
  return add_row(mul_row(layer_norm_rows(x, eps), gamma), beta);
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

/// Multi-head attention with per-head 1/sqrt(d) scaling; returns the
/// concatenated head outputs before the output projection.
Var multi_head(Var q, Var k, Var v, const VitConfig& cfg, std::vector<Tensor>* maps) {
  const auto heads = cfg.heads, d = cfg.head_dim();
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = heads == 1 ? q : slice_cols(q, h * d, (h + 1) * d);
    const Var kh = q.id() == k.id() ? qh : (heads == 1 ? k : slice_cols(k, h * d, (h + 1) * d));
    const Var vh = heads == 1 ? v : slice_cols(v, h * d, (h + 1) * d);
    const Var attn = softmax_rows(scale(matmul_bt(qh, kh), inv), 1.0);
    if (maps) maps->push_back(attn.value());
    outs.push_back(matmul(attn, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

Tensor mean_maps(const std::vector<Tensor>& maps) {
  Tensor out(maps[0].shape());
  for (const auto& m : maps)
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += m[i];
  for (auto& v : out.values()) v /= static_cast<double>(maps.size());
  return out;
}

}  // namespace

Var attention_block(const BlockVars& b, Var x, const VitConfig& cfg, BlockTrace* trace) {
  const Var h = affine_norm(x, b.ln1_g, b.ln1_b, cfg.norm_eps);
  const Var q = linear(h, b.wq, b.bq);
  const Var k = linear(h, b.wk, b.bk);
  const Var v = linear(h, b.wv, b.bv);
  std::vector<Tensor> maps;
  const Var attn_out = multi_head(q, k, v, cfg, &maps);
  const Var y = add(x, linear(attn_out, b.wo, b.bo));
  const Var h2 = affine_norm(y, b.ln2_g, b.ln2_b, cfg.norm_eps);
  const Var z = add(y, linear(gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
  if (trace) {
    trace->input = x.value();
    trace->q = q.value();
    trace->k = k.value();
    trace->attention = std::move(maps);
  }
  return z;
}

DecoupledVars decoupled_block(const BlockVars& b, Var x, const VitConfig& cfg, BlockTrace* trace) {
  const auto t = x.value().rows();
  const Var h = affine_norm(x, b.ln1_g, b.ln1_b, cfg.norm_eps);
  const Var ctx = linear(h, b.wq, b.bq);
  const Var v = linear(h, b.wv, b.bv);
  std::vector<Tensor> maps;
  const Var content = linear(multi_head(ctx, ctx, v, cfg, &maps), b.wo, b.bo);

  DecoupledVars out;
  out.content_all = content;
  out.attn_full = mean_maps(maps);
  if (t > 1) {
    out.x_context = slice_rows(ctx, 1, t);
    out.x_content = slice_rows(content, 1, t);
    const auto hw = t - 1;
    out.attn_context = Tensor({hw, hw});
    for (std::size_t i = 0; i < hw; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < hw; ++j) s += out.attn_full.at(i + 1, j + 1);
      for (std::size_t j = 0; j < hw; ++j) out.attn_context.at(i, j) = out.attn_full.at(i + 1, j + 1) / s;
    }
  } else {
    // No CLS to drop: a bare single token.
    out.x_context = ctx;
    out.x_content = content;
    out.attn_context = out.attn_full;
  }
  if (trace) {
    trace->input = x.value();
    trace->q = ctx.value();
    trace->k = ctx.value();
    trace->attention = std::move(maps);
  }
  return out;
}

EncodedVars encode_graph(const VitVars& vars, const Tensor& image, EncodeMode mode, ForwardTrace* trace) {
  const auto& cfg = vars.params->config;
  if (trace) trace->blocks.assign(cfg.depth, BlockTrace{});
  Var x = patch_embed(vars, image);
  for (std::size_t i = 0; i + 1 < cfg.depth; ++i) {
    x = attention_block(vars.blocks[i], x, cfg, trace ? &trace->blocks[i] : nullptr);
  }
  const auto last = cfg.depth - 1;
  BlockTrace* last_trace = trace ? &trace->blocks[last] : nullptr;
  const auto t = cfg.num_tokens();

  EncodedVars enc;
  enc.grid = cfg.grid();
  Var dense_c, cls_c;
  if (mode == EncodeMode::Standard) {
    enc.final_tokens = attention_block(vars.blocks[last], x, cfg, last_trace);
    dense_c = slice_rows(enc.final_tokens, 1, t);
    cls_c = slice_rows(enc.final_tokens, 0, 1);
  } else {
    enc.decoupled = decoupled_block(vars.blocks[last], x, cfg, last_trace);
    enc.final_tokens = enc.decoupled->content_all;
    dense_c = enc.decoupled->x_content;
    cls_c = slice_rows(enc.decoupled->content_all, 0, 1);
  }
  if (vars.vl_proj.valid()) {
    enc.dense = matmul(dense_c, vars.vl_proj);
    enc.cls = matmul(cls_c, vars.vl_proj);
  } else {
    enc.dense = dense_c;
    enc.cls = cls_c;
  }
  return enc;
}

Tensor tokens_to_map(const Tensor& tokens, Grid grid) {
  require_matrix(tokens, "tokens_to_map");
  if (tokens.rows() != grid.size()) {
    fail(ErrorKind::Dimension, "token count " + std::to_string(tokens.rows()) + " does not match grid");
  }
  const auto d = tokens.cols();
  Tensor out({d, grid.h, grid.w});
  for (std::size_t t = 0; t < grid.size(); ++t)
    for (std::size_t c = 0; c < d; ++c) out[c * grid.size() + t] = tokens.at(t, c);
  return out;
}

Tensor map_to_tokens(const Tensor& map) {
  if (map.rank() != 3) fail(ErrorKind::Dimension, "feature map must be CxHxW");
  const auto d = map.shape()[0], hw = map.shape()[1] * map.shape()[2];
  Tensor out({hw, d});
  for (std::size_t t = 0; t < hw; ++t)
    for (std::size_t c = 0; c < d; ++c) out.at(t, c) = map[c * hw + t];
  return out;
}

Tensor patch_embed(const Tensor& image, const VitParams& params) {
  Graph g;
  const VitVars v = bind_params(g, params, false);
  return patch_embed(v, image).value();
}

namespace {
void check_block_index(const VitParams& params, std::size_t block) {
  if (block >= params.config.depth) {
    fail(ErrorKind::Range, "block " + std::to_string(block) + " out of range for depth " +
                               std::to_string(params.config.depth));
  }
}
}  // namespace

Tensor attention_block(const Tensor& x, const VitParams& params, std::size_t block) {
  check_block_index(params, block);
  Graph g;
  const VitVars v = bind_params(g, params, false);
  return attention_block(v.blocks[block], g.constant(x), params.config).value();
}

DecoupledOutput decoupled_block(const Tensor& x, const VitParams& params, std::size_t block) {
  if (params.frozen()) fail(ErrorKind::Mode, "decoupled block requested on a frozen teacher");
  check_block_index(params, block);
  Graph g;
  const VitVars v = bind_params(g, params, false);
  const auto d = decoupled_block(v.blocks[block], g.constant(x), params.config);
  return {d.x_context.value(), d.x_content.value(), d.attn_context, d.attn_full};
}

DenseFeatures encode_dense(const Tensor& image, const VitParams& params, EncodeMode mode,
                           DecoupledOutput* decoupled, ForwardTrace* trace) {
  if (mode == EncodeMode::Decoupled && params.frozen()) {
    fail(ErrorKind::Mode, "decoupled encoding requested on a frozen teacher");
  }
  Graph g;
  const VitVars v = bind_params(g, params, false);
  const EncodedVars enc = encode_graph(v, image, mode, trace);
  DenseFeatures out;
  out.grid = enc.grid;
  out.tokens = enc.dense.value();
  out.dense = tokens_to_map(out.tokens, enc.grid);
  out.cls = enc.cls.value().reshaped({enc.cls.value().numel()});
  if (decoupled && enc.decoupled) {
    *decoupled = {enc.decoupled->x_context.value(), enc.decoupled->x_content.value(),
                  enc.decoupled->attn_context, enc.decoupled->attn_full};
  }
  return out;
}

Tensor encode_cls(const Tensor& image, const VitParams& params) {
  Graph g;
  const VitVars v = bind_params(g, params, false);
  const EncodedVars enc = encode_graph(v, image, EncodeMode::Standard);
  return enc.cls.value().reshaped({enc.cls.value().numel()});
}

Tensor capture_attention(const Tensor& image, const VitParams& params, std::size_t layer) {
  check_block_index(params, layer);
  ForwardTrace trace;
  Graph g;
  const VitVars v = bind_params(g, params, false);
  encode_graph(v, image, EncodeMode::Standard, &trace);
  const auto& maps = trace.blocks[layer].attention;
  const auto t = maps[0].rows(), heads = maps.size();
  Tensor out({t, t, heads});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t h = 0; h < heads; ++h) out[(i * t + j) * heads + h] = maps[h].at(i, j);
  return out;
}

Tensor mean_over_heads(const Tensor& per_head) {
  if (per_head.rank() != 3) fail(ErrorKind::Dimension, "expected T x T x heads");
  const auto t = per_head.shape()[0], heads = per_head.shape()[2];
  Tensor out({t, per_head.shape()[1]});
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double s = 0.0;
    for (std::size_t h = 0; h < heads; ++h) s += per_head[i * heads + h];
    out[i] = s / static_cast<double>(heads);
  }
  return out;
}

}  // namespace declip
