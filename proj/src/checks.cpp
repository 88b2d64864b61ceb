#include "declip/checks.hpp"

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <functional>
#include <random>

#include "declip/affinity.hpp"
#include "declip/config.hpp"
#include "declip/container.hpp"
#include "declip/eval.hpp"
#include "declip/gradcheck.hpp"
#include "declip/losses.hpp"
#include "declip/region.hpp"
#include "declip/trainer.hpp"

namespace declip {

namespace {

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

CheckResult from_gradcheck(const std::string& name, const GradCheckReport& r) {
  return {name, r.passed, fmt("worst_rel=%.3g tol=%.0e", r.worst(), r.tolerance)};
}

BlockVars block_from(std::span<const Var> in, std::size_t at) {
  BlockVars b;
  Var* slots[] = {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk,   &b.bk, &b.wv, &b.bv,
                  &b.wo,    &b.bo,    &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2};
  for (Var* s : slots) *s = in[at++];
  return b;
}

// The key bias shifts every logit of a query row equally, so its exact
// gradient is zero and the relative error compares rounding noise. Held fixed;
// selftest checks the zero separately.
BlockVars block_fixed_bk(std::span<const Var> in, std::size_t at, const Tensor& bk) {
  BlockVars b = block_from(in, at);
  b.bk = in[0].graph()->constant(bk);
  return b;
}

std::vector<Tensor> block_tensors(const BlockParams& b) {
  return {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2};
}

// Nonzero norm offsets and biases so every parameter carries a gradient.
void perturb(VitParams& p, std::mt19937_64& rng) {
  for (auto& b : p.blocks) {
    for (Tensor* t : {&b.ln1_g, &b.ln2_g}) *t = Tensor::uniform(t->shape(), rng, 0.5, 1.5);
    for (Tensor* t : {&b.ln1_b, &b.ln2_b, &b.bq, &b.bk, &b.bv, &b.bo, &b.b1, &b.b2})
      *t = Tensor::uniform(t->shape(), rng, -0.2, 0.2);
  }
  p.patch_b = Tensor::uniform(p.patch_b.shape(), rng, -0.2, 0.2);
}

Var probe(Var x, const Tensor& w) { return sum(mul(x, x.graph()->constant(w))); }

}  // namespace

std::vector<CheckResult> gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  auto uniform = [&](std::size_t r, std::size_t c) { return Tensor::uniform({r, c}, rng, -1.0, 1.0); };

  VitConfig cfg;
  cfg.image_res = 4;
  cfg.patch = 2;  // 4 image tokens + CLS
  cfg.depth = 1;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.embed_dim = 6;
  cfg.init_std = 0.3;
  VitParams p = VitParams::init(cfg, seed);
  perturb(p, rng);

  const Tensor x = uniform(5, 8), w = uniform(5, 8), w4 = uniform(4, 8), w4b = uniform(4, 8);
  std::vector<Tensor> block_in = {x};
  for (const auto& t : block_tensors(p.blocks[0])) block_in.push_back(t);

  out.push_back(from_gradcheck("attention_block", finite_diff_check(
      [&](Graph&, std::span<const Var> in) { return probe(attention_block(block_fixed_bk(in, 1, p.blocks[0].bk), in[0], cfg), w); },
      block_in)));
  out.push_back(from_gradcheck("decoupled_block", finite_diff_check(
      [&](Graph&, std::span<const Var> in) {
        const DecoupledVars d = decoupled_block(block_from(in, 1), in[0], cfg);
        return add(probe(d.x_content, w4), probe(d.x_context, w4b));
      },
      block_in)));

  // Whole encoder in both modes, every parameter as an input.
  std::vector<Tensor> all;
  p.for_each([&](const std::string&, const Tensor& t) { all.push_back(t); });
  const Tensor image = Tensor::uniform({3, 4, 4}, rng, 0.0, 1.0);
  const Tensor we = uniform(4, 6);
  for (const EncodeMode mode : {EncodeMode::Standard, EncodeMode::Decoupled}) {
    out.push_back(from_gradcheck(mode == EncodeMode::Standard ? "encoder_standard" : "encoder_decoupled",
                                 finite_diff_check(
                                     [&](Graph&, std::span<const Var> in) {
                                       VitVars v;
                                       v.params = &p;
                                       v.patch_w = in[0];
                                       v.patch_b = in[1];
                                       v.cls_token = in[2];
                                       v.pos_embed = in[3];
                                       v.blocks.push_back(block_fixed_bk(in, 4, p.blocks[0].bk));
                                       v.vl_proj = in[20];
                                       return probe(encode_graph(v, image, mode).dense, we);
                                     },
                                     all)));
  }

  const Grid grid{3, 3};
  const CropBox box{0.1, 0.2, 0.85, 0.7};
  const Tensor wr = uniform(4, 5);
  out.push_back(from_gradcheck("roi_align", finite_diff_check(
      [&](Graph&, std::span<const Var> in) { return probe(roi_align(in[0], grid, box, 2), wr); }, {uniform(9, 5)})));

  const Tensor wp = uniform(1, 6);
  out.push_back(from_gradcheck("weighted_region_pool", finite_diff_check(
      [&](Graph&, std::span<const Var> in) { return probe(weighted_region_pool(in[0], in[1]), wp); },
      {uniform(4, 6), uniform(1, 6)})));

  // Losses on a 6-token instance with three regions.
  const Tensor s_hat = complete_affinity(
      fuse_sd_attention(synth_sd_attention(Tensor({2, 3}, {0, 0, 1, 0, 1, 1}), 3.0, rng, 2)),
      vfm_affinity(uniform(6, 4), {2, 3})).values;
  std::vector<Tensor> cls, vfm;
  for (int r = 0; r < 3; ++r) {
    cls.push_back(uniform(1, 8));
    vfm.push_back(uniform(4, 5));
  }
  out.push_back(from_gradcheck("context_loss", finite_diff_check(
      [&](Graph&, std::span<const Var> in) { return context_loss(in[0], s_hat, 1.0); }, {uniform(6, 8)})));
  const std::vector<Tensor> regions = {uniform(4, 8), uniform(4, 8), uniform(4, 8)};
  out.push_back(from_gradcheck("content_cos_loss", finite_diff_check(
      [&](Graph&, std::span<const Var> in) { return content_cos_loss(in, cls); }, regions)));
  out.push_back(from_gradcheck("rcc_loss", finite_diff_check(
      [&](Graph&, std::span<const Var> in) { return rcc_loss(in, vfm, 1.0); }, regions)));
  std::vector<Tensor> total_in = {uniform(6, 8)};
  total_in.insert(total_in.end(), regions.begin(), regions.end());
  out.push_back(from_gradcheck("total_loss", finite_diff_check(
      [&](Graph&, std::span<const Var> in) {
        DistillBatchInputs d;
        d.x_context = in[0];
        d.region_students.assign(in.begin() + 1, in.end());
        d.s_hat_vfm = s_hat;
        d.region_teacher_cls = cls;
        d.region_vfm = vfm;
        return distill_losses(d, 0.25, 1.0, true).total;
      },
      total_in)));
  return out;
}

std::vector<CheckResult> selftest() {
  std::vector<CheckResult> out;
  auto check = [&](const std::string& name, const std::function<bool(std::string&)>& body) {
    std::string detail;
    try {
      const bool ok = body(detail);
      out.push_back({name, ok, detail});
    } catch (const std::exception& e) {
      out.push_back({name, false, std::string("threw: ") + e.what()});
    }
  };
  auto throws_kind = [](ErrorKind kind, const std::function<void()>& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind() == kind;
    }
    return false;
  };
  auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };

  check("softmax_closed_form", [&](std::string& d) {
    const Tensor s = softmax_rows(Tensor::row({std::log(2.0), 0.0}), 1.0);
    d = fmt("%.17g %.17g", s[0], s[1]);
    return near(s[0], 2.0 / 3.0, 1e-12) && near(s[1], 1.0 / 3.0, 1e-12);
  });
  check("cosine_orthogonal", [&](std::string&) {
    return near(cosine_matrix(Tensor::row({1, 0}), Tensor::row({0, 1}))[0], 0.0, 1e-15) &&
           near(cosine_matrix(Tensor::row({1, 0}), Tensor::row({1, 0}))[0], 1.0, 1e-15);
  });
  check("kl_closed_form", [&](std::string& d) {
    const double kl = kl_rows(Tensor::row({1, 0}), Tensor::row({0.5, 0.5}));
    d = fmt("%.17g", kl);
    return near(kl, std::log(2.0), 1e-12);
  });
  check("autodiff_quadratic", [&](std::string&) {
    Graph g;
    const Var x = g.leaf(Tensor::row({1, 2}));
    g.backward(sum(mul(x, x)));
    const Tensor& gx = *g.grad(x);
    return gx[0] == 2.0 && gx[1] == 4.0;
  });
  check("token_counts", [&](std::string&) {
    VitConfig a;
    a.image_res = 560;
    a.patch = 16;
    VitConfig b;
    b.image_res = 490;
    b.patch = 14;
    return a.num_tokens() == 1226 && b.num_tokens() == 1226;
  });
  check("key_bias_gradient_vanishes", [&](std::string& d) {
    VitConfig c;
    c.image_res = 16;
    c.patch = 8;
    c.width = 8;
    c.depth = 1;
    c.init_std = 0.5;
    const VitParams p = VitParams::init(c, 3);
    std::mt19937_64 rng(4);
    Graph g;
    const VitVars v = bind_params(g, p, true);
    const Var y = attention_block(v.blocks[0], g.constant(Tensor::uniform({5, 8}, rng, -1, 1)), c);
    g.backward(sum(mul(y, g.constant(Tensor::uniform({5, 8}, rng, -1, 1)))));
    double worst = 0.0;
    for (double x : g.grad(v.blocks[0].bk)->values()) worst = std::max(worst, std::abs(x));
    d = fmt("max_abs=%.3g", worst);
    return worst < 1e-12;
  });
  check("decoupling_identity", [&](std::string& d) {
    VitConfig c;
    c.image_res = 16;
    c.patch = 8;
    c.width = 8;
    c.heads = 1;
    c.depth = 1;
    c.init_std = 0.5;
    VitParams p = VitParams::init(c, 5);
    p.blocks[0].wk = p.blocks[0].wq;
    p.blocks[0].bk = p.blocks[0].bq;
    std::mt19937_64 rng(6);
    const Tensor x = Tensor::uniform({5, 8}, rng, -1, 1);
    Graph g;
    const VitVars v = bind_params(g, p, false);
    BlockTrace trace;
    attention_block(v.blocks[0], g.constant(x), c, &trace);
    const double diff = max_abs_diff(decoupled_block(x, p, 0).attn_full, trace.attention[0]);
    d = fmt("max_diff=%.3g", diff);
    return diff < 1e-6;
  });
  check("sd_fusion_identity", [&](std::string&) {
    SdAttentionStack s;
    s.grid = {2, 2};
    s.maps = Tensor({2, 4, 4});
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t i = 0; i < 4; ++i) s.maps[(l * 4 + i) * 4 + i] = 1.0;
    const AffinityMatrix a = fuse_sd_attention(s);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        if (a.values.at(i, j) != (i == j ? 1.0 : 0.0)) return false;
    return true;
  });
  check("completion_selection", [&](std::string&) {
    std::mt19937_64 rng(8);
    const AffinityMatrix s = vfm_affinity(Tensor::uniform({4, 3}, rng, -1, 1), {2, 2});
    AffinityMatrix a{Tensor({4, 4}), AffinityKind::Stochastic, {2, 2}};
    for (std::size_t i = 0; i < 4; ++i) a.values.at(i, (i + 1) % 4) = 1.0;
    const AffinityMatrix c = complete_affinity(a, s);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        if (std::abs(c.values.at(i, j) - s.values.at((i + 1) % 4, j)) > 1e-15) return false;
    return true;
  });
  check("synth_sd_zero_sharpness", [&](std::string&) {
    std::mt19937_64 rng(9);
    const SdAttentionStack s = synth_sd_attention(Tensor({2, 2}, {0, 0, 1, 1}), 0.0, rng, 2);
    for (double v : s.maps.values())
      if (std::abs(v - 0.25) > 1e-15) return false;
    return true;
  });
  check("grid_partition", [&](std::string& d) {
    double area = 0.0;
    const auto boxes = grid_boxes(2, 3);
    for (const auto& b : boxes) area += b.area();
    d = fmt("boxes=%.0f area=%.17g", static_cast<double>(boxes.size()), area);
    return boxes.size() == 6 && near(area, 1.0, 1e-12);
  });
  check("roi_align_center", [&](std::string& d) {
    const Tensor r = roi_align(Tensor({1, 2, 2}, {1, 2, 3, 4}), CropBox{}, 1);
    d = fmt("%.17g", r[0]);
    return near(r[0], 2.5, 1e-12);
  });
  check("weighted_pool_fixed_point", [&](std::string&) {
    Graph g;
    const Var f = g.constant(Tensor({3, 2}, {0.3, -0.7, 0.3, -0.7, 0.3, -0.7}));
    const Tensor r = weighted_region_pool(f, g.constant(Tensor::row({1, 1}))).value();
    return near(r[0], 0.3, 1e-15) && near(r[1], -0.7, 1e-15);
  });
  check("crop_resize_ramp", [&](std::string& d) {
    Tensor img({3, 4, 4});
    for (std::size_t i = 0; i < 48; ++i) img[i] = static_cast<double>(i);
    const Tensor r = crop_resize(img, CropBox{}, 2);
    d = fmt("%.17g %.17g", r[0], r[3]);
    return near(r[0], 2.5, 1e-9) && near(r[1], 4.5, 1e-9) && near(r[2], 10.5, 1e-9) && near(r[3], 12.5, 1e-9);
  });
  check("context_loss_zero", [&](std::string&) {
    std::mt19937_64 rng(10);
    const Tensor x = Tensor::uniform({4, 3}, rng, -1, 1);
    Graph g;
    return std::abs(context_loss(g.constant(x), cosine_matrix(x, x), 1.0).value()[0]) < 1e-9;
  });
  check("content_loss_aligned", [&](std::string&) {
    Graph g;
    const std::vector<Var> s{g.constant(Tensor({2, 2}, {1, 0, 2, 0}))};
    const std::vector<Tensor> t{Tensor::row({3, 0})};
    return std::abs(content_cos_loss(s, t).value()[0]) < 1e-12;
  });
  check("total_loss_arithmetic", [&](std::string& d) {
    const LossReport r = total_loss(0.4, 0.1, 0.2, 0.25);
    d = fmt("%.17g", r.l_total);
    return near(r.l_total, 0.4, 1e-15);
  });
  check("resolution_pair", [&](std::string&) {
    using P = std::pair<std::size_t, std::size_t>;
    return resolution_pair(16, 14, 35) == P(560, 490) && resolution_pair(16, 16, 4) == P(64, 64) &&
           resolution_pair(8, 4, 6) == P(48, 24);
  });
  check("adamw_closed_form", [&](std::string& d) {
    Tensor p = Tensor::full({1}, 0.5), g = Tensor::full({1}, 0.2), m({1}), v({1});
    adamw_update(p, g, m, v, 1, {1e-3, 0.9, 0.999, 1e-8, 0.1});
    const double want = 0.5 * (1 - 1e-4) - 1e-3 * 0.2 / (0.2 + 1e-8);
    d = fmt("%.17g vs %.17g", p[0], want);
    return near(p[0], want, 1e-12);
  });
  check("adamw_decay_only", [&](std::string&) {
    Tensor p = Tensor::full({1}, 2.0), g({1}), m({1}), v({1});
    adamw_update(p, g, m, v, 1, {0.01, 0.9, 0.999, 1e-8, 0.1});
    return near(p[0], 2.0 * (1 - 0.001), 1e-15);
  });
  check("miou_example", [&](std::string& d) {
    const double m = miou(Tensor({2, 2}, {0, 1, 1, 1}), Tensor({2, 2}, {0, 0, 1, 1}), 2).miou;
    d = fmt("%.17g", m);
    return near(m, 7.0 / 12.0, 1e-15);
  });
  check("top1_macc_example", [&](std::string&) {
    const std::vector<std::size_t> gt{0, 0, 1, 1}, pred{0, 0, 0, 0};
    return top1_macc(pred, gt) == 0.5 && throws_kind(ErrorKind::Parameter, [] { top1_macc({}, {}); });
  });
  check("segment_antipodal", [&](std::string&) {
    ClassEmbeddings c = make_class_embeddings(Tensor({2, 2}, {1, 0, -1, 0}), ClassSource::Synthetic);
    DenseFeatures f;
    f.tokens = Tensor({4, 2}, {1, 0, 2, 0, 3, 0, 4, 0});
    f.grid = {2, 2};
    const SegResult r = segment_training_free(f, c, 4);
    for (double v : r.upsampled.values())
      if (v != 0.0) return false;
    return r.scores[0] == 1.0 && r.scores[4] == -1.0;
  });
  check("container_empty_header", [&](std::string& d) {
    const auto bytes = encode_tensors({});
    d = fmt("%.0f bytes", static_cast<double>(bytes.size()));
    return bytes.size() == 12;
  });
  check("container_round_trip", [&](std::string&) {
    std::mt19937_64 rng(11);
    const Tensor t = Tensor::randn({3, 3}, rng);
    return decode_tensors(encode_tensors({{"x", t}}))[0].second.bitwise_equal(t);
  });
  check("container_bad_magic", [&](std::string&) {
    auto bytes = encode_tensors({});
    bytes[0] = 'X';
    return throws_kind(ErrorKind::BadMagic, [&] { decode_tensors(bytes); });
  });
  check("config_defaults", [&](std::string&) {
    const DistillConfig c = parse_config_text("");
    return c.lambda == 0.25 && c.epochs == 6 && c.lr == 1e-5 && c.weight_decay == 0.1 && c.batch_size == 2;
  });
  check("config_range_error", [&](std::string&) {
    return throws_kind(ErrorKind::Range, [] { parse_config_text("lambda = -1"); });
  });
  check("config_echo_round_trip", [&](std::string&) {
    DistillConfig c;
    c.lambda = 0.1 + 0.2;
    c.variant = Variant::Coupled;
    return parse_config_text(echo_config(c)) == c;
  });
  return out;
}

std::string format_checks(const std::vector<CheckResult>& results) {
  std::string out;
  for (const auto& r : results) {
    out += (r.passed ? "PASS " : "FAIL ") + r.name;
    if (!r.detail.empty()) out += " " + r.detail;
    out += "\n";
  }
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return true;
}

}  // namespace declip
