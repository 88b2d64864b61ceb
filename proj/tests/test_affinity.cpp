#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "declip/affinity.hpp"
#include "declip/container.hpp"
#include "declip/region.hpp"
#include "test_util.hpp"

using namespace declip;
using namespace declip::testing;
namespace fs = std::filesystem;

namespace {

SdAttentionStack stack_of(const std::vector<Tensor>& maps, Grid grid) {
  const std::size_t hw = maps[0].rows();
  Tensor all({maps.size(), hw, hw});
  for (std::size_t l = 0; l < maps.size(); ++l)
    std::copy(maps[l].values().begin(), maps[l].values().end(), all.values().begin() + l * hw * hw);
  return {all, grid, StackSource::Ingested, "test"};
}

AffinityMatrix stochastic(const Tensor& t, Grid g) { return {t, AffinityKind::Stochastic, g}; }

Tensor two_segment_labels() {
  Tensor labels({3, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) labels.at(i, j) = j < 2 ? 0 : 1;
  return labels;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("declip_affinity_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(VfmAffinity, IdenticalAndOrthogonalPairs) {
  const auto same = vfm_affinity(Tensor::matrix({{1, 2}, {1, 2}}), {1, 2});
  for (double v : same.values.values()) EXPECT_NEAR(v, 1.0, 1e-12);
  const auto orth = vfm_affinity(Tensor::matrix({{3, 0}, {0, 0.5}}), {1, 2});
  EXPECT_TRUE(orth.values.bitwise_equal(Tensor::eye(2)));
  EXPECT_EQ(orth.kind, AffinityKind::Cosine);
}

TEST(VfmAffinity, MatchesPairwiseOracle) {
  std::mt19937_64 rng(1);
  const Tensor x = rand_matrix(rng, 9, 4);
  const auto s = vfm_affinity(x, {3, 3});
  s.validate();
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(s.values.at(i, j), oracle_cos(x, i, x, j), 1e-6);
}

TEST(VfmAffinity, ScaleInvariantPerToken) {
  std::mt19937_64 rng(2);
  const Tensor x = rand_matrix(rng, 6, 5);
  Tensor scaled = x;
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (std::size_t i = 0; i < 6; ++i) {
    const double s = u(rng);
    for (std::size_t j = 0; j < 5; ++j) scaled.at(i, j) *= s;
  }
  EXPECT_LT(max_abs_diff(vfm_affinity(x, {2, 3}).values, vfm_affinity(scaled, {2, 3}).values), 1e-6);
}

TEST(VfmAffinity, ZeroTokenIsDegenerate) {
  try {
    vfm_affinity(Tensor::matrix({{1, 2}, {0, 0}}), {1, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
}

TEST(FuseSd, SingleLayerAndIdentity) {
  std::mt19937_64 rng(3);
  const Tensor a = rand_stochastic(rng, 4, 4);
  EXPECT_TRUE(fuse_sd_attention(stack_of({a}, {2, 2})).values.bitwise_equal(a));
  const auto id = fuse_sd_attention(stack_of({Tensor::eye(4), Tensor::eye(4), Tensor::eye(4)}, {2, 2}));
  EXPECT_TRUE(id.values.bitwise_equal(Tensor::eye(4)));
  EXPECT_EQ(id.kind, AffinityKind::Stochastic);
}

TEST(FuseSd, MatchesProductOracle) {
  std::mt19937_64 rng(4);
  const Tensor a = rand_stochastic(rng, 4, 4), b = rand_stochastic(rng, 4, 4);
  const auto f = fuse_sd_attention(stack_of({a, b}, {2, 2}));
  EXPECT_LT(max_abs_diff(f.values, oracle_matmul(a, b)), 1e-12);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += f.values.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(FuseSd, StochasticClosureOverRandomStacks) {
  std::mt19937_64 rng(5);
  for (std::size_t layers = 1; layers <= 8; ++layers) {
    std::vector<Tensor> maps;
    for (std::size_t l = 0; l < layers; ++l) maps.push_back(rand_stochastic(rng, 9, 9));
    const auto f = fuse_sd_attention(stack_of(maps, {3, 3}));
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_GE(f.values.at(i, j), 0.0);
        s += f.values.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(FuseSd, Associative) {
  std::mt19937_64 rng(6);
  const Tensor a = rand_stochastic(rng, 6, 6), b = rand_stochastic(rng, 6, 6), c = rand_stochastic(rng, 6, 6);
  const auto left = fuse_sd_attention(stack_of({fuse_sd_attention(stack_of({a, b}, {2, 3})).values, c}, {2, 3}));
  const auto right = fuse_sd_attention(stack_of({a, fuse_sd_attention(stack_of({b, c}, {2, 3})).values}, {2, 3}));
  EXPECT_LT(max_abs_diff(left.values, right.values), 1e-9);
  EXPECT_LT(max_abs_diff(left.values, fuse_sd_attention(stack_of({a, b, c}, {2, 3})).values), 1e-12);
}

TEST(FuseSd, NonStochasticSliceIsDistributionError) {
  Tensor bad = Tensor::eye(4);
  bad.at(1, 1) = 0.5;
  try {
    fuse_sd_attention(stack_of({Tensor::eye(4), bad}, {2, 2}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Distribution);
  }
}

TEST(CompleteAffinity, IdentityAndSelection) {
  std::mt19937_64 rng(7);
  const auto s = vfm_affinity(rand_matrix(rng, 6, 3), {2, 3});
  EXPECT_LT(max_abs_diff(complete_affinity(stochastic(Tensor::eye(6), {2, 3}), s).values, s.values), 1e-15);
  Tensor sel = Tensor::zeros({6, 6});
  for (std::size_t i = 0; i < 6; ++i) sel.at(i, (i + 2) % 6) = 1.0;
  const auto out = complete_affinity(stochastic(sel, {2, 3}), s);
  EXPECT_EQ(out.kind, AffinityKind::Raw);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(out.values.at(i, j), s.values.at((i + 2) % 6, j));
}

TEST(CompleteAffinity, MatchesOracleAndIsConvex) {
  std::mt19937_64 rng(8);
  const auto s = vfm_affinity(rand_matrix(rng, 6, 4), {2, 3});
  const Tensor a = rand_stochastic(rng, 6, 6);
  const auto out = complete_affinity(stochastic(a, {2, 3}), s);
  EXPECT_LT(max_abs_diff(out.values, oracle_matmul(a, s.values)), 1e-9);
  for (std::size_t j = 0; j < 6; ++j) {
    double lo = 1e9, hi = -1e9;
    for (std::size_t i = 0; i < 6; ++i) {
      lo = std::min(lo, s.values.at(i, j));
      hi = std::max(hi, s.values.at(i, j));
    }
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_GE(out.values.at(i, j), lo - 1e-9);
      EXPECT_LE(out.values.at(i, j), hi + 1e-9);
      EXPECT_LE(std::abs(out.values.at(i, j)), 1.0 + 1e-9);
    }
  }
}

TEST(CompleteAffinity, GridMismatch) {
  std::mt19937_64 rng(9);
  const auto s = vfm_affinity(rand_matrix(rng, 6, 4), {2, 3});
  try {
    complete_affinity(stochastic(Tensor::eye(4), {2, 2}), s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dimension);
  }
}

TEST(SynthSd, InfiniteSharpnessGivesBlockMaps) {
  std::mt19937_64 rng(10);
  const Tensor labels = two_segment_labels();
  const auto stack = synth_sd_attention(labels, std::numeric_limits<double>::infinity(), rng, 3);
  stack.validate();
  EXPECT_EQ(stack.source, StackSource::Synthetic);
  for (std::size_t l = 0; l < 3; ++l) {
    const Tensor m = stack.slice(l);
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j)
        EXPECT_NEAR(m.at(i, j), labels[i] == labels[j] ? 1.0 / 6.0 : 0.0, 1e-12);
  }
}

TEST(SynthSd, ZeroSharpnessGivesUniformRows) {
  std::mt19937_64 rng(11);
  const auto stack = synth_sd_attention(two_segment_labels(), 0.0, rng, 2);
  for (double v : stack.maps.values()) EXPECT_NEAR(v, 1.0 / 12.0, 1e-12);
}

TEST(SynthSd, BadLabelsAreParameterErrors) {
  std::mt19937_64 rng(12);
  Tensor labels = two_segment_labels();
  labels.at(0, 0) = -1;
  try {
    synth_sd_attention(labels, 2.0, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Parameter);
  }
}

TEST(SynthSd, CompletionRaisesWithinSegmentMass) {
  std::mt19937_64 rng(13);
  // 6×6 grid, three vertical stripes. VFM tokens are noisy class prototypes,
  // and about a fifth of them carry the wrong prototype (feature holes).
  Tensor labels({6, 6});
  for (std::size_t i = 0; i < 36; ++i) labels[i] = static_cast<double>((i % 6) / 2);
  const Tensor protos = rand_matrix(rng, 3, 8);
  Tensor tokens({36, 8});
  std::normal_distribution<double> noise(0.0, 0.3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < 36; ++i) {
    auto c = static_cast<std::size_t>(labels[i]);
    if (u(rng) < 0.2) c = (c + 1) % 3;
    for (std::size_t j = 0; j < 8; ++j) tokens.at(i, j) = protos.at(c, j) + noise(rng);
  }
  const auto s = vfm_affinity(tokens, {6, 6});
  const auto s_hat = complete_affinity(fuse_sd_attention(synth_sd_attention(labels, 6.0, rng, 4)), s);
  // Row averaging shrinks contrast, so the comparison uses a sharp softmax.
  const double before = within_segment_mass(s.values, labels, 0.1);
  const double after = within_segment_mass(s_hat.values, labels, 0.1);
  EXPECT_GT(after, before);
}

TEST(AttentionDump, ClsRowMatchesCaptureAndFilesExist) {
  VitConfig c;
  c.image_res = 16;
  c.patch = 4;
  c.depth = 1;
  c.width = 8;
  c.heads = 2;
  const auto model = VitParams::init(c, 14).frozen_copy();
  std::mt19937_64 rng(15);
  const Tensor img = Tensor::uniform({3, 16, 16}, rng, 0, 1);
  const auto dir = scratch_dir("cls");
  const std::size_t layers[] = {0};
  const auto dumps = dump_attention_analysis(model, img, layers, std::nullopt, dir);
  ASSERT_EQ(dumps.size(), 1u);
  const Tensor full = mean_over_heads(capture_attention(img, model, 0));
  for (std::size_t j = 0; j < 17; ++j) EXPECT_NEAR(dumps[0].query_row[j], full.at(0, j), 1e-6);
  double row_sum = 0.0;
  for (double v : dumps[0].query_row.values()) row_sum += v;
  EXPECT_NEAR(row_sum, 1.0, 1e-6);
  EXPECT_EQ(dumps[0].query_upsampled.shape(), (Shape{16, 16}));
  for (const auto& p : {dumps[0].full_pgm, dumps[0].query_pgm, dumps[0].sidecar}) EXPECT_TRUE(fs::exists(p));
  const auto side = read_tensor(dumps[0].sidecar);
  EXPECT_TRUE(find_section(side, "query_map").bitwise_equal(dumps[0].query_map));
  std::ifstream in(dumps[0].query_pgm, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 16u);
  EXPECT_EQ(h, 16u);
  EXPECT_EQ(maxv, 255u);
}

TEST(AttentionDump, QueryTokenRowsAndRangeErrors) {
  VitConfig c;
  c.image_res = 8;
  c.patch = 2;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  const auto model = VitParams::init(c, 16).frozen_copy();
  std::mt19937_64 rng(17);
  const Tensor img = Tensor::uniform({3, 8, 8}, rng, 0, 1);
  const auto dir = scratch_dir("query");
  const std::size_t layers[] = {0, 1};
  const auto dumps = dump_attention_analysis(model, img, layers, 5, dir);
  for (const auto& d : dumps) {
    for (std::size_t i = 0; i < 17; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 17; ++j) s += d.full.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    const Tensor full = mean_over_heads(capture_attention(img, model, d.layer));
    EXPECT_NEAR(d.query_row[3], full.at(6, 3), 1e-12);
    // Grid 4×4 upsampled to 8×8 keeps the mean of the map.
    double a = 0.0, b = 0.0;
    for (double v : d.query_map.values()) a += v / 16.0;
    for (double v : d.query_upsampled.values()) b += v / 64.0;
    EXPECT_NEAR(a, b, 1e-9);
  }
  const std::size_t bad_layer[] = {2};
  EXPECT_THROW(dump_attention_analysis(model, img, bad_layer, std::nullopt, dir), Error);
  try {
    dump_attention_analysis(model, img, layers, 16, dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Range);
  }
}

TEST(AttentionDump, UnitScaleUpsampleIsIdentity) {
  std::mt19937_64 rng(18);
  const Tensor p = rand_stochastic(rng, 4, 4);
  EXPECT_LT(max_abs_diff(upsample_bilinear(p, 4, 4), p), 1e-12);
}
