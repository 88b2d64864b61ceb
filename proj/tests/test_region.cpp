#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "declip/gradcheck.hpp"
#include "declip/region.hpp"
#include "test_util.hpp"

using namespace declip;
using namespace declip::testing;

namespace {

/// Scalar bilinear sample of channel c at continuous pixel coordinates (y, x),
/// clamped to the map.
double bilinear_oracle(const Tensor& f, std::size_t c, double y, double x) {
  const std::size_t h = f.shape()[1], w = f.shape()[2];
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double dy = y - static_cast<double>(y0), dx = x - static_cast<double>(x0);
  auto v = [&](std::size_t yy, std::size_t xx) { return f[(c * h + yy) * w + xx]; };
  return (1 - dy) * ((1 - dx) * v(y0, x0) + dx * v(y0, x1)) + dy * ((1 - dx) * v(y1, x0) + dx * v(y1, x1));
}

Tensor roi_oracle(const Tensor& f, const CropBox& b, std::size_t n) {
  const std::size_t c = f.shape()[0];
  const double h = static_cast<double>(f.shape()[1]), w = static_cast<double>(f.shape()[2]);
  Tensor out({n * n, c});
  for (std::size_t by = 0; by < n; ++by)
    for (std::size_t bx = 0; bx < n; ++bx) {
      const double y = (b.y0 + (b.y1 - b.y0) * (by + 0.5) / static_cast<double>(n)) * h - 0.5;
      const double x = (b.x0 + (b.x1 - b.x0) * (bx + 0.5) / static_cast<double>(n)) * w - 0.5;
      for (std::size_t ch = 0; ch < c; ++ch) out.at(by * n + bx, ch) = bilinear_oracle(f, ch, y, x);
    }
  return out;
}

Tensor pool_oracle(const Tensor& fs, const Tensor& ft) {
  std::vector<double> w(fs.rows());
  double z = 0.0;
  for (std::size_t i = 0; i < fs.rows(); ++i) {
    w[i] = std::exp(oracle_cos(fs, i, ft, 0));
    z += w[i];
  }
  Tensor out({1, fs.cols()});
  for (std::size_t i = 0; i < fs.rows(); ++i)
    for (std::size_t j = 0; j < fs.cols(); ++j) out.at(0, j) += w[i] / z * fs.at(i, j);
  return out;
}

CropBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
  if (a > b) std::swap(a, b);
  if (c > d) std::swap(c, d);
  return {a, c, std::max(b, a + 0.05), std::max(d, c + 0.05)};
}

}  // namespace

TEST(SampleGrid, SingleBoxAndPartition) {
  const auto one = grid_boxes(1, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], (CropBox{0, 0, 1, 1}));
  const auto six = grid_boxes(2, 3);
  ASSERT_EQ(six.size(), 6u);
  double area = 0.0;
  for (const auto& b : six) area += b.area();
  EXPECT_NEAR(area, 1.0, 1e-12);
}

TEST(SampleGrid, BoxesTileTheUnitSquare) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto boxes = sample_grid(rng);
    double area = 0.0;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      boxes[i].validate();
      area += boxes[i].area();
      for (std::size_t j = i + 1; j < boxes.size(); ++j) {
        const double ox = std::min(boxes[i].x1, boxes[j].x1) - std::max(boxes[i].x0, boxes[j].x0);
        const double oy = std::min(boxes[i].y1, boxes[j].y1) - std::max(boxes[i].y0, boxes[j].y0);
        EXPECT_FALSE(ox > 1e-12 && oy > 1e-12);
      }
    }
    EXPECT_NEAR(area, 1.0, 1e-12);
  }
}

TEST(SampleGrid, PairsAreUniform) {
  std::mt19937_64 rng(4);
  std::map<std::pair<double, double>, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto boxes = sample_grid(rng);
    // m rows and n columns are recovered from the first box's extent.
    counts[{std::round(1.0 / boxes[0].y1), std::round(1.0 / boxes[0].x1)}]++;
  }
  EXPECT_EQ(counts.size(), 36u);
  const double p = 1.0 / 36.0, mean = draws * p, sigma = std::sqrt(draws * p * (1 - p));
  double chi2 = 0.0;
  for (const auto& [key, c] : counts) {
    EXPECT_LT(std::abs(c - mean), 3 * sigma) << key.first << "x" << key.second;
    chi2 += (c - mean) * (c - mean) / mean;
  }
  EXPECT_LT(chi2, 66.6);  // 35 dof, p = 0.001
}

TEST(SampleGrid, InvalidRangeIsParameterError) {
  std::mt19937_64 rng(1);
  for (auto [lo, hi] : {std::pair<std::size_t, std::size_t>{0, 3}, {4, 2}}) {
    try {
      sample_grid(rng, lo, hi);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Parameter);
    }
  }
}

TEST(RoiAlign, ConstantMap) {
  const Tensor f = Tensor::full({3, 5, 7}, 2.25);
  const Tensor r = roi_align(f, {0.1, 0.3, 0.8, 0.9}, 3);
  for (double v : r.values()) EXPECT_DOUBLE_EQ(v, 2.25);
}

TEST(RoiAlign, TwoByTwoCentre) {
  const Tensor f = Tensor::matrix({{1, 2}, {3, 4}}).reshaped({1, 2, 2});
  EXPECT_NEAR(roi_align(f, {}, 1)[0], 2.5, 1e-12);
}

TEST(RoiAlign, MatchesScalarOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 1 + rng() % 4, h = 1 + rng() % 7, w = 1 + rng() % 7, n = 1 + rng() % 5;
    const Tensor f = Tensor::uniform({c, h, w}, rng, -2, 2);
    const CropBox b = random_box(rng);
    EXPECT_LT(max_abs_diff(roi_align(f, b, n), roi_oracle(f, b, n)), 1e-6);
  }
}

TEST(RoiAlign, TokenLayoutAgreesWithMapLayout) {
  std::mt19937_64 rng(6);
  const Tensor f = Tensor::uniform({4, 3, 5}, rng, -1, 1);
  Tensor tokens({15, 4});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 15; ++p) tokens.at(p, c) = f[c * 15 + p];
  const CropBox b{0.2, 0.1, 0.9, 0.7};
  EXPECT_TRUE(roi_align_tokens(tokens, {3, 5}, b, 3).bitwise_equal(roi_align(f, b, 3)));
}

TEST(RoiAlign, IsLinearInTheMap) {
  std::mt19937_64 rng(7);
  const Tensor f = Tensor::uniform({2, 6, 6}, rng, -1, 1), g = Tensor::uniform({2, 6, 6}, rng, -1, 1);
  Tensor mix(f.shape());
  for (std::size_t i = 0; i < f.numel(); ++i) mix[i] = 0.7 * f[i] - 1.3 * g[i];
  const CropBox b{0.15, 0.05, 0.65, 0.95};
  const Tensor rf = roi_align(f, b, 4), rg = roi_align(g, b, 4), rm = roi_align(mix, b, 4);
  for (std::size_t i = 0; i < rm.numel(); ++i) EXPECT_NEAR(rm[i], 0.7 * rf[i] - 1.3 * rg[i], 1e-6);
}

TEST(RoiAlign, DegenerateBox) {
  try {
    roi_align(Tensor::full({1, 4, 4}, 1.0), {0.5, 0.2, 0.5, 0.6}, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
}

TEST(RoiAlign, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const Tensor tokens = rand_matrix(rng, 20, 3);
  const Tensor w = probe_weights(9, {9, 3});
  const auto r = finite_diff_check(
      [&](Graph&, std::span<const Var> in) { return probe(roi_align(in[0], {4, 5}, {0.1, 0.2, 0.85, 0.7}, 3), w); },
      {tokens});
  EXPECT_TRUE(r.passed) << r.worst();
}

TEST(WeightedPool, SingleRowAndIdenticalRows) {
  const Tensor row = Tensor::matrix({{0.3, -1.2, 2.0}});
  const Tensor t = Tensor::matrix({{1.0, 0.5, -0.1}});
  EXPECT_LT(max_abs_diff(weighted_region_pool(row, t), row), 1e-15);
  const Tensor same = Tensor::matrix({{0.3, -1.2, 2.0}, {0.3, -1.2, 2.0}, {0.3, -1.2, 2.0}});
  EXPECT_LT(max_abs_diff(weighted_region_pool(same, t), row), 1e-12);
}

TEST(WeightedPool, MatchesOracleAndStaysInHull) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor fs = rand_matrix(rng, 4, 3), ft = rand_matrix(rng, 1, 3);
    const Tensor out = weighted_region_pool(fs, ft);
    EXPECT_LT(max_abs_diff(out, pool_oracle(fs, ft)), 1e-6);
    for (std::size_t j = 0; j < 3; ++j) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t i = 0; i < 4; ++i) {
        lo = std::min(lo, fs.at(i, j));
        hi = std::max(hi, fs.at(i, j));
      }
      EXPECT_GE(out.at(0, j), lo - 1e-9);
      EXPECT_LE(out.at(0, j), hi + 1e-9);
    }
  }
}

TEST(WeightedPool, ZeroNormIsDegenerate) {
  try {
    weighted_region_pool(Tensor::matrix({{1, 2}, {0, 0}}), Tensor::matrix({{1, 1}}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
}

TEST(WeightedPool, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const Tensor w = probe_weights(12, {1, 3});
  const auto r = finite_diff_check(
      [&](Graph&, std::span<const Var> in) { return probe(weighted_region_pool(in[0], in[1]), w); },
      {rand_matrix(rng, 4, 3), rand_matrix(rng, 1, 3)});
  EXPECT_TRUE(r.passed) << r.worst();
}

TEST(CropResize, FullBoxIsIdentityAndConstantStaysConstant) {
  std::mt19937_64 rng(13);
  const Tensor img = Tensor::uniform({3, 8, 8}, rng, 0, 1);
  EXPECT_LT(max_abs_diff(crop_resize(img, {}, 8), img), 1e-6);
  const Tensor c = crop_resize(Tensor::full({3, 9, 9}, 0.4), {0.1, 0.2, 0.6, 0.9}, 5);
  for (double v : c.values()) EXPECT_NEAR(v, 0.4, 1e-12);
}

TEST(CropResize, RampDownscale) {
  // Value = 10·row + col on a 4×4 plane; 2×2 output pixel centres land at 0.5 and 2.5.
  Tensor img({3, 4, 4});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) img[(c * 4 + y) * 4 + x] = 10.0 * y + x + c;
  const Tensor out = crop_resize(img, {}, 2);
  const double expect[2][2] = {{5.5, 7.5}, {25.5, 27.5}};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) EXPECT_NEAR(out[(c * 2 + y) * 2 + x], expect[y][x] + c, 1e-6);
}

TEST(CropResize, DegenerateBox) {
  EXPECT_THROW(crop_resize(Tensor::full({3, 4, 4}, 1.0), {0.3, 0.3, 0.3, 0.8}, 2), Error);
  EXPECT_THROW(crop_resize(Tensor::full({3, 4, 4}, 1.0), {-0.1, 0.0, 0.5, 0.8}, 2), Error);
}

TEST(Upsample, SameSizeIsIdentity) {
  std::mt19937_64 rng(14);
  const Tensor p = rand_matrix(rng, 3, 5);
  EXPECT_LT(max_abs_diff(upsample_bilinear(p, 3, 5), p), 1e-12);
  const Tensor up = upsample_bilinear(Tensor::matrix({{0, 1}, {2, 3}}), 4, 4);
  EXPECT_NEAR(up.at(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(up.at(3, 3), 3.0, 1e-12);
  EXPECT_NEAR(up.at(1, 1), 0.75, 1e-12);
}
