#include <gtest/gtest.h>

#include <cmath>

#include "declip/autodiff.hpp"
#include "declip/gradcheck.hpp"
#include "test_util.hpp"

using namespace declip;
using namespace declip::testing;

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), Error);
  EXPECT_THROW(Tensor({0, 2}), Error);
}

TEST(Tensor, DtypeRoundsValues) {
  Tensor t({1, 2}, {0.1, 2.6}, DType::F32);
  EXPECT_EQ(t[0], static_cast<double>(0.1f));
  t.set_dtype(DType::I32);
  EXPECT_EQ(t[1], 3.0);
}

TEST(Matmul, IdentityAndPermutation) {
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_TRUE(matmul(Tensor::eye(2), m).bitwise_equal(m));
  const Tensor p = Tensor::matrix({{0, 1}, {1, 0}});
  EXPECT_TRUE(matmul(Tensor::eye(2), p).bitwise_equal(p));
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(11);
  const Tensor a = rand_matrix(rng, 3, 4), b = rand_matrix(rng, 4, 2);
  EXPECT_LT(max_abs_diff(matmul(a, b), oracle_matmul(a, b)), 1e-12);
  Graph g;
  EXPECT_LT(max_abs_diff(matmul(g.constant(a), g.constant(b)).value(), oracle_matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
  try {
    matmul(Tensor({3, 4}), Tensor({3, 2}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dimension);
  }
}

TEST(Softmax, ClosedForms) {
  const Tensor u = softmax_rows(Tensor::row({0, 0, 0}), 1.0);
  for (double v : u.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Tensor s = softmax_rows(Tensor::row({std::log(2.0), 0.0}), 1.0);
  EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = rand_matrix(rng, 5, 7, -30.0, 30.0);
    const Tensor y = softmax_rows(x, 0.5 + trial * 0.1);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(y.at(i, j), 0.0);
        s += y.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Softmax, MatchesOracleAndStaysStableForLargeLogits) {
  std::mt19937_64 rng(5);
  const Tensor x = rand_matrix(rng, 4, 6, -3, 3);
  EXPECT_LT(max_abs_diff(softmax_rows(x, 0.7), oracle_softmax(x, 0.7)), 1e-12);
  const Tensor big = Tensor::row({1000.0, 999.0});
  EXPECT_TRUE(softmax_rows(big, 1.0).all_finite());
}

TEST(Softmax, NonPositiveTemperatureIsParameterError) {
  try {
    softmax_rows(Tensor::row({1, 2}), 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Parameter);
  }
}

TEST(Cosine, SelfAndOrthogonal) {
  EXPECT_NEAR(cosine_matrix(Tensor::row({1, 0}), Tensor::row({1, 0}))[0], 1.0, 1e-15);
  EXPECT_NEAR(cosine_matrix(Tensor::row({1, 0}), Tensor::row({0, 1}))[0], 0.0, 1e-15);
}

TEST(Cosine, MatchesPerPairOracleAndBounds) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = rand_matrix(rng, 8, 3), b = rand_matrix(rng, 8, 3);
    const Tensor c = cosine_matrix(a, b);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_NEAR(c.at(i, j), oracle_cos(a, i, b, j), 1e-6);
        EXPECT_LE(std::abs(c.at(i, j)), 1.0 + 1e-9);
      }
    const Tensor self = cosine_matrix(a, a);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(self.at(i, i), 1.0, 1e-9);
  }
}

TEST(Cosine, ZeroRowIsDegenerate) {
  try {
    cosine_matrix(Tensor::matrix({{1, 0}, {0, 0}}), Tensor::row({1, 1}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
}

TEST(Kl, ClosedForms) {
  std::mt19937_64 rng(1);
  const Tensor p = rand_stochastic(rng, 3, 4);
  EXPECT_NEAR(kl_rows(p, p), 0.0, 1e-12);
  EXPECT_NEAR(kl_rows(Tensor::row({1, 0}), Tensor::row({0.5, 0.5})), std::log(2.0), 1e-15);
}

TEST(Kl, MatchesDoubleLoopAndIsNonNegative) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor p = rand_stochastic(rng, 4, 4), q = rand_stochastic(rng, 4, 4);
    const double v = kl_rows(p, q);
    EXPECT_NEAR(v, oracle_kl(p, q), 1e-9);
    EXPECT_GE(v, -1e-9);
    EXPECT_LE(kl_rows(p, p), 1e-9);
  }
}

TEST(Kl, NonStochasticIsDistributionError) {
  try {
    kl_rows(Tensor::row({0.5, 0.6}), Tensor::row({0.5, 0.5}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Distribution);
  }
}

TEST(Kl, ClampsZeroStudentMass) {
  // q = 0 where p > 0: log is taken of the 1e-8 clamp.
  EXPECT_NEAR(kl_rows(Tensor::row({0.5, 0.5}), Tensor::row({1.0, 0.0})),
              0.5 * std::log(0.5) + 0.5 * (std::log(0.5) - std::log(1e-8)), 1e-12);
}

TEST(Backward, LinearAndQuadratic) {
  Graph g;
  const Var x = g.leaf(Tensor::row({1, 2, 3}));
  g.backward(sum(x));
  const Tensor* gx = g.grad(x);
  ASSERT_NE(gx, nullptr);
  for (double v : gx->values()) EXPECT_EQ(v, 1.0);

  Graph g2;
  const Var y = g2.leaf(Tensor::row({1, 2}));
  g2.backward(sum(mul(y, y)));
  EXPECT_EQ((*g2.grad(y))[0], 2.0);
  EXPECT_EQ((*g2.grad(y))[1], 4.0);
}

TEST(Backward, NonScalarSeedIsDimensionError) {
  Graph g;
  const Var x = g.leaf(Tensor::row({1, 2}));
  try {
    g.backward(x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dimension);
  }
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Graph g;
  const Var x = g.leaf(Tensor::row({1, 2}));
  const Var c = g.constant(Tensor::row({3, 4}));
  g.backward(sum(mul(x, c)));
  EXPECT_EQ(g.grad(c), nullptr);
  EXPECT_EQ((*g.grad(x))[1], 4.0);
}

TEST(Backward, RepeatedBackwardIsBitwiseIdentical) {
  std::mt19937_64 rng(9);
  Graph g;
  const Var a = g.leaf(rand_matrix(rng, 5, 4));
  const Var b = g.leaf(rand_matrix(rng, 5, 4));
  const Var loss = kl_rows(softmax_rows(cosine_matrix(a, b), 0.5),
                           softmax_rows(matmul_bt(layer_norm_rows(a, 1e-5), b), 1.0));
  g.backward(loss);
  const Tensor first = *g.grad(a);
  g.backward(loss);
  EXPECT_TRUE(first.bitwise_equal(*g.grad(a)));
}

TEST(Backward, NonFiniteValueIsEvaluationError) {
  Graph g;
  try {
    g.leaf(Tensor::row({1.0, std::nan("")}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Evaluation);
  }
}

TEST(GradCheck, ScalarSquare) {
  const auto r = finite_diff_check(
      [](Graph&, std::span<const Var> in) { return sum(mul(in[0], in[0])); }, {Tensor::row({3.0})});
  EXPECT_TRUE(r.passed);
}

TEST(GradCheck, CosineLossOfRandomVectors) {
  std::mt19937_64 rng(4);
  const auto r = finite_diff_check(
      [](Graph&, std::span<const Var> in) { return add_scalar(scale(cosine_matrix(in[0], in[1]), -1.0), 1.0); },
      {rand_matrix(rng, 1, 4), rand_matrix(rng, 1, 4)});
  EXPECT_TRUE(r.passed) << r.worst();
}

TEST(GradCheck, KlOfSoftmaxedLogits) {
  std::mt19937_64 rng(6);
  const auto r = finite_diff_check(
      [](Graph&, std::span<const Var> in) {
        return kl_rows(softmax_rows(in[0], 1.0), softmax_rows(in[1], 0.8));
      },
      {rand_matrix(rng, 3, 5), rand_matrix(rng, 3, 5)});
  EXPECT_TRUE(r.passed) << r.worst();
}

TEST(GradCheck, EveryPrimitive) {
  std::mt19937_64 rng(21);
  const Tensor a = rand_matrix(rng, 4, 3), b = rand_matrix(rng, 3, 5), c = rand_matrix(rng, 4, 3);
  const Tensor row = rand_matrix(rng, 1, 3);
  const Tensor w43 = probe_weights(1, {4, 3}), w45 = probe_weights(2, {4, 5}), w44 = probe_weights(3, {4, 4});
  const Tensor w34 = probe_weights(4, {3, 4}), w23 = probe_weights(5, {2, 3}), w83 = probe_weights(7, {8, 3});
  const Tensor target = rand_stochastic(rng, 4, 3);

  struct Case {
    const char* name;
    ScalarFn f;
    std::vector<Tensor> inputs;
  };
  const std::vector<Case> cases = {
      {"matmul", [&](Graph&, std::span<const Var> v) { return probe(matmul(v[0], v[1]), w45); }, {a, b}},
      {"matmul_bt", [&](Graph&, std::span<const Var> v) { return probe(matmul_bt(v[0], v[1]), w44); }, {a, c}},
      {"transpose", [&](Graph&, std::span<const Var> v) { return probe(transpose(v[0]), w34); }, {a}},
      {"add_sub_mul",
       [&](Graph&, std::span<const Var> v) {
         return probe(mul(add(v[0], v[1]), sub(v[0], scale(v[1], 0.3))), w43);
       },
       {a, c}},
      {"row_ops", [&](Graph&, std::span<const Var> v) { return probe(add_row(mul_row(v[0], v[1]), v[1]), w43); },
       {a, row}},
      {"layer_norm", [&](Graph&, std::span<const Var> v) { return probe(layer_norm_rows(v[0], 1e-5), w43); }, {a}},
      {"gelu", [&](Graph&, std::span<const Var> v) { return probe(gelu(v[0]), w43); }, {a}},
      {"softmax", [&](Graph&, std::span<const Var> v) { return probe(softmax_rows(v[0], 0.7), w43); }, {a}},
      {"normalize", [&](Graph&, std::span<const Var> v) { return probe(normalize_rows(v[0]), w43); }, {a}},
      {"cosine", [&](Graph&, std::span<const Var> v) { return probe(cosine_matrix(v[0], v[1]), w44); }, {a, c}},
      {"slices",
       [&](Graph&, std::span<const Var> v) { return probe(slice_cols(slice_rows(v[0], 1, 3), 0, 3), w23); },
       {a}},
      {"concat_rows",
       [&](Graph&, std::span<const Var> v) {
         const Var parts[] = {v[0], v[1]};
         return probe(concat_rows(parts), w83);
       },
       {a, c}},
      {"concat_cols",
       [&](Graph&, std::span<const Var> v) {
         const Var parts[] = {slice_cols(v[0], 0, 2), v[1]};
         return probe(concat_cols(parts), probe_weights(9, {4, 5}));
       },
       {a, c}},
      {"mean", [&](Graph&, std::span<const Var> v) { return mean(mul(v[0], v[0])); }, {a}},
      {"kl_student_side",
       [&](Graph& g, std::span<const Var> v) {
         return kl_rows(g.constant(target), softmax_rows(v[0], 1.0));
       },
       {a}},
  };
  for (const auto& c : cases) {
    const auto r = finite_diff_check(c.f, c.inputs);
    EXPECT_TRUE(r.passed) << c.name << " worst relative error " << r.worst();
  }
}
