#pragma once

#include <cmath>
#include <random>

#include "declip/autodiff.hpp"

namespace declip::testing {

inline Tensor rand_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform({r, c}, rng, lo, hi);
}

/// Random row-stochastic matrix with strictly positive entries.
inline Tensor rand_stochastic(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  Tensor t = Tensor::uniform({r, c}, rng, 0.05, 1.0);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += t.at(i, j);
    for (std::size_t j = 0; j < c; ++j) t.at(i, j) /= s;
  }
  return t;
}

/// Σ w ⊙ x with fixed weights: turns any tensor-valued op into a scalar whose
/// gradient is generically nonzero in every coordinate.
inline Var probe(Var x, const Tensor& w) {
  return sum(mul(x, x.graph()->constant(w)));
}

inline Tensor probe_weights(std::uint64_t seed, const Shape& shape) {
  std::mt19937_64 rng(seed);
  return Tensor::uniform(shape, rng, -1.0, 1.0);
}

// Scalar oracles, written with plain loops and no library kernels.

inline double oracle_dot(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(j, k);
  return s;
}

inline double oracle_cos(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  return oracle_dot(a, i, b, j) / (std::sqrt(oracle_dot(a, i, a, i)) * std::sqrt(oracle_dot(b, j, b, j)));
}

inline Tensor oracle_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

inline Tensor oracle_softmax(const Tensor& x, double tau) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += std::exp(x.at(i, j) / tau);
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = std::exp(x.at(i, j) / tau) / z;
  }
  return out;
}

inline double oracle_kl(const Tensor& p, const Tensor& q) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < p.cols(); ++j) {
      const double pv = p.at(i, j);
      if (pv > 0.0) total += pv * std::log(pv / std::max(q.at(i, j), 1e-8));
    }
  return total / static_cast<double>(p.rows());
}

}  // namespace declip::testing
