#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "declip/autodiff.hpp"

namespace declip {

/// Scalar-valued function of graph inputs. Must be pure and deterministic.
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

struct GradCheckReport {
  std::vector<double> max_rel_error;  // one entry per input
  double tolerance = 0.0;
  bool passed = false;

  double worst() const;
};

/// Compares reverse-mode gradients against central differences with step h.
/// Relative error per element: |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
GradCheckReport finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                  double h = 1e-5, double tol = 1e-4);

}  // namespace declip
