#include "declip/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace declip {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (double e : max_rel_error) w = std::max(w, e);
  return w;
}

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  const Var out = f(g, vars);
  if (out.value().numel() != 1) fail(ErrorKind::Dimension, "gradient check needs a scalar function");
  const double v = out.value()[0];
  if (!std::isfinite(v)) fail(ErrorKind::Evaluation, "function value is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double h,
                                  double tol) {
  if (!(h > 0.0) || !(tol > 0.0)) fail(ErrorKind::Parameter, "step and tolerance must be positive");

  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.leaf(t, true));
  const Var out = f(g, vars);
  if (out.value().numel() != 1) fail(ErrorKind::Dimension, "gradient check needs a scalar function");
  if (!std::isfinite(out.value()[0])) fail(ErrorKind::Evaluation, "function value is not finite");
  g.backward(out);

  GradCheckReport report;
  report.tolerance = tol;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor* ad = g.grad(vars[k]);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + h;
      const double fp = evaluate(f, probe);
      probe[k][i] = x0 - h;
      const double fm = evaluate(f, probe);
      probe[k][i] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = ad ? (*ad)[i] : 0.0;
      const double rel = std::abs(a - fd) / std::max(1e-8, std::abs(a) + std::abs(fd));
      worst = std::max(worst, rel);
    }
    report.max_rel_error.push_back(worst);
  }
  report.passed = report.worst() <= tol;
  return report;
}

}  // namespace declip
