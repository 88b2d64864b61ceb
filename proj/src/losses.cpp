#include "declip/losses.hpp"

#include <cmath>

#include "declip/region.hpp"

namespace declip {

void DistillBatchInputs::validate() const {
  const auto k = region_students.size();
  if (k == 0) fail(ErrorKind::Parameter, "need at least one region");
  if (region_teacher_cls.size() != k || region_vfm.size() != k) {
    fail(ErrorKind::Dimension, "region counts differ between student, teacher and VFM");
  }
  require_matrix(x_context.value(), "x_context");
  require_matrix(s_hat_vfm, "s_hat_vfm");
  const auto hw = x_context.value().rows();
  if (s_hat_vfm.rows() != hw || s_hat_vfm.cols() != hw) {
    fail(ErrorKind::Dimension, "context features and teacher affinity disagree on token count");
  }
}

Var context_loss(Var x_context, const Tensor& s_hat_vfm, double tau) {
  require_matrix(s_hat_vfm, "context_loss teacher");
  const auto hw = x_context.value().rows();
  if (s_hat_vfm.rows() != hw || s_hat_vfm.cols() != hw) {
    fail(ErrorKind::Dimension, "teacher affinity " + shape_str(s_hat_vfm.shape()) + " for " +
                                   std::to_string(hw) + " tokens");
  }
  Graph& g = *x_context.graph();
  const Var teacher = g.constant(softmax_rows(s_hat_vfm, tau));
  const Var student = softmax_rows(cosine_matrix(x_context, x_context), tau);
  return kl_rows(teacher, student);
}

namespace {

Tensor as_row(const Tensor& t) { return t.reshaped({1, t.numel()}); }

}  // namespace

Var content_cos_loss(std::span<const Var> region_students, std::span<const Tensor> teacher_cls) {
  const auto k = region_students.size();
  if (k == 0) fail(ErrorKind::Parameter, "content loss needs k >= 1 regions");
  if (teacher_cls.size() != k) fail(ErrorKind::Dimension, "teacher CLS count differs from region count");
  Graph& g = *region_students[0].graph();
  std::vector<Var> terms;
  for (std::size_t i = 0; i < k; ++i) {
    const Var t = g.constant(as_row(teacher_cls[i]));
    const Var pooled = weighted_region_pool(region_students[i], t);
    terms.push_back(cosine_matrix(pooled, t));
  }
  const Var cos_sum = sum(concat_rows(terms));
  return add_scalar(scale(cos_sum, -1.0 / static_cast<double>(k)), 1.0);
}

Var rcc_loss(std::span<const Var> region_students, std::span<const Tensor> region_vfm, double tau) {
  const auto k = region_students.size();
  if (k == 0) fail(ErrorKind::Parameter, "RCC loss needs k >= 1 regions");
  if (region_vfm.size() != k) fail(ErrorKind::Dimension, "VFM region count differs from region count");
  Graph& g = *region_students[0].graph();
  std::vector<Var> terms;
  for (std::size_t i = 0; i < k; ++i) {
    if (region_vfm[i].rows() != region_students[i].value().rows()) {
      fail(ErrorKind::Dimension, "student and VFM regions have different N");
    }
    const Var r_vfm = g.constant(softmax_rows(cosine_matrix(region_vfm[i], region_vfm[i]), tau));
    const Var r_clip = softmax_rows(cosine_matrix(region_students[i], region_students[i]), tau);
    terms.push_back(kl_rows(r_vfm, r_clip));
  }
  return scale(sum(concat_rows(terms)), 1.0 / static_cast<double>(k));
}

LossReport total_loss(double l_context, double l_content_cos, double l_rcc, double lambda, double tau) {
  if (!std::isfinite(l_context) || !std::isfinite(l_content_cos) || !std::isfinite(l_rcc) ||
      !std::isfinite(lambda)) {
    fail(ErrorKind::Evaluation, "non-finite loss component");
  }
  LossReport r;
  r.l_context = l_context;
  r.l_content_cos = l_content_cos;
  r.l_rcc = l_rcc;
  r.lambda = lambda;
  r.tau = tau;
  r.l_total = (l_content_cos + l_rcc) + lambda * l_context;
  return r;
}

LossVars distill_losses(const DistillBatchInputs& in, double lambda, double tau, bool use_rcc) {
  in.validate();
  Graph& g = *in.x_context.graph();
  LossVars v;
  v.context = context_loss(in.x_context, in.s_hat_vfm, tau);
  v.content_cos = content_cos_loss(in.region_students, in.region_teacher_cls);
  v.rcc = use_rcc ? rcc_loss(in.region_students, in.region_vfm, tau) : g.constant(Tensor({1, 1}));
  v.total = add(add(v.content_cos, v.rcc), scale(v.context, lambda));
  return v;
}

}  // namespace declip
