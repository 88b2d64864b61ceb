#pragma once

#include <span>
#include <vector>

#include "declip/autodiff.hpp"

namespace declip {

/// Scalar loss values of one distillation step.
struct LossReport {
  double l_context = 0.0;
  double l_content_cos = 0.0;
  double l_rcc = 0.0;
  double l_total = 0.0;
  double lambda = 0.25;
  double tau = 1.0;

  /// Mean cosine between pooled student regions and teacher CLS vectors.
  double mean_region_cos() const { return 1.0 - l_content_cos; }
  bool operator==(const LossReport&) const = default;
};

/// Teacher-side inputs are plain tensors: they never receive gradients.
struct DistillBatchInputs {
  Var x_context;                       // HW × C student context features
  Tensor s_hat_vfm;                    // HW × HW completed teacher affinity
  std::vector<Var> region_students;    // k × (N² × C)
  std::vector<Tensor> region_teacher_cls;  // k × (1 × C)
  std::vector<Tensor> region_vfm;      // k × (N² × D)

  void validate() const;
};

/// Mean row KL(softmax(Ŝ/τ) ‖ softmax(cos(X, X)/τ)). Teacher is detached.
Var context_loss(Var x_context, const Tensor& s_hat_vfm, double tau);

/// (1/k) Σ 1 − cos(pool(f_s_i, f_t_i), f_t_i) with similarity-weighted pooling.
Var content_cos_loss(std::span<const Var> region_students, std::span<const Tensor> teacher_cls);

/// Mean over regions of row-mean KL(softmax(R_vfm/τ) ‖ softmax(R_student/τ)),
/// R = pairwise cosine of the region's rows. VFM side is detached.
Var rcc_loss(std::span<const Var> region_students, std::span<const Tensor> region_vfm, double tau);

/// l_total = (l_content_cos + l_rcc) + lambda · l_context.
LossReport total_loss(double l_context, double l_content_cos, double l_rcc, double lambda, double tau = 1.0);

struct LossVars {
  Var context, content_cos, rcc, total;
};

/// Builds all terms in the inputs' graph. Terms switched off contribute a
/// zero constant and their report field is still computed when possible.
LossVars distill_losses(const DistillBatchInputs& in, double lambda, double tau, bool use_rcc = true);

}  // namespace declip
