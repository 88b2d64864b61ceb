#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <tuple>
#include <utility>
#include <vector>

#include "declip/config.hpp"
#include "declip/container.hpp"
#include "declip/data.hpp"
#include "declip/losses.hpp"
#include "declip/region.hpp"

namespace declip {

/// (side · student_patch, side · vfm_patch): both models then see side² tokens.
std::pair<std::size_t, std::size_t> resolution_pair(std::size_t student_patch, std::size_t vfm_patch,
                                                    std::size_t side_tokens);

struct AdamWHyper {
  double lr = 1e-5, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.1;
  static AdamWHyper from(const DistillConfig& cfg);
};

struct OptimizerState {
  std::map<std::string, Tensor> m, v;
  std::uint64_t step = 0;
};

/// One decoupled-decay AdamW update of a single tensor at 1-based `step`:
/// p ← p − lr·wd·p, then the bias-corrected Adam step on the moments.
void adamw_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, std::uint64_t step, const AdamWHyper& h);

/// Updates every parameter named in `grads`; parameters without a gradient
/// are left alone. Advances state.step by one.
void adamw_step(VitParams& params, const std::map<std::string, Tensor>& grads, OptimizerState& state,
                const AdamWHyper& h);

/// Teacher-side signals of one training image. They never change during a run.
struct PreparedSample {
  std::size_t index = 0;
  const Sample* sample = nullptr;
  Tensor student_input;  // normalized, at the student resolution
  Tensor vfm_tokens;     // HW × D
  Tensor s_hat;          // HW × HW teacher affinity (completed or raw)
};

/// Frozen-teacher CLS embeddings of image crops, computed once per
/// (sample, box) and reused across steps.
class TeacherCache {
 public:
  TeacherCache(const VitParams& teacher, const DistillConfig& cfg);
  const Tensor& crop_cls(const PreparedSample& s, const CropBox& box);
  std::size_t size() const { return cache_.size(); }

 private:
  const VitParams* teacher_;
  const DistillConfig* cfg_;
  std::map<std::tuple<std::size_t, double, double, double, double>, Tensor> cache_;
};

struct SampleGrads {
  LossReport report;
  std::map<std::string, Tensor> grads;  // trainable parameters only
};

/// Steps (1)–(8) of the pipeline for one image: forward, losses, backward.
SampleGrads sample_gradients(const VitParams& student, const PreparedSample& s, TeacherCache& teacher,
                             const DistillConfig& cfg, std::mt19937_64& rng);

/// Owns student, frozen teacher, frozen VFM and optimizer state, and walks
/// the epoch schedule one optimizer step at a time.
class Distiller {
 public:
  Distiller(const DistillConfig& cfg, std::vector<Sample> samples);
  Distiller(const Distiller&) = delete;
  Distiller& operator=(const Distiller&) = delete;

  /// One optimizer step over the next batch; returns the batch-mean report.
  LossReport step();
  bool done() const { return step_ >= total_steps(); }
  std::uint64_t steps_done() const { return step_; }
  std::size_t steps_per_epoch() const;
  std::uint64_t total_steps() const;
  /// Sample indices of the batch consumed by step `s` (0-based).
  std::vector<std::size_t> batch_for_step(std::uint64_t s) const;

  const DistillConfig& config() const { return cfg_; }
  const VitParams& student() const { return student_; }
  const VitParams& teacher() const { return teacher_; }
  const VitParams& vfm() const { return vfm_; }
  const OptimizerState& optimizer() const { return opt_; }
  const std::vector<Sample>& samples() const { return samples_; }
  const std::vector<PreparedSample>& prepared() const { return prepared_; }

  NamedTensors checkpoint() const;
  void restore(const NamedTensors& checkpoint);

 private:
  DistillConfig cfg_;
  std::vector<Sample> samples_;
  VitParams teacher_, student_, vfm_;
  std::vector<PreparedSample> prepared_;
  TeacherCache cache_;
  OptimizerState opt_;
  std::uint64_t step_ = 0;
};

struct StudentCheckpoint {
  VitParams student;
  OptimizerState optimizer;
  std::uint64_t step = 0;
};

NamedTensors encode_checkpoint(const VitParams& student, const OptimizerState& opt, std::uint64_t step);
StudentCheckpoint decode_checkpoint(const NamedTensors& sections);
StudentCheckpoint load_checkpoint(const std::filesystem::path& path);

/// `step=<n> l_context=<f> l_content=<f> l_rcc=<f> l_total=<f>` with round-trip precision.
std::string format_metrics_line(std::uint64_t step, const LossReport& r);

struct RunResult {
  std::vector<LossReport> reports;  // steps run by this invocation
  std::filesystem::path checkpoint, metrics_log, config_echo;
  VitParams student;
};

/// Full run: loads cfg.manifest, optionally resumes from cfg.resume, trains,
/// and writes checkpoint_dir/checkpoint.dten, report_dir/metrics.log and
/// report_dir/config.echo. The checkpoint is refreshed after every epoch.
RunResult distill_run(const DistillConfig& cfg);
RunResult distill_run(const DistillConfig& cfg, std::vector<Sample> samples);

}  // namespace declip
