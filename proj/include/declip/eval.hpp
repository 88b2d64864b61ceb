#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "declip/config.hpp"
#include "declip/data.hpp"
#include "declip/losses.hpp"
#include "declip/region.hpp"

namespace declip {

enum class ClassSource { Ingested, Synthetic };

/// K unit-norm class vectors in the vision-language space.
struct ClassEmbeddings {
  std::vector<std::string> names;
  Tensor vectors;  // K × E
  ClassSource source = ClassSource::Ingested;

  std::size_t size() const { return vectors.rows(); }
  void validate() const;
};

/// Normalizes rows and assigns names class0..classK-1.
ClassEmbeddings make_class_embeddings(const Tensor& vectors, ClassSource source);
ClassEmbeddings load_class_embeddings(const std::filesystem::path& path);
void save_class_embeddings(const std::filesystem::path& path, const ClassEmbeddings& classes);

struct SegResult {
  Tensor labels;     // H × W argmax on the feature grid
  Tensor scores;     // K × H × W cosine scores
  Tensor upsampled;  // out_res × out_res argmax of bilinearly upsampled scores
};

/// Per-pixel cosine against every class, scores upsampled to out_res, then
/// argmax. No post-processing.
SegResult segment_training_free(const DenseFeatures& dense, const ClassEmbeddings& classes, std::size_t out_res);

/// Accumulates pixel counts; merging two matrices is element-wise addition.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);
  void add(const Tensor& pred, const Tensor& gt, int ignore_label = kIgnoreLabel);
  void merge(const ConfusionMatrix& other);
  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  double miou = 0.0;
  std::vector<double> iou;       // NaN for classes with zero union
  std::vector<bool> counted;     // classes that entered the mean
};

MiouResult miou(const ConfusionMatrix& cm);
MiouResult miou(const Tensor& pred, const Tensor& gt, std::size_t num_classes, int ignore_label = kIgnoreLabel);

/// Mean of roi_align rows over the box.
Tensor region_vector(const DenseFeatures& dense, const CropBox& box, std::size_t n);
/// Average of dense pixels under an R×R binary mask; each token is weighted
/// by the fraction of its patch covered.
Tensor region_vector(const DenseFeatures& dense, const Tensor& mask);

std::size_t classify_vector(const Tensor& v, const ClassEmbeddings& classes);
std::vector<std::size_t> region_classify(const DenseFeatures& dense, std::span<const CropBox> boxes,
                                         const ClassEmbeddings& classes, std::size_t n);
std::vector<std::size_t> region_classify(const DenseFeatures& dense, std::span<const Tensor> masks,
                                         const ClassEmbeddings& classes);

/// Mean over classes present in `gt` of per-class top-1 accuracy.
double top1_macc(std::span<const std::size_t> pred, std::span<const std::size_t> gt);

struct EvalReport {
  double miou = 0.0;
  double macc = 0.0;
  std::size_t images = 0, regions = 0;
  std::vector<double> class_iou;
};

/// Segmentation and mask-region classification over `samples`. Regions are
/// the per-class masks of each ground-truth segment map.
EvalReport evaluate(const VitParams& model, EncodeMode mode, const std::vector<Sample>& samples,
                    const ClassEmbeddings& classes, const DistillConfig& cfg);

std::string format_eval_report(const std::string& title, const EvalReport& r);

struct AblationRow {
  std::string name;
  EvalReport report;
  LossReport final_loss;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::size_t seeds = 1;
  const AblationRow& row(const std::string& name) const;
};

/// Class vectors for a given frozen teacher. Synthetic suites derive them from
/// the teacher, so every training seed gets its own set.
using ClassProvider = std::function<ClassEmbeddings(const VitParams& teacher)>;

/// Trains the content-only, coupled and decoupled variants (plus decoupled
/// on raw VFM affinities) and evaluates each next to the untrained baseline.
/// With cfg.ablation_seeds = n, every row is the mean over training seeds
/// cfg.seed .. cfg.seed + n - 1.
AblationReport ablation_coupled_vs_decoupled(const DistillConfig& cfg, const std::vector<Sample>& train,
                                             const std::vector<Sample>& test, const ClassProvider& classes);
AblationReport ablation_coupled_vs_decoupled(const DistillConfig& cfg, const std::vector<Sample>& train,
                                             const std::vector<Sample>& test, const ClassEmbeddings& classes);
std::string format_ablation_report(const AblationReport& r);

}  // namespace declip
