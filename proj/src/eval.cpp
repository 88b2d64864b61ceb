#include "declip/eval.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>

#include "declip/container.hpp"
#include "declip/trainer.hpp"

namespace declip {

void ClassEmbeddings::validate() const {
  require_matrix(vectors, "class embeddings");
  if (vectors.rows() < 2) fail(ErrorKind::Parameter, "need at least two classes");
  if (names.size() != vectors.rows()) fail(ErrorKind::Dimension, "class names and vectors differ in count");
  for (std::size_t k = 0; k < vectors.rows(); ++k) {
    double n = 0.0;
    for (std::size_t j = 0; j < vectors.cols(); ++j) n += vectors.at(k, j) * vectors.at(k, j);
    if (std::abs(std::sqrt(n) - 1.0) > 1e-6) fail(ErrorKind::Degenerate, "class vector " + names[k] + " is not unit norm");
  }
}

ClassEmbeddings make_class_embeddings(const Tensor& vectors, ClassSource source) {
  ClassEmbeddings c;
  c.vectors = normalize_rows(vectors);
  c.source = source;
  for (std::size_t k = 0; k < c.vectors.rows(); ++k) c.names.push_back("class" + std::to_string(k));
  c.validate();
  return c;
}

ClassEmbeddings load_class_embeddings(const std::filesystem::path& path) {
  return make_class_embeddings(find_section(read_tensor(path), "classes"), ClassSource::Ingested);
}

void save_class_embeddings(const std::filesystem::path& path, const ClassEmbeddings& classes) {
  write_tensor(path, {{"classes", classes.vectors}});
}

SegResult segment_training_free(const DenseFeatures& dense, const ClassEmbeddings& classes, std::size_t out_res) {
  classes.validate();
  const Grid g = dense.grid;
  if (out_res < std::max(g.h, g.w)) fail(ErrorKind::Parameter, "output resolution below the feature grid");
  if (dense.tokens.cols() != classes.vectors.cols()) {
    fail(ErrorKind::Dimension, "dense width " + std::to_string(dense.tokens.cols()) + " vs class width " +
                                   std::to_string(classes.vectors.cols()));
  }
  const auto k = classes.size();
  const Tensor cos = cosine_matrix(dense.tokens, classes.vectors);  // HW × K
  SegResult r;
  r.scores = Tensor({k, g.h, g.w});
  r.labels = Tensor({g.h, g.w});
  for (std::size_t t = 0; t < g.size(); ++t) {
    std::size_t best = 0;
    for (std::size_t c = 0; c < k; ++c) {
      r.scores[c * g.size() + t] = cos.at(t, c);
      if (cos.at(t, c) > cos.at(t, best)) best = c;
    }
    r.labels[t] = static_cast<double>(best);
  }
  std::vector<Tensor> up;
  for (std::size_t c = 0; c < k; ++c) {
    Tensor plane({g.h, g.w});
    for (std::size_t t = 0; t < g.size(); ++t) plane[t] = r.scores[c * g.size() + t];
    up.push_back(upsample_bilinear(plane, out_res, out_res));
  }
  r.upsampled = Tensor({out_res, out_res});
  for (std::size_t p = 0; p < out_res * out_res; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (up[c][p] > up[best][p]) best = c;
    r.upsampled[p] = static_cast<double>(best);
  }
  return r;
}

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) fail(ErrorKind::Parameter, "confusion matrix needs at least one class");
}

void ConfusionMatrix::add(const Tensor& pred, const Tensor& gt, int ignore_label) {
  if (pred.shape() != gt.shape()) {
    fail(ErrorKind::Dimension, "prediction " + shape_str(pred.shape()) + " vs ground truth " + shape_str(gt.shape()));
  }
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const int g = static_cast<int>(gt[i]), p = static_cast<int>(pred[i]);
    if (g == ignore_label || p == ignore_label) continue;
    if (g < 0 || p < 0 || static_cast<std::size_t>(g) >= k_ || static_cast<std::size_t>(p) >= k_) {
      fail(ErrorKind::Range, "label outside [0, " + std::to_string(k_) + ")");
    }
    ++counts_[static_cast<std::size_t>(g) * k_ + static_cast<std::size_t>(p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) fail(ErrorKind::Dimension, "confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

MiouResult miou(const ConfusionMatrix& cm) {
  const auto k = cm.num_classes();
  MiouResult r;
  r.iou.assign(k, std::numeric_limits<double>::quiet_NaN());
  r.counted.assign(k, false);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t inter = cm.at(c, c), gt = 0, pred = 0;
    for (std::size_t o = 0; o < k; ++o) {
      gt += cm.at(c, o);
      pred += cm.at(o, c);
    }
    const std::uint64_t uni = gt + pred - inter;
    if (uni == 0) continue;
    r.iou[c] = static_cast<double>(inter) / static_cast<double>(uni);
    r.counted[c] = true;
    sum += r.iou[c];
    ++n;
  }
  r.miou = n ? sum / static_cast<double>(n) : 0.0;
  return r;
}

MiouResult miou(const Tensor& pred, const Tensor& gt, std::size_t num_classes, int ignore_label) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, gt, ignore_label);
  return miou(cm);
}

Tensor region_vector(const DenseFeatures& dense, const CropBox& box, std::size_t n) {
  const Tensor rows = roi_align_tokens(dense.tokens, dense.grid, box, n);
  Tensor v({1, rows.cols()});
  for (std::size_t i = 0; i < rows.rows(); ++i)
    for (std::size_t j = 0; j < rows.cols(); ++j) v.at(0, j) += rows.at(i, j) / static_cast<double>(rows.rows());
  return v;
}

Tensor region_vector(const DenseFeatures& dense, const Tensor& mask) {
  require_matrix(mask, "region mask");
  const Grid g = dense.grid;
  if (mask.rows() % g.h != 0 || mask.cols() % g.w != 0) {
    fail(ErrorKind::Dimension, "mask " + shape_str(mask.shape()) + " is not a multiple of the feature grid");
  }
  const auto ph = mask.rows() / g.h, pw = mask.cols() / g.w;
  Tensor v({1, dense.tokens.cols()});
  double total = 0.0;
  for (std::size_t ty = 0; ty < g.h; ++ty)
    for (std::size_t tx = 0; tx < g.w; ++tx) {
      double covered = 0.0;
      for (std::size_t y = ty * ph; y < (ty + 1) * ph; ++y)
        for (std::size_t x = tx * pw; x < (tx + 1) * pw; ++x) covered += mask.at(y, x) != 0.0 ? 1.0 : 0.0;
      if (covered == 0.0) continue;
      total += covered;
      for (std::size_t j = 0; j < v.cols(); ++j) v.at(0, j) += covered * dense.tokens.at(ty * g.w + tx, j);
    }
  if (total == 0.0) fail(ErrorKind::Degenerate, "empty region mask");
  for (double& x : v.values()) x /= total;
  return v;
}

std::size_t classify_vector(const Tensor& v, const ClassEmbeddings& classes) {
  const Tensor cos = cosine_matrix(v.reshaped({1, v.numel()}), classes.vectors);
  std::size_t best = 0;
  for (std::size_t c = 1; c < cos.cols(); ++c)
    if (cos[c] > cos[best]) best = c;
  return best;
}

std::vector<std::size_t> region_classify(const DenseFeatures& dense, std::span<const CropBox> boxes,
                                         const ClassEmbeddings& classes, std::size_t n) {
  std::vector<std::size_t> out;
  for (const auto& b : boxes) out.push_back(classify_vector(region_vector(dense, b, n), classes));
  return out;
}

std::vector<std::size_t> region_classify(const DenseFeatures& dense, std::span<const Tensor> masks,
                                         const ClassEmbeddings& classes) {
  std::vector<std::size_t> out;
  for (const auto& m : masks) out.push_back(classify_vector(region_vector(dense, m), classes));
  return out;
}

double top1_macc(std::span<const std::size_t> pred, std::span<const std::size_t> gt) {
  if (gt.empty()) fail(ErrorKind::Parameter, "top1_macc of an empty label list");
  if (pred.size() != gt.size()) fail(ErrorKind::Dimension, "prediction and label lists differ in length");
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> tally;  // class -> (correct, total)
  for (std::size_t i = 0; i < gt.size(); ++i) {
    auto& t = tally[gt[i]];
    t.first += pred[i] == gt[i];
    ++t.second;
  }
  double sum = 0.0;
  for (const auto& [c, t] : tally) sum += static_cast<double>(t.first) / static_cast<double>(t.second);
  return sum / static_cast<double>(tally.size());
}

EvalReport evaluate(const VitParams& model, EncodeMode mode, const std::vector<Sample>& samples,
                    const ClassEmbeddings& classes, const DistillConfig& cfg) {
  classes.validate();
  ConfusionMatrix cm(classes.size());
  std::vector<std::size_t> pred, gt;
  for (const Sample& s : samples) {
    Tensor image = s.image;
    if (image.shape()[1] != model.config.image_res) image = crop_resize(image, CropBox{}, model.config.image_res);
    const DenseFeatures dense = encode_dense(normalize_image(image, cfg.clip_mean, cfg.clip_std), model, mode);
    const std::size_t res = s.segments.rows();
    cm.add(segment_training_free(dense, classes, res).upsampled, s.segments);
    std::set<int> present;
    for (double v : s.segments.values())
      if (static_cast<int>(v) != kIgnoreLabel) present.insert(static_cast<int>(v));
    for (int c : present) {
      if (static_cast<std::size_t>(c) >= classes.size()) fail(ErrorKind::Range, "segment label beyond class count");
      Tensor mask(s.segments.shape());
      for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = static_cast<int>(s.segments[i]) == c ? 1.0 : 0.0;
      pred.push_back(classify_vector(region_vector(dense, mask), classes));
      gt.push_back(static_cast<std::size_t>(c));
    }
  }
  EvalReport r;
  const MiouResult m = miou(cm);
  r.miou = m.miou;
  r.class_iou = m.iou;
  r.macc = top1_macc(pred, gt);
  r.images = samples.size();
  r.regions = gt.size();
  return r;
}

std::string format_eval_report(const std::string& title, const EvalReport& r) {
  char buf[256];
  std::string out = title + "\n";
  std::snprintf(buf, sizeof buf, "  images=%zu regions=%zu\n", r.images, r.regions);
  out += buf;
  for (std::size_t c = 0; c < r.class_iou.size(); ++c) {
    if (std::isnan(r.class_iou[c])) {
      std::snprintf(buf, sizeof buf, "  iou[class%zu]=n/a\n", c);
    } else {
      std::snprintf(buf, sizeof buf, "  iou[class%zu]=%.6f\n", c, r.class_iou[c]);
    }
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "miou=%.17g\nmacc=%.17g\n", r.miou, r.macc);
  return out + buf;
}

const AblationRow& AblationReport::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  fail(ErrorKind::Range, "no ablation row named " + name);
}

namespace {

AblationRow train_variant(const std::string& name, DistillConfig cfg, const std::vector<Sample>& train,
                          const std::vector<Sample>& test, const ClassEmbeddings& classes) {
  Distiller d(cfg, train);
  AblationRow row;
  row.name = name;
  while (!d.done()) row.final_loss = d.step();
  const auto mode = cfg.variant == Variant::Decoupled ? EncodeMode::Decoupled : EncodeMode::Standard;
  row.report = evaluate(d.student(), mode, test, classes, cfg);
  return row;
}

}  // namespace

AblationReport ablation_coupled_vs_decoupled(const DistillConfig& cfg, const std::vector<Sample>& train,
                                             const std::vector<Sample>& test, const ClassProvider& classes) {
  cfg.validate();
  AblationReport out;
  out.seeds = cfg.ablation_seeds;
  const double w = 1.0 / static_cast<double>(cfg.ablation_seeds);
  for (std::size_t i = 0; i < cfg.ablation_seeds; ++i) {
    DistillConfig run = cfg;
    run.seed = cfg.seed + i;
    const VitParams init = VitParams::init(run.student, run.seed).frozen_copy();
    const ClassEmbeddings cls = classes(init);

    std::vector<AblationRow> rows;
    rows.push_back({"baseline", evaluate(init, EncodeMode::Standard, test, cls, run), {}});

    DistillConfig content = run;
    content.variant = Variant::Coupled;
    content.lambda = 0.0;
    content.use_rcc = false;
    rows.push_back(train_variant("content_only", content, train, test, cls));

    DistillConfig coupled = run;
    coupled.variant = Variant::Coupled;
    rows.push_back(train_variant("coupled", coupled, train, test, cls));

    DistillConfig decoupled = run;
    decoupled.variant = Variant::Decoupled;
    rows.push_back(train_variant("decoupled", decoupled, train, test, cls));

    DistillConfig raw = decoupled;
    raw.use_sd_completion = false;
    rows.push_back(train_variant("decoupled_raw_vfm", raw, train, test, cls));

    if (i == 0) {
      out.rows = rows;
      for (auto& r : out.rows) {
        r.report.miou *= w;
        r.report.macc *= w;
        for (double& v : r.report.class_iou) v *= w;
        r.final_loss = total_loss(w * r.final_loss.l_context, w * r.final_loss.l_content_cos,
                                  w * r.final_loss.l_rcc, r.final_loss.lambda, r.final_loss.tau);
      }
      continue;
    }
    for (std::size_t k = 0; k < rows.size(); ++k) {
      AblationRow& acc = out.rows[k];
      const AblationRow& r = rows[k];
      acc.report.miou += w * r.report.miou;
      acc.report.macc += w * r.report.macc;
      for (std::size_t c = 0; c < acc.report.class_iou.size(); ++c) acc.report.class_iou[c] += w * r.report.class_iou[c];
      acc.final_loss = total_loss(acc.final_loss.l_context + w * r.final_loss.l_context,
                                  acc.final_loss.l_content_cos + w * r.final_loss.l_content_cos,
                                  acc.final_loss.l_rcc + w * r.final_loss.l_rcc, acc.final_loss.lambda,
                                  acc.final_loss.tau);
    }
  }
  return out;
}

AblationReport ablation_coupled_vs_decoupled(const DistillConfig& cfg, const std::vector<Sample>& train,
                                             const std::vector<Sample>& test, const ClassEmbeddings& classes) {
  return ablation_coupled_vs_decoupled(cfg, train, test, [&](const VitParams&) { return classes; });
}

std::string format_ablation_report(const AblationReport& r) {
  std::string out = "seeds=" + std::to_string(r.seeds) + "\nvariant miou macc l_total\n";
  char buf[256];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%s %.6f %.6f %.6f\n", row.name.c_str(), row.report.miou, row.report.macc,
                  row.final_loss.l_total);
    out += buf;
  }
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%s.miou=%.17g\n%s.macc=%.17g\n", row.name.c_str(), row.report.miou,
                  row.name.c_str(), row.report.macc);
    out += buf;
  }
  return out;
}

}  // namespace declip
