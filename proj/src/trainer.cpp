#include "declip/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace declip {

std::pair<std::size_t, std::size_t> resolution_pair(std::size_t student_patch, std::size_t vfm_patch,
                                                    std::size_t side_tokens) {
  if (student_patch == 0 || vfm_patch == 0 || side_tokens == 0) {
    fail(ErrorKind::Parameter, "resolution_pair needs positive patch sizes and token count");
  }
  return {side_tokens * student_patch, side_tokens * vfm_patch};
}

AdamWHyper AdamWHyper::from(const DistillConfig& cfg) {
  return {cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
}

void adamw_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, std::uint64_t step, const AdamWHyper& h) {
  if (grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape()) {
    fail(ErrorKind::Dimension, "adamw: gradient " + shape_str(grad.shape()) + " for parameter " +
                                   shape_str(param.shape()));
  }
  if (step == 0) fail(ErrorKind::Parameter, "adamw step counter is 1-based");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    param[i] -= h.lr * h.weight_decay * param[i];
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    param[i] -= h.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
  }
}

void adamw_step(VitParams& params, const std::map<std::string, Tensor>& grads, OptimizerState& state,
                const AdamWHyper& h) {
  const std::uint64_t step = state.step + 1;
  std::size_t used = 0;
  params.for_each_mut([&](const std::string& name, Tensor& p) {
    const auto it = grads.find(name);
    if (it == grads.end()) return;
    ++used;
    auto m = state.m.try_emplace(name, p.shape()).first;
    auto v = state.v.try_emplace(name, p.shape()).first;
    adamw_update(p, it->second, m->second, v->second, step, h);
  });
  if (used != grads.size()) fail(ErrorKind::Config, "adamw: gradient names do not match parameters");
  state.step = step;
}

TeacherCache::TeacherCache(const VitParams& teacher, const DistillConfig& cfg) : teacher_(&teacher), cfg_(&cfg) {}

const Tensor& TeacherCache::crop_cls(const PreparedSample& s, const CropBox& box) {
  const auto key = std::make_tuple(s.index, box.x0, box.y0, box.x1, box.y1);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  const Tensor crop = crop_resize(s.sample->image, box, cfg_->student.image_res);
  const Tensor cls = encode_cls(normalize_image(crop, cfg_->clip_mean, cfg_->clip_std), *teacher_);
  return cache_.emplace(key, cls.reshaped({1, cls.numel()})).first->second;
}

SampleGrads sample_gradients(const VitParams& student, const PreparedSample& s, TeacherCache& teacher,
                             const DistillConfig& cfg, std::mt19937_64& rng) {
  Graph g;
  const VitVars vars = bind_params(g, student, true, cfg.trainable_layers);
  const bool decoupled = cfg.variant == Variant::Decoupled;
  const EncodedVars enc = encode_graph(vars, s.student_input, decoupled ? EncodeMode::Decoupled : EncodeMode::Standard);
  const Grid grid = enc.grid;

  DistillBatchInputs in;
  in.x_context = decoupled ? enc.decoupled->x_context : enc.dense;
  in.s_hat_vfm = s.s_hat;
  for (const CropBox& box : sample_grid(rng, cfg.grid_lo, cfg.grid_hi)) {
    in.region_students.push_back(roi_align(enc.dense, grid, box, cfg.roi_n));
    in.region_teacher_cls.push_back(teacher.crop_cls(s, box));
    in.region_vfm.push_back(roi_align_tokens(s.vfm_tokens, grid, box, cfg.roi_n));
  }
  const LossVars lv = distill_losses(in, cfg.lambda, cfg.tau, cfg.use_rcc);
  g.backward(lv.total);

  SampleGrads out;
  out.report = total_loss(lv.context.value()[0], lv.content_cos.value()[0], lv.rcc.value()[0], cfg.lambda, cfg.tau);
  for (const auto& [name, var] : vars.named) {
    if (!var.requires_grad()) continue;
    const Tensor* grad = g.grad(var);
    out.grads.emplace(name, grad ? *grad : Tensor(var.value().shape()));
  }
  return out;
}

namespace {

std::mt19937_64 seeded(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

// Stream tags keep the per-purpose generators independent.
constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kCropStream = 0x4352;
constexpr std::uint64_t kSdStream = 0x5344;

Tensor resize_full(const Tensor& image, std::size_t res) {
  return image.shape()[1] == res ? image : crop_resize(image, CropBox{}, res);
}

}  // namespace

Distiller::Distiller(const DistillConfig& cfg, std::vector<Sample> samples)
    : cfg_(cfg),
      samples_(std::move(samples)),
      teacher_(VitParams::init(cfg.student, cfg.seed).frozen_copy()),
      student_(teacher_.trainable_copy()),
      vfm_(VitParams::init(cfg.vfm, cfg.vfm_seed).frozen_copy()),
      cache_(teacher_, cfg_) {
  cfg_.validate();
  if (samples_.empty()) fail(ErrorKind::Config, "no training samples");
  const Grid grid = cfg_.student.grid();
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const Sample& sample = samples_[i];
    if (sample.token_labels.shape() != Shape{grid.h, grid.w}) {
      fail(ErrorKind::Config, "sample " + sample.name + ": token labels do not match the student grid");
    }
    PreparedSample p;
    p.index = i;
    p.sample = &sample;
    p.student_input = normalize_image(resize_full(sample.image, cfg_.student.image_res), cfg_.clip_mean, cfg_.clip_std);
    if (sample.vfm_tokens) {
      p.vfm_tokens = *sample.vfm_tokens;
    } else {
      const Tensor in = normalize_image(resize_full(sample.image, cfg_.vfm.image_res), cfg_.vfm_mean, cfg_.vfm_std);
      p.vfm_tokens = encode_dense(in, vfm_, EncodeMode::Standard).tokens;
    }
    if (p.vfm_tokens.rows() != grid.size()) {
      fail(ErrorKind::Config, "sample " + sample.name + ": VFM provider grid does not match the student grid");
    }
    const AffinityMatrix s_vfm = vfm_affinity(p.vfm_tokens, grid);
    if (cfg_.use_sd_completion) {
      SdAttentionStack stack;
      if (sample.sd) {
        stack = *sample.sd;
      } else {
        auto rng = seeded({cfg_.seed, kSdStream, i});
        stack = synth_sd_attention(sample.token_labels, cfg_.sd_sharpness, rng, cfg_.sd_layers);
      }
      if (!(stack.grid == grid)) fail(ErrorKind::Config, "sample " + sample.name + ": SD provider grid mismatch");
      p.s_hat = complete_affinity(fuse_sd_attention(stack), s_vfm).values;
    } else {
      p.s_hat = s_vfm.values;
    }
    prepared_.push_back(std::move(p));
  }
}

std::size_t Distiller::steps_per_epoch() const {
  return (samples_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
}

std::uint64_t Distiller::total_steps() const {
  const std::uint64_t all = static_cast<std::uint64_t>(cfg_.epochs) * steps_per_epoch();
  return cfg_.max_steps ? std::min<std::uint64_t>(all, cfg_.max_steps) : all;
}

std::vector<std::size_t> Distiller::batch_for_step(std::uint64_t s) const {
  const auto spe = steps_per_epoch();
  const std::uint64_t epoch = s / spe, pos = s % spe;
  std::vector<std::size_t> order(samples_.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = seeded({cfg_.seed, kShuffleStream, epoch});
  std::shuffle(order.begin(), order.end(), rng);
  const auto begin = pos * cfg_.batch_size;
  const auto end = std::min<std::size_t>(begin + cfg_.batch_size, order.size());
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

LossReport Distiller::step() {
  if (done()) fail(ErrorKind::Range, "training schedule already finished");
  const auto batch = batch_for_step(step_);
  const double w = 1.0 / static_cast<double>(batch.size());
  std::map<std::string, Tensor> grads;
  double ctx = 0.0, cos = 0.0, rcc = 0.0;
  for (const auto idx : batch) {
    auto rng = seeded({cfg_.seed, kCropStream, step_, idx});
    SampleGrads sg = sample_gradients(student_, prepared_[idx], cache_, cfg_, rng);
    ctx += w * sg.report.l_context;
    cos += w * sg.report.l_content_cos;
    rcc += w * sg.report.l_rcc;
    for (auto& [name, g] : sg.grads) {
      auto [it, fresh] = grads.try_emplace(name, g.shape());
      Tensor& acc = it->second;
      for (std::size_t i = 0; i < g.numel(); ++i) acc[i] += w * g[i];
    }
  }
  adamw_step(student_, grads, opt_, AdamWHyper::from(cfg_));
  ++step_;
  return total_loss(ctx, cos, rcc, cfg_.lambda, cfg_.tau);
}

NamedTensors Distiller::checkpoint() const { return encode_checkpoint(student_, opt_, step_); }

void Distiller::restore(const NamedTensors& sections) {
  StudentCheckpoint ck = decode_checkpoint(sections);
  if (!(ck.student.config == cfg_.student)) {
    fail(ErrorKind::Config, "checkpoint architecture does not match the configured student");
  }
  if (ck.step > total_steps()) fail(ErrorKind::Config, "checkpoint step lies beyond the configured schedule");
  student_ = std::move(ck.student);
  opt_ = std::move(ck.optimizer);
  step_ = ck.step;
}

namespace {

constexpr const char* kArchSection = "meta.arch";
constexpr const char* kStepSection = "meta.step";

Tensor scalar_tensor(double v) { return Tensor::full({1}, v); }

}  // namespace

NamedTensors encode_checkpoint(const VitParams& student, const OptimizerState& opt, std::uint64_t step) {
  const VitConfig& c = student.config;
  NamedTensors out;
  out.emplace_back(kArchSection,
                   Tensor::row({static_cast<double>(c.image_res), static_cast<double>(c.patch),
                                static_cast<double>(c.depth), static_cast<double>(c.width),
                                static_cast<double>(c.heads), static_cast<double>(c.mlp_ratio),
                                static_cast<double>(c.embed_dim), c.init_std, c.norm_eps}));
  out.emplace_back(kStepSection, scalar_tensor(static_cast<double>(step)));
  out.emplace_back("adam.step", scalar_tensor(static_cast<double>(opt.step)));
  student.for_each([&](const std::string& name, const Tensor& t) { out.emplace_back("student." + name, t); });
  for (const auto& [name, m] : opt.m) out.emplace_back("adam.m." + name, m);
  for (const auto& [name, v] : opt.v) out.emplace_back("adam.v." + name, v);
  return out;
}

StudentCheckpoint decode_checkpoint(const NamedTensors& sections) {
  const Tensor& arch = find_section(sections, kArchSection);
  if (arch.numel() != 9) fail(ErrorKind::Config, "checkpoint architecture record has the wrong length");
  VitConfig c;
  auto count = [&](std::size_t i) { return static_cast<std::size_t>(arch[i]); };
  c.image_res = count(0);
  c.patch = count(1);
  c.depth = count(2);
  c.width = count(3);
  c.heads = count(4);
  c.mlp_ratio = count(5);
  c.embed_dim = count(6);
  c.init_std = arch[7];
  c.norm_eps = arch[8];
  c.validate();
  StudentCheckpoint ck{VitParams::init(c, 0), {}, 0};
  ck.student.for_each_mut([&](const std::string& name, Tensor& t) {
    const Tensor& stored = find_section(sections, "student." + name);
    if (stored.shape() != t.shape()) {
      fail(ErrorKind::Config, "checkpoint tensor student." + name + " has shape " + shape_str(stored.shape()));
    }
    t = stored;
    if (const Tensor* m = find_section_or_null(sections, "adam.m." + name)) {
      ck.optimizer.m.emplace(name, *m);
      ck.optimizer.v.emplace(name, find_section(sections, "adam.v." + name));
    }
  });
  ck.step = static_cast<std::uint64_t>(find_section(sections, kStepSection)[0]);
  ck.optimizer.step = static_cast<std::uint64_t>(find_section(sections, "adam.step")[0]);
  return ck;
}

StudentCheckpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_tensor(path)); }

std::string format_metrics_line(std::uint64_t step, const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "step=%llu l_context=%.17g l_content=%.17g l_rcc=%.17g l_total=%.17g",
                static_cast<unsigned long long>(step), r.l_context, r.l_content_cos, r.l_rcc, r.l_total);
  return buf;
}

namespace {

/// Lines of an earlier log up to and including `last_step`, so a resumed
/// run extends the history instead of replacing it.
std::string previous_log(const std::filesystem::path& log, std::uint64_t last_step) {
  std::ifstream in(log);
  std::string out, line;
  while (std::getline(in, line)) {
    unsigned long long step = 0;
    if (std::sscanf(line.c_str(), "step=%llu", &step) == 1 && step <= last_step) out += line + "\n";
  }
  return out;
}

}  // namespace

RunResult distill_run(const DistillConfig& cfg) {
  if (cfg.manifest.empty()) fail(ErrorKind::Config, "distill needs manifest = <path>");
  return distill_run(cfg, load_samples(cfg.manifest, cfg.student.grid()));
}

RunResult distill_run(const DistillConfig& cfg, std::vector<Sample> samples) {
  cfg.validate();
  Distiller d(cfg, std::move(samples));
  const std::filesystem::path ck_dir(cfg.checkpoint_dir), report_dir(cfg.report_dir);
  std::error_code ec;
  std::filesystem::create_directories(ck_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + ck_dir.string() + ": " + ec.message());
  std::filesystem::create_directories(report_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + report_dir.string() + ": " + ec.message());

  RunResult result;
  result.checkpoint = ck_dir / "checkpoint.dten";
  result.metrics_log = report_dir / "metrics.log";
  result.config_echo = report_dir / "config.echo";
  write_text_atomic(result.config_echo, echo_config(cfg));

  std::string log;
  if (!cfg.resume.empty()) {
    d.restore(read_tensor(cfg.resume));
    log = previous_log(result.metrics_log, d.steps_done());
  }
  while (!d.done()) {
    const LossReport r = d.step();
    result.reports.push_back(r);
    log += format_metrics_line(d.steps_done(), r) + "\n";
    if (d.steps_done() % d.steps_per_epoch() == 0) {
      write_tensor(result.checkpoint, d.checkpoint());
      write_text_atomic(result.metrics_log, log);
    }
  }
  write_tensor(result.checkpoint, d.checkpoint());
  write_text_atomic(result.metrics_log, log);
  result.student = d.student();
  return result;
}

}  // namespace declip
