#include "declip/synth.hpp"

#include <algorithm>
#include <cmath>

#include "declip/container.hpp"

namespace declip {

std::vector<Triple> class_colours(std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 0.9);
  std::vector<Triple> out;
  for (int attempt = 0; out.size() < k; ++attempt) {
    if (attempt > 100000) fail(ErrorKind::Parameter, "cannot place " + std::to_string(k) + " separated colours");
    const Triple c = {u(rng), u(rng), u(rng)};
    const bool far = std::all_of(out.begin(), out.end(), [&](const Triple& o) {
      return std::hypot(c[0] - o[0], c[1] - o[1], c[2] - o[2]) >= 0.3;
    });
    if (far) out.push_back(c);
  }
  return out;
}

Tensor guillotine_labels(Grid grid, std::size_t num_classes, std::size_t segments, std::mt19937_64& rng) {
  if (num_classes == 0 || segments == 0) fail(ErrorKind::Parameter, "need at least one class and one segment");
  struct Rect {
    std::size_t y0, x0, h, w;
  };
  std::vector<Rect> rects = {{0, 0, grid.h, grid.w}};
  while (rects.size() < segments) {
    // Split the largest rectangle that can still give two sides of >= 2 tokens.
    std::vector<std::size_t> order(rects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rects[a].h * rects[a].w > rects[b].h * rects[b].w; });
    bool split = false;
    for (const auto i : order) {
      const Rect r = rects[i];
      const bool can_h = r.h >= 4, can_w = r.w >= 4;
      if (!can_h && !can_w) continue;
      const bool along_h = can_h && (!can_w || std::bernoulli_distribution(0.5)(rng));
      const std::size_t extent = along_h ? r.h : r.w;
      const std::size_t cut = std::uniform_int_distribution<std::size_t>(2, extent - 2)(rng);
      if (along_h) {
        rects[i] = {r.y0, r.x0, cut, r.w};
        rects.push_back({r.y0 + cut, r.x0, r.h - cut, r.w});
      } else {
        rects[i] = {r.y0, r.x0, r.h, cut};
        rects.push_back({r.y0, r.x0 + cut, r.h, r.w - cut});
      }
      split = true;
      break;
    }
    if (!split) break;
  }
  Tensor labels({grid.h, grid.w});
  std::uniform_int_distribution<std::size_t> pick(0, num_classes - 1);
  for (const Rect& r : rects) {
    const double c = static_cast<double>(pick(rng));
    for (std::size_t y = r.y0; y < r.y0 + r.h; ++y)
      for (std::size_t x = r.x0; x < r.x0 + r.w; ++x) labels.at(y, x) = c;
  }
  return labels;
}

ClassEmbeddings teacher_class_embeddings(const VitParams& teacher, const std::vector<Triple>& colours,
                                         const DistillConfig& cfg) {
  const std::size_t res = teacher.config.image_res;
  Tensor vectors({colours.size(), teacher.config.out_dim()});
  for (std::size_t k = 0; k < colours.size(); ++k) {
    Tensor flat({3, res, res});
    for (std::size_t c = 0; c < 3; ++c)
      std::fill(flat.values().begin() + static_cast<std::ptrdiff_t>(c * res * res),
                flat.values().begin() + static_cast<std::ptrdiff_t>((c + 1) * res * res), colours[k][c]);
    const Tensor cls = encode_cls(normalize_image(flat, cfg.clip_mean, cfg.clip_std), teacher);
    for (std::size_t j = 0; j < cls.numel(); ++j) vectors.at(k, j) = cls[j];
  }
  return make_class_embeddings(vectors, ClassSource::Synthetic);
}

ClassProvider synthetic_classes(const std::vector<Triple>& colours, const DistillConfig& cfg) {
  return [colours, cfg](const VitParams& teacher) { return teacher_class_embeddings(teacher, colours, cfg); };
}

SynthSuiteConfig shipped_suite_config() {
  SynthSuiteConfig sc;
  sc.num_classes = 6;
  sc.train_images = 16;
  sc.test_images = 16;
  sc.pixel_noise = 0.3;
  sc.colour_jitter = 0.1;
  sc.hole_rate = 0.15;
  sc.seed = 7;
  return sc;
}

DistillConfig shipped_ablation_config() {
  DistillConfig cfg;
  cfg.student.init_std = 0.2;
  cfg.lr = 1e-3;
  cfg.epochs = 20;
  cfg.ablation_seeds = 3;
  return cfg;
}

DistillConfig overfit_config() {
  DistillConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  cfg.batch_size = 8;
  cfg.grid_lo = cfg.grid_hi = 3;
  cfg.epochs = 200;
  return cfg;
}

namespace {

Sample make_sample(const std::string& name, const SynthSuiteConfig& sc, const DistillConfig& cfg,
                   const std::vector<Triple>& colours, const Tensor& protos, std::mt19937_64& rng) {
  const Grid grid = cfg.student.grid();
  const std::size_t res = cfg.student.image_res, patch = cfg.student.patch;
  const std::size_t segs = std::uniform_int_distribution<std::size_t>(sc.min_segments, sc.max_segments)(rng);
  const Tensor tokens = guillotine_labels(grid, sc.num_classes, segs, rng);

  // One colour shift per class and image. VFM holes never touch the image.
  std::normal_distribution<double> jitter(0.0, sc.colour_jitter), pixel(0.0, sc.pixel_noise);
  std::vector<Triple> shift(sc.num_classes);
  for (auto& s : shift)
    for (double& v : s) v = jitter(rng);

  Sample s;
  s.name = name;
  s.image = Tensor({3, res, res});
  s.segments = Tensor({res, res});
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      const auto label = static_cast<std::size_t>(tokens.at(y / patch, x / patch));
      s.segments.at(y, x) = static_cast<double>(label);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = colours[label][c] + shift[label][c] + pixel(rng);
        s.image[(c * res + y) * res + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  s.image.set_dtype(DType::F32);  // the on-disk precision, so files and memory agree
  s.token_labels = tokens;

  std::normal_distribution<double> noise(0.0, sc.vfm_noise);
  std::bernoulli_distribution hole(sc.hole_rate);
  std::uniform_int_distribution<std::size_t> other(1, sc.num_classes - 1);
  Tensor vfm({grid.size(), sc.vfm_dim});
  for (std::size_t t = 0; t < grid.size(); ++t) {
    auto label = static_cast<std::size_t>(tokens[t]);
    if (hole(rng)) label = (label + other(rng)) % sc.num_classes;
    for (std::size_t j = 0; j < sc.vfm_dim; ++j) vfm.at(t, j) = protos.at(label, j) + noise(rng);
  }
  s.vfm_tokens = vfm;
  return s;
}

}  // namespace

SynthSuite make_synthetic_suite(const SynthSuiteConfig& sc, const DistillConfig& cfg) {
  if (sc.num_classes < 2) fail(ErrorKind::Parameter, "synthetic suite needs at least two classes");
  if (sc.min_segments < 1 || sc.min_segments > sc.max_segments) fail(ErrorKind::Parameter, "bad segment range");
  if (sc.vfm_dim < 1) fail(ErrorKind::Parameter, "vfm_dim must be positive");
  cfg.validate();
  std::mt19937_64 rng(sc.seed);
  SynthSuite suite;
  suite.colours = class_colours(sc.num_classes, rng);
  const Tensor protos = Tensor::randn({sc.num_classes, sc.vfm_dim}, rng);
  for (std::size_t i = 0; i < sc.train_images; ++i)
    suite.train.push_back(make_sample("train" + std::to_string(i), sc, cfg, suite.colours, protos, rng));
  for (std::size_t i = 0; i < sc.test_images; ++i)
    suite.test.push_back(make_sample("test" + std::to_string(i), sc, cfg, suite.colours, protos, rng));
  const VitParams teacher = VitParams::init(cfg.student, cfg.seed).frozen_copy();
  suite.classes = teacher_class_embeddings(teacher, suite.colours, cfg);
  return suite;
}

void write_synthetic_suite(const std::filesystem::path& dir, const SynthSuite& suite) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  auto write_split = [&](const std::vector<Sample>& samples, const std::string& manifest) {
    std::string lines;
    for (const Sample& s : samples) {
      ManifestEntry e;
      e.image = s.name + "_image.dten";
      e.segments = s.name + "_segments.dten";
      Tensor seg = s.segments;
      seg.set_dtype(DType::I32);
      write_tensor(dir / e.image, {{kImageSection, s.image}});
      write_tensor(dir / e.segments, {{kSegmentsSection, seg}});
      if (s.vfm_tokens) {
        e.vfm = s.name + "_vfm.dten";
        write_tensor(dir / *e.vfm, {{kVfmSection, *s.vfm_tokens}});
      }
      lines += format_manifest_line(e) + "\n";
    }
    write_text_atomic(dir / manifest, lines);
  };
  write_split(suite.train, "train.txt");
  write_split(suite.test, "test.txt");
  save_class_embeddings(dir / "classes.dten", suite.classes);
}

}  // namespace declip
