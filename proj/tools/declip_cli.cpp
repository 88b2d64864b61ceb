#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "declip/affinity.hpp"
#include "declip/checks.hpp"
#include "declip/config.hpp"
#include "declip/container.hpp"
#include "declip/data.hpp"
#include "declip/eval.hpp"
#include "declip/region.hpp"
#include "declip/synth.hpp"
#include "declip/trainer.hpp"

using namespace declip;

namespace {

constexpr int kExitOk = 0, kExitValidation = 1, kExitIo = 2;

struct EvalArgs {
  std::string checkpoint, manifest, classes, config, mode = "decoupled";
};

void add_eval_flags(CLI::App* app, EvalArgs& a) {
  app->add_option("--checkpoint", a.checkpoint, "student checkpoint (.dten)")->required();
  app->add_option("--manifest", a.manifest, "evaluation manifest")->required();
  app->add_option("--classes", a.classes, "class embeddings (.dten)")->required();
  app->add_option("--config", a.config, "run config for normalisation constants");
  app->add_option("--mode", a.mode, "dense feature path")->check(CLI::IsMember({"decoupled", "standard"}));
}

EvalReport run_eval(const EvalArgs& a) {
  DistillConfig cfg = a.config.empty() ? DistillConfig{} : parse_config(a.config);
  const StudentCheckpoint ck = load_checkpoint(a.checkpoint);
  const auto samples = load_samples(a.manifest, ck.student.config.grid());
  const ClassEmbeddings classes = load_class_embeddings(a.classes);
  const EncodeMode mode = a.mode == "standard" ? EncodeMode::Standard : EncodeMode::Decoupled;
  return evaluate(ck.student, mode, samples, classes, cfg);
}

std::vector<std::size_t> parse_layers(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) fail(ErrorKind::Parameter, "bad layer index '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) fail(ErrorKind::Parameter, "--layers is empty");
  return out;
}

std::optional<std::size_t> parse_query(const std::string& text) {
  if (text == "cls") return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::Parameter, "--query expects a token index or 'cls', got '" + text + "'");
}

AblationReport run_ablation(const DistillConfig& cfg) {
  if (cfg.manifest.empty()) {
    const SynthSuite suite = make_synthetic_suite(shipped_suite_config(), cfg);
    return ablation_coupled_vs_decoupled(cfg, suite.train, suite.test, synthetic_classes(suite.colours, cfg));
  }
  if (cfg.classes.empty()) fail(ErrorKind::Config, "ablate with a manifest needs classes = <path>");
  const Grid grid = cfg.student.grid();
  const auto train = load_samples(cfg.manifest, grid);
  const auto test = load_samples(cfg.eval_manifest.empty() ? cfg.manifest : cfg.eval_manifest, grid);
  return ablation_coupled_vs_decoupled(cfg, train, test, load_class_embeddings(cfg.classes));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled CLIP distillation at desk scale", "declip"};
  app.require_subcommand(1);

  std::string config_path;
  auto* distill = app.add_subcommand("distill", "train a student; writes checkpoint, metrics log and config echo");
  distill->add_option("--config", config_path, "run config")->required();

  EvalArgs seg_args, region_args;
  auto* eval_seg = app.add_subcommand("eval-seg", "training-free segmentation mIoU");
  add_eval_flags(eval_seg, seg_args);
  auto* eval_region = app.add_subcommand("eval-region", "per-class-mask region classification mAcc");
  add_eval_flags(eval_region, region_args);

  std::string dump_ck, dump_image, dump_layers, dump_query = "cls", dump_out = "attn";
  auto* dump = app.add_subcommand("dump-attn", "head-averaged attention maps as P5 grey maps plus a DTEN sidecar");
  dump->add_option("--checkpoint", dump_ck, "model checkpoint (.dten)")->required();
  dump->add_option("--image", dump_image, "sample container with an 'image' section")->required();
  dump->add_option("--layers", dump_layers, "comma-separated block indices")->required();
  dump->add_option("--query", dump_query, "image-token index or 'cls'");
  dump->add_option("--out", dump_out, "output directory");

  std::uint64_t grad_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference suite over the differentiable ops");
  gradcheck->add_option("--seed", grad_seed, "instance seed");

  std::string ablate_config;
  auto* ablate = app.add_subcommand("ablate", "content-only / coupled / decoupled comparison");
  ablate->add_option("--config", ablate_config, "run config")->required();

  auto* selftest_cmd = app.add_subcommand("selftest", "worked examples of every module");

  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write the shipped synthetic suite as sample files and manifests");
  synth->add_option("--out", synth_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_exit_code() != 0) std::cerr << app.help();
    return kExitValidation;
  }

  try {
    if (*distill) {
      const RunResult r = distill_run(parse_config(config_path));
      std::printf("steps=%zu\ncheckpoint=%s\nmetrics=%s\n", r.reports.size(), r.checkpoint.c_str(),
                  r.metrics_log.c_str());
    } else if (*eval_seg) {
      const EvalReport r = run_eval(seg_args);
      for (std::size_t c = 0; c < r.class_iou.size(); ++c) {
        if (std::isnan(r.class_iou[c]))
          std::printf("iou[%zu]=n/a\n", c);
        else
          std::printf("iou[%zu]=%.17g\n", c, r.class_iou[c]);
      }
      std::printf("images=%zu\nmiou=%.17g\n", r.images, r.miou);
    } else if (*eval_region) {
      const EvalReport r = run_eval(region_args);
      std::printf("regions=%zu\nmacc=%.17g\n", r.regions, r.macc);
    } else if (*dump) {
      const StudentCheckpoint ck = load_checkpoint(dump_ck);
      Tensor image = find_section(read_tensor(dump_image), kImageSection);
      const std::size_t res = ck.student.config.image_res;
      if (image.rank() == 3 && image.shape()[1] != res) image = crop_resize(image, CropBox{}, res);
      const auto layers = parse_layers(dump_layers);
      for (const AttentionDump& d : dump_attention_analysis(ck.student, image, layers, parse_query(dump_query), dump_out))
        std::printf("layer=%zu full=%s query=%s sidecar=%s\n", d.layer, d.full_pgm.c_str(), d.query_pgm.c_str(),
                    d.sidecar.c_str());
    } else if (*gradcheck) {
      const auto results = gradient_suite(grad_seed);
      std::printf("%s", format_checks(results).c_str());
      return all_passed(results) ? kExitOk : kExitValidation;
    } else if (*ablate) {
      const DistillConfig cfg = parse_config(ablate_config);
      const std::string report = format_ablation_report(run_ablation(cfg));
      std::filesystem::create_directories(cfg.report_dir);
      write_text_atomic(std::filesystem::path(cfg.report_dir) / "ablation.txt", report);
      std::printf("%s", report.c_str());
    } else if (*selftest_cmd) {
      const auto results = selftest();
      std::printf("%s", format_checks(results).c_str());
      return all_passed(results) ? kExitOk : kExitValidation;
    } else if (*synth) {
      write_synthetic_suite(synth_out, make_synthetic_suite(shipped_suite_config(), shipped_ablation_config()));
      std::printf("wrote %s\n", synth_out.c_str());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return e.is_io() ? kExitIo : kExitValidation;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  }
  return kExitOk;
}
