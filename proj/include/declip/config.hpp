#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>

#include "declip/vit.hpp"

namespace declip {

/// Which student feature carries the distillation losses.
enum class Variant {
  Decoupled,  // context on x_context, content on x_content of the decoupled final block
  Coupled,    // both on the standard final-block dense output
};

std::string to_string(Variant v);

using Triple = std::array<double, 3>;

/// Every hyperparameter of training and evaluation. Defaults follow the
/// paper where it states a value; the architecture and resolutions are
/// desk-scale stand-ins.
struct DistillConfig {
  double lambda = 0.25;
  double tau = 1.0;
  std::size_t grid_lo = 1, grid_hi = 6;
  std::size_t roi_n = 4;
  double lr = 1e-5;
  double weight_decay = 0.1;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t epochs = 6;
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;

  VitConfig student = default_student();
  VitConfig vfm = default_vfm();
  std::uint64_t vfm_seed = 1;

  Triple clip_mean = {0.48145466, 0.4578275, 0.40821073};
  Triple clip_std = {0.26862954, 0.26130258, 0.27577711};
  Triple vfm_mean = {0.485, 0.456, 0.406};
  Triple vfm_std = {0.229, 0.224, 0.225};

  std::optional<std::size_t> trainable_layers;  // nullopt: every block
  Variant variant = Variant::Decoupled;
  bool use_rcc = true;
  bool use_sd_completion = true;
  double sd_sharpness = 4.0;
  std::size_t sd_layers = 4;
  std::size_t max_steps = 0;  // 0: no cap
  std::size_t ablation_seeds = 1;  // ablate: training seeds seed, seed+1, ... averaged

  std::string manifest;
  std::string eval_manifest;
  std::string classes;
  std::string checkpoint_dir = "checkpoints";
  std::string report_dir = "reports";
  std::string resume;

  static VitConfig default_student();
  static VitConfig default_vfm();

  /// Range checks; throws ErrorKind::Range or ErrorKind::Config.
  void validate() const;
  bool operator==(const DistillConfig&) const;
};

/// Parses `key = value` lines with `#` comments. Absent keys keep their
/// defaults; unknown keys, unparsable values and range violations throw.
DistillConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
DistillConfig parse_config(const std::filesystem::path& path);

/// Every key with its effective value, in a form parse_config_text accepts.
std::string echo_config(const DistillConfig& cfg);

}  // namespace declip
