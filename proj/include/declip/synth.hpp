#pragma once

#include <filesystem>
#include <random>
#include <vector>

#include "declip/config.hpp"
#include "declip/data.hpp"
#include "declip/eval.hpp"

namespace declip {

/// Seeded generator for the desk-scale evaluation suite. Images are
/// rectangle partitions of the token grid painted in per-class colours;
/// VFM tokens are noisy class prototypes with occasional wrong-class holes.
struct SynthSuiteConfig {
  std::size_t num_classes = 4;
  std::size_t train_images = 8;
  std::size_t test_images = 8;
  std::size_t min_segments = 2, max_segments = 5;
  double pixel_noise = 0.05;    // per-pixel Gaussian std
  double colour_jitter = 0.05;  // per-segment shift of the class colour
  std::size_t vfm_dim = 16;
  double vfm_noise = 0.3;  // per-component std relative to unit-variance prototypes
  double hole_rate = 0.15;
  std::uint64_t seed = 7;
};

struct SynthSuite {
  std::vector<Sample> train, test;
  ClassEmbeddings classes;
  std::vector<Triple> colours;
};

/// K colours in [0.1, 0.9]³, pairwise at least 0.3 apart.
std::vector<Triple> class_colours(std::size_t k, std::mt19937_64& rng);

/// H×W label map built by recursive axis-aligned splits; every segment is at
/// least 2 tokens wide and tall when the grid allows it.
Tensor guillotine_labels(Grid grid, std::size_t num_classes, std::size_t segments, std::mt19937_64& rng);

/// Unit-norm teacher CLS of a flat image of each class colour.
ClassEmbeddings teacher_class_embeddings(const VitParams& teacher, const std::vector<Triple>& colours,
                                         const DistillConfig& cfg);

/// Class provider for the ablation: teacher CLS of the suite's colours.
ClassProvider synthetic_classes(const std::vector<Triple>& colours, const DistillConfig& cfg);

/// The suite and training settings behind the shipped ablation and the
/// directional acceptance checks. Fixed before the checks were first run.
SynthSuiteConfig shipped_suite_config();
DistillConfig shipped_ablation_config();

/// The 8-image overfit setting: full batch, one fixed 3×3 crop grid.
DistillConfig overfit_config();

SynthSuite make_synthetic_suite(const SynthSuiteConfig& suite, const DistillConfig& cfg);

/// Writes per-sample container files, train.txt, test.txt and classes.dten.
void write_synthetic_suite(const std::filesystem::path& dir, const SynthSuite& suite);

}  // namespace declip
