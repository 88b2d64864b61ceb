#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "declip/affinity.hpp"

namespace declip {

/// One manifest record: `image=<path> segments=<path> [vfm=<path>] [sd=<path>]`.
/// Relative paths resolve against the manifest's directory.
struct ManifestEntry {
  std::filesystem::path image, segments;
  std::optional<std::filesystem::path> vfm, sd;
};

std::vector<ManifestEntry> parse_manifest_text(const std::string& text, const std::filesystem::path& base,
                                               const std::string& origin = "<manifest>");
std::vector<ManifestEntry> parse_manifest(const std::filesystem::path& path);
std::string format_manifest_line(const ManifestEntry& e);

// Section names inside the per-sample container files.
inline constexpr const char* kImageSection = "image";        // 3×R×R, values in [0, 1]
inline constexpr const char* kSegmentsSection = "segments";  // R×R integer class labels
inline constexpr const char* kVfmSection = "features";       // HW×D VFM tokens
inline constexpr const char* kSdSection = "maps";            // L×HW×HW attention stack
inline constexpr int kIgnoreLabel = 255;

struct Sample {
  std::string name;
  Tensor image;         // 3×R×R
  Tensor segments;      // R×R labels
  Tensor token_labels;  // H×W labels on the token grid
  std::optional<Tensor> vfm_tokens;
  std::optional<SdAttentionStack> sd;
};

/// Majority label of each patch; ties go to the smaller label and ignored
/// pixels do not vote. A patch with only ignored pixels gets kIgnoreLabel.
Tensor token_labels(const Tensor& segments, Grid grid);

/// Reads the files of one entry and checks their shapes against `grid`.
Sample load_sample(const ManifestEntry& entry, Grid grid);
std::vector<Sample> load_samples(const std::filesystem::path& manifest, Grid grid);

}  // namespace declip
