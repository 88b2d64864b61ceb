#include "declip/data.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "declip/container.hpp"

namespace declip {

std::vector<ManifestEntry> parse_manifest_text(const std::string& text, const std::filesystem::path& base,
                                               const std::string& origin) {
  std::vector<ManifestEntry> out;
  std::stringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::stringstream fields(line);
    std::string field;
    std::map<std::string, std::string> kv;
    const auto where = origin + ":" + std::to_string(lineno) + ": ";
    while (fields >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == field.size()) {
        fail(ErrorKind::Config, where + "expected key=value, got '" + field + "'");
      }
      const auto key = field.substr(0, eq);
      if (key != "image" && key != "segments" && key != "vfm" && key != "sd") {
        fail(ErrorKind::Config, where + "unknown manifest key '" + key + "'");
      }
      if (!kv.emplace(key, field.substr(eq + 1)).second) fail(ErrorKind::Config, where + "duplicate key " + key);
    }
    if (kv.empty()) continue;
    if (!kv.count("image") || !kv.count("segments")) {
      fail(ErrorKind::Config, where + "image= and segments= are required");
    }
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path path(p);
      return path.is_absolute() ? path : base / path;
    };
    ManifestEntry e;
    e.image = resolve(kv["image"]);
    e.segments = resolve(kv["segments"]);
    if (kv.count("vfm")) e.vfm = resolve(kv["vfm"]);
    if (kv.count("sd")) e.sd = resolve(kv["sd"]);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ManifestEntry> parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto entries = parse_manifest_text(ss.str(), path.parent_path(), path.string());
  if (entries.empty()) fail(ErrorKind::Config, "manifest " + path.string() + " lists no samples");
  return entries;
}

std::string format_manifest_line(const ManifestEntry& e) {
  std::string line = "image=" + e.image.string() + " segments=" + e.segments.string();
  if (e.vfm) line += " vfm=" + e.vfm->string();
  if (e.sd) line += " sd=" + e.sd->string();
  return line;
}

Tensor token_labels(const Tensor& segments, Grid grid) {
  require_matrix(segments, "segments");
  const auto h = segments.rows(), w = segments.cols();
  if (h % grid.h != 0 || w % grid.w != 0) {
    fail(ErrorKind::Dimension, "segment map " + shape_str(segments.shape()) + " is not a multiple of the token grid");
  }
  const auto ph = h / grid.h, pw = w / grid.w;
  Tensor out({grid.h, grid.w});
  for (std::size_t ty = 0; ty < grid.h; ++ty)
    for (std::size_t tx = 0; tx < grid.w; ++tx) {
      std::map<int, std::size_t> votes;
      for (std::size_t y = ty * ph; y < (ty + 1) * ph; ++y)
        for (std::size_t x = tx * pw; x < (tx + 1) * pw; ++x) {
          const int label = static_cast<int>(segments.at(y, x));
          if (label != kIgnoreLabel) ++votes[label];
        }
      int best = kIgnoreLabel;
      std::size_t best_count = 0;
      for (const auto& [label, n] : votes)
        if (n > best_count) {
          best = label;
          best_count = n;
        }
      out.at(ty, tx) = best;
    }
  return out;
}

Sample load_sample(const ManifestEntry& entry, Grid grid) {
  Sample s;
  s.name = entry.image.stem().string();
  s.image = find_section(read_tensor(entry.image), kImageSection);
  const auto& is = s.image.shape();
  if (is.size() != 3 || is[0] != 3 || is[1] != is[2]) {
    fail(ErrorKind::Config, entry.image.string() + ": image must be 3xRxR, got " + shape_str(is));
  }
  s.segments = find_section(read_tensor(entry.segments), kSegmentsSection);
  if (s.segments.shape() != Shape{is[1], is[2]}) {
    fail(ErrorKind::Config, entry.segments.string() + ": segment map " + shape_str(s.segments.shape()) +
                                " does not match image " + shape_str(is));
  }
  for (double v : s.segments.values())
    if (v < 0 || v != std::floor(v)) fail(ErrorKind::Config, entry.segments.string() + ": labels must be non-negative integers");
  s.token_labels = token_labels(s.segments, grid);
  if (entry.vfm) {
    s.vfm_tokens = find_section(read_tensor(*entry.vfm), kVfmSection);
    if (s.vfm_tokens->rank() != 2 || s.vfm_tokens->rows() != grid.size()) {
      fail(ErrorKind::Config, entry.vfm->string() + ": VFM grid " + shape_str(s.vfm_tokens->shape()) +
                                  " does not match " + std::to_string(grid.size()) + " student tokens");
    }
  }
  if (entry.sd) {
    SdAttentionStack st;
    st.maps = find_section(read_tensor(*entry.sd), kSdSection);
    st.grid = grid;
    st.source = StackSource::Ingested;
    st.tag = entry.sd->filename().string();
    const auto& ms = st.maps.shape();
    if (ms.size() != 3 || ms[1] != grid.size() || ms[2] != grid.size()) {
      fail(ErrorKind::Config, entry.sd->string() + ": SD stack " + shape_str(ms) + " does not match " +
                                  std::to_string(grid.size()) + " student tokens");
    }
    st.validate();
    s.sd = std::move(st);
  }
  return s;
}

std::vector<Sample> load_samples(const std::filesystem::path& manifest, Grid grid) {
  std::vector<Sample> out;
  for (const auto& e : parse_manifest(manifest)) out.push_back(load_sample(e, grid));
  return out;
}

}  // namespace declip
