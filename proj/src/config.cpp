#include "declip/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace declip {

std::string to_string(Variant v) { return v == Variant::Decoupled ? "decoupled" : "coupled"; }

VitConfig DistillConfig::default_student() {
  VitConfig c;
  c.image_res = 64;
  c.patch = 8;
  c.depth = 3;
  c.width = 32;
  c.heads = 4;
  c.embed_dim = 32;
  return c;
}

VitConfig DistillConfig::default_vfm() {
  VitConfig c;
  c.image_res = 56;
  c.patch = 7;
  c.depth = 2;
  c.width = 32;
  c.heads = 4;
  return c;
}

namespace {

[[noreturn]] void range_error(const std::string& key, const std::string& why) {
  fail(ErrorKind::Range, key + " " + why);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
    fail(ErrorKind::Config, "cannot parse '" + v + "' as a number for " + key);
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    fail(ErrorKind::Config, "cannot parse '" + v + "' as a non-negative integer for " + key);
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::Config, "expected true or false for " + key + ", got '" + v + "'");
}

Triple to_triple(const std::string& key, const std::string& v) {
  Triple t{};
  std::stringstream ss(v);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3) fail(ErrorKind::Config, key + " takes exactly three comma-separated values");
    t[i++] = to_double(key, trim(part));
  }
  if (i != 3) fail(ErrorKind::Config, key + " takes exactly three comma-separated values");
  return t;
}

struct Key {
  std::string name;
  std::function<void(DistillConfig&, const std::string&)> set;
  std::function<std::string(const DistillConfig&)> get;
};

template <typename M>
Key real(const std::string& name, M member) {
  return {name, [=](DistillConfig& c, const std::string& v) { c.*member = to_double(name, v); },
          [=](const DistillConfig& c) { return fmt_double(c.*member); }};
}

template <typename M>
Key count(const std::string& name, M member) {
  return {name, [=](DistillConfig& c, const std::string& v) { c.*member = to_uint(name, v); },
          [=](const DistillConfig& c) { return std::to_string(c.*member); }};
}

template <typename M>
Key flag(const std::string& name, M member) {
  return {name, [=](DistillConfig& c, const std::string& v) { c.*member = to_bool(name, v); },
          [=](const DistillConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

template <typename M>
Key text(const std::string& name, M member) {
  return {name, [=](DistillConfig& c, const std::string& v) { c.*member = v; },
          [=](const DistillConfig& c) { return c.*member; }};
}

template <typename M>
Key triple(const std::string& name, M member) {
  return {name, [=](DistillConfig& c, const std::string& v) { c.*member = to_triple(name, v); },
          [=](const DistillConfig& c) {
            const Triple& t = c.*member;
            return fmt_double(t[0]) + "," + fmt_double(t[1]) + "," + fmt_double(t[2]);
          }};
}

template <typename M>
Key vit_count(const std::string& name, VitConfig DistillConfig::*model, M member) {
  return {name, [=](DistillConfig& c, const std::string& v) { (c.*model).*member = to_uint(name, v); },
          [=](const DistillConfig& c) { return std::to_string((c.*model).*member); }};
}

template <typename M>
Key vit_real(const std::string& name, VitConfig DistillConfig::*model, M member) {
  return {name, [=](DistillConfig& c, const std::string& v) { (c.*model).*member = to_double(name, v); },
          [=](const DistillConfig& c) { return fmt_double((c.*model).*member); }};
}

const std::vector<Key>& keys() {
  using C = DistillConfig;
  static const std::vector<Key> table = {
      real("lambda", &C::lambda),
      real("tau", &C::tau),
      count("grid_lo", &C::grid_lo),
      count("grid_hi", &C::grid_hi),
      count("roi_n", &C::roi_n),
      real("lr", &C::lr),
      real("weight_decay", &C::weight_decay),
      real("beta1", &C::beta1),
      real("beta2", &C::beta2),
      real("eps", &C::eps),
      count("epochs", &C::epochs),
      count("batch_size", &C::batch_size),
      count("seed", &C::seed),
      vit_count("student_res", &C::student, &VitConfig::image_res),
      vit_count("student_patch", &C::student, &VitConfig::patch),
      vit_count("student_width", &C::student, &VitConfig::width),
      vit_count("student_depth", &C::student, &VitConfig::depth),
      vit_count("student_heads", &C::student, &VitConfig::heads),
      vit_count("student_mlp_ratio", &C::student, &VitConfig::mlp_ratio),
      vit_count("embed_dim", &C::student, &VitConfig::embed_dim),
      vit_real("student_init_std", &C::student, &VitConfig::init_std),
      vit_count("vfm_res", &C::vfm, &VitConfig::image_res),
      vit_count("vfm_patch", &C::vfm, &VitConfig::patch),
      vit_count("vfm_width", &C::vfm, &VitConfig::width),
      vit_count("vfm_depth", &C::vfm, &VitConfig::depth),
      vit_count("vfm_heads", &C::vfm, &VitConfig::heads),
      vit_real("vfm_init_std", &C::vfm, &VitConfig::init_std),
      count("vfm_seed", &C::vfm_seed),
      triple("clip_mean", &C::clip_mean),
      triple("clip_std", &C::clip_std),
      triple("vfm_mean", &C::vfm_mean),
      triple("vfm_std", &C::vfm_std),
      {"trainable_layers",
       [](C& c, const std::string& v) {
         if (v == "all") {
           c.trainable_layers.reset();
         } else {
           c.trainable_layers = to_uint("trainable_layers", v);
         }
       },
       [](const C& c) { return c.trainable_layers ? std::to_string(*c.trainable_layers) : std::string("all"); }},
      {"variant",
       [](C& c, const std::string& v) {
         if (v == "decoupled") {
           c.variant = Variant::Decoupled;
         } else if (v == "coupled") {
           c.variant = Variant::Coupled;
         } else {
           fail(ErrorKind::Config, "variant must be decoupled or coupled, got '" + v + "'");
         }
       },
       [](const C& c) { return to_string(c.variant); }},
      flag("use_rcc", &C::use_rcc),
      flag("use_sd_completion", &C::use_sd_completion),
      real("sd_sharpness", &C::sd_sharpness),
      count("sd_layers", &C::sd_layers),
      count("max_steps", &C::max_steps),
      count("ablation_seeds", &C::ablation_seeds),
      text("manifest", &C::manifest),
      text("eval_manifest", &C::eval_manifest),
      text("classes", &C::classes),
      text("checkpoint_dir", &C::checkpoint_dir),
      text("report_dir", &C::report_dir),
      text("resume", &C::resume),
  };
  return table;
}

void check_model(const std::string& prefix, const VitConfig& m) {
  if (m.patch == 0 || m.image_res == 0) range_error(prefix + "_res/patch", "must be positive");
  if (m.image_res % m.patch != 0) range_error(prefix + "_res", "must be a multiple of the patch size");
  if (m.depth == 0) range_error(prefix + "_depth", "must be at least 1");
  if (m.heads == 0 || m.width == 0 || m.width % m.heads != 0) {
    range_error(prefix + "_width", "must be a positive multiple of the head count");
  }
  if (m.mlp_ratio == 0) range_error(prefix + "_mlp_ratio", "must be at least 1");
  if (!(m.init_std > 0.0)) range_error(prefix + "_init_std", "must be positive");
}

}  // namespace

void DistillConfig::validate() const {
  if (!(lambda >= 0.0)) range_error("lambda", "must be >= 0");
  if (!(tau > 0.0)) range_error("tau", "must be > 0");
  if (grid_lo < 1 || grid_lo > grid_hi) range_error("grid_lo/grid_hi", "need 1 <= grid_lo <= grid_hi");
  if (roi_n < 1) range_error("roi_n", "must be at least 1");
  if (!(lr > 0.0)) range_error("lr", "must be > 0");
  if (!(weight_decay >= 0.0)) range_error("weight_decay", "must be >= 0");
  if (!(beta1 > 0.0 && beta1 < 1.0)) range_error("beta1", "must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) range_error("beta2", "must lie in (0, 1)");
  if (!(eps > 0.0)) range_error("eps", "must be > 0");
  if (batch_size < 1) range_error("batch_size", "must be at least 1");
  check_model("student", student);
  check_model("vfm", vfm);
  if (student.grid_side() != vfm.grid_side()) {
    range_error("vfm_res", "student and VFM token grids differ (" + std::to_string(student.grid_side()) + " vs " +
                               std::to_string(vfm.grid_side()) + " per side)");
  }
  if (trainable_layers && *trainable_layers > student.depth) {
    range_error("trainable_layers", "exceeds student_depth");
  }
  if (!(sd_sharpness >= 0.0)) range_error("sd_sharpness", "must be >= 0");
  if (sd_layers < 1) range_error("sd_layers", "must be at least 1");
  if (ablation_seeds < 1) range_error("ablation_seeds", "must be at least 1");
  for (const Triple* t : {&clip_std, &vfm_std})
    for (double v : *t)
      if (!(v > 0.0)) range_error("normalization std", "must be positive");
}

bool DistillConfig::operator==(const DistillConfig& o) const { return echo_config(*this) == echo_config(o); }

DistillConfig parse_config_text(const std::string& text, const std::string& origin) {
  DistillConfig cfg;
  std::set<std::string> seen;
  std::stringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Config, where + "expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto& table = keys();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) fail(ErrorKind::Config, where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) fail(ErrorKind::Config, where + "duplicate key '" + key + "'");
    try {
      it->set(cfg, value);
    } catch (const Error& e) {
      const std::string msg = e.what();
      fail(e.kind(), where + msg.substr(msg.find(": ") + 2));
    }
  }
  cfg.validate();
  return cfg;
}

DistillConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

std::string echo_config(const DistillConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace declip
