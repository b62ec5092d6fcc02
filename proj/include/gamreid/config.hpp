#pragma once

// Line-oriented `key = value` run configuration. Every training,
// augmentation, merge, backbone and synthetic-data knob has one key; unknown
// keys are rejected and the resolved form (defaults filled in) is what gets
// echoed into a run directory.

#include <charconv>
#include <cstdio>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gamreid/backbone.hpp"
#include "gamreid/dataio.hpp"
#include "gamreid/trainer.hpp"

namespace gamreid {

enum class Precision { f64, f32 };

struct RunConfig {
  TrainConfig train;
  std::string preset = "tiny";
  std::optional<std::size_t> groups;
  std::optional<std::size_t> embedding_dim;
  Precision precision = Precision::f64;
  std::size_t height = 32, width = 16;
  SynthSpec synth;

  BackboneConfig backbone() const { return make_backbone_config(preset, groups, embedding_dim); }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  require(ec == std::errc() && p == end && std::isfinite(out), ErrorKind::parse,
          "key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  require(ec == std::errc() && p == end, ErrorKind::parse,
          "key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::parse, "key '" + key + "': expected true or false, got '" + v + "'");
}

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Ref>
ConfigKey real_key(std::string name, std::string help, Ref ref) {
  return {name, std::move(help),
          [ref, name](RunConfig& c, const std::string& v) { ref(c) = parse_double(name, v); },
          [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
ConfigKey uint_key(std::string name, std::string help, Ref ref) {
  return {name, std::move(help),
          [ref, name](RunConfig& c, const std::string& v) {
            ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(parse_uint(name, v));
          },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
ConfigKey bool_key(std::string name, std::string help, Ref ref) {
  return {name, std::move(help), [ref, name](RunConfig& c, const std::string& v) { ref(c) = parse_bool(name, v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Ref>
ConfigKey optional_uint_key(std::string name, std::string help, Ref ref) {
  return {name, std::move(help),
          [ref, name](RunConfig& c, const std::string& v) {
            if (v == "default") {
              ref(c).reset();
            } else {
              ref(c) = static_cast<std::size_t>(parse_uint(name, v));
            }
          },
          [ref](const RunConfig& c) {
            const auto& o = ref(const_cast<RunConfig&>(c));
            return o ? std::to_string(*o) : std::string("default");
          }};
}

}  // namespace detail

/// Every accepted key, in the order the resolved config is written.
inline const std::vector<detail::ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto T = [](RunConfig& c) -> TrainConfig& { return c.train; };
    k.push_back(uint_key("seed", "master seed for weights, batch order and augmentation",
                         [T](RunConfig& c) -> std::uint64_t& { return T(c).seed; }));
    k.push_back({"preset", "backbone preset: tiny, resnet50-baseline, resnet50-gam",
                 [](RunConfig& c, const std::string& v) {
                   make_backbone_config(v);
                   c.preset = v;
                 },
                 [](const RunConfig& c) { return c.preset; }});
    k.push_back(optional_uint_key("groups", "filter groups g in every bottleneck (4 filter groups in GAM); 'default' keeps the preset value",
                                  [](RunConfig& c) -> std::optional<std::size_t>& { return c.groups; }));
    k.push_back(optional_uint_key("embedding_dim", "embedding size D (512/1024/2048/4096 axis); 'default' keeps the preset value",
                                  [](RunConfig& c) -> std::optional<std::size_t>& { return c.embedding_dim; }));
    k.push_back({"precision", "scalar type for training: f64 or f32",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "f64") {
                     c.precision = Precision::f64;
                   } else if (v == "f32") {
                     c.precision = Precision::f32;
                   } else {
                     fail(ErrorKind::parse, "key 'precision': expected f64 or f32, got '" + v + "'");
                   }
                 },
                 [](const RunConfig& c) { return std::string(c.precision == Precision::f64 ? "f64" : "f32"); }});
    k.push_back(uint_key("height", "input image height (256x128 resize, scaled to 32x16)",
                         [](RunConfig& c) -> std::size_t& { return c.height; }));
    k.push_back(uint_key("width", "input image width", [](RunConfig& c) -> std::size_t& { return c.width; }));
    k.push_back(uint_key("batch_size", "mini-batch size (batch size of 32)",
                         [T](RunConfig& c) -> std::size_t& { return T(c).batch_size; }));
    k.push_back(real_key("lr_init", "initial learning rate (0.1 from scratch, 0.01 warm-started)",
                         [T](RunConfig& c) -> double& { return T(c).lr_init; }));
    k.push_back(uint_key("lr_drop_epoch", "global epoch at which the rate drops (after 25 epochs)",
                         [T](RunConfig& c) -> std::size_t& { return T(c).lr_drop_epoch; }));
    k.push_back(real_key("lr_drop_factor", "learning-rate divisor at the drop (factor of 10)",
                         [T](RunConfig& c) -> double& { return T(c).lr_drop_factor; }));
    k.push_back(real_key("momentum", "SGD momentum (0.9)", [T](RunConfig& c) -> double& { return T(c).momentum; }));
    k.push_back(real_key("weight_decay", "L2 weight decay", [T](RunConfig& c) -> double& { return T(c).weight_decay; }));
    k.push_back(real_key("tau", "softmax temperature (0.1)", [T](RunConfig& c) -> double& { return T(c).tau; }));
    k.push_back(uint_key("epochs_per_stage", "training epochs between merges",
                         [T](RunConfig& c) -> std::size_t& { return T(c).epochs_per_stage; }));
    k.push_back(uint_key("stages", "maximum number of train/merge stages",
                         [T](RunConfig& c) -> std::size_t& { return T(c).stages; }));
    k.push_back({"idl_reduction", "IDL batch reduction: sum or mean",
                 [T](RunConfig& c, const std::string& v) { T(c).idl_reduction = parse_reduction(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.train.idl_reduction)); }});
    k.push_back({"acl_reduction", "ACL batch reduction: sum or mean",
                 [T](RunConfig& c, const std::string& v) { T(c).acl_reduction = parse_reduction(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.train.acl_reduction)); }});
    k.push_back(real_key("bank_momentum", "instance-bank mixing mu in V <- normalize(mu V + (1-mu) f)",
                         [T](RunConfig& c) -> double& { return T(c).bank_momentum; }));
    k.push_back(bool_key("stage_eval", "evaluate retrieval after every stage",
                         [T](RunConfig& c) -> bool& { return T(c).stage_eval; }));
    k.push_back(bool_key("merge_enabled", "merge clusters after each stage",
                         [T](RunConfig& c) -> bool& { return T(c).merge_enabled; }));
    k.push_back(real_key("merge_fraction", "pair merges per stage as a fraction of n (merging percent 4%)",
                         [T](RunConfig& c) -> double& { return T(c).merge.merge_fraction; }));
    k.push_back({"lambda", "balancing weight in d0 + lambda(|Mi|+|Mj|); 'auto' = 0.1 mean pairwise distance / n",
                 [T](RunConfig& c, const std::string& v) {
                   if (v == "auto") {
                     T(c).lambda_auto = true;
                   } else {
                     T(c).lambda_auto = false;
                     T(c).merge.lambda = parse_double("lambda", v);
                   }
                 },
                 [](const RunConfig& c) {
                   return c.train.lambda_auto ? std::string("auto") : format_double(c.train.merge.lambda);
                 }});
    k.push_back(uint_key("min_clusters", "cluster floor; 0 means ceil(0.1 n)",
                         [T](RunConfig& c) -> std::size_t& { return T(c).merge.min_clusters; }));
    auto A = [](RunConfig& c) -> AugmentationSpec& { return c.train.augmentation; };
    k.push_back(real_key("aug_flip_prob", "horizontal flip probability",
                         [A](RunConfig& c) -> double& { return A(c).flip_prob; }));
    k.push_back(real_key("aug_crop_min", "smallest crop side fraction", [A](RunConfig& c) -> double& { return A(c).crop_min; }));
    k.push_back(real_key("aug_crop_max", "largest crop side fraction", [A](RunConfig& c) -> double& { return A(c).crop_max; }));
    k.push_back(real_key("aug_zoom_min", "smallest zoom factor", [A](RunConfig& c) -> double& { return A(c).zoom_min; }));
    k.push_back(real_key("aug_zoom_max", "largest zoom factor", [A](RunConfig& c) -> double& { return A(c).zoom_max; }));
    k.push_back(real_key("aug_contrast_min", "smallest contrast factor",
                         [A](RunConfig& c) -> double& { return A(c).contrast_min; }));
    k.push_back(real_key("aug_contrast_max", "largest contrast factor",
                         [A](RunConfig& c) -> double& { return A(c).contrast_max; }));
    k.push_back(real_key("aug_occlusion_prob", "occlusion probability",
                         [A](RunConfig& c) -> double& { return A(c).occlusion_prob; }));
    k.push_back(real_key("aug_occlusion_min", "smallest occluder side fraction",
                         [A](RunConfig& c) -> double& { return A(c).occlusion_min; }));
    k.push_back(real_key("aug_occlusion_max", "largest occluder side fraction",
                         [A](RunConfig& c) -> double& { return A(c).occlusion_max; }));
    k.push_back(real_key("aug_gain_min", "smallest per-channel colour gain",
                         [A](RunConfig& c) -> double& { return A(c).gain_min; }));
    k.push_back(real_key("aug_gain_max", "largest per-channel colour gain",
                         [A](RunConfig& c) -> double& { return A(c).gain_max; }));
    k.push_back(uint_key("aug_seed", "extra augmentation seed mixed with the master seed",
                         [A](RunConfig& c) -> std::uint64_t& { return A(c).seed; }));
    auto S = [](RunConfig& c) -> SynthSpec& { return c.synth; };
    k.push_back(uint_key("synth_identities", "synthetic identities per family (train and eval)",
                         [S](RunConfig& c) -> std::size_t& { return S(c).num_identities; }));
    k.push_back(uint_key("synth_views", "synthetic views per identity",
                         [S](RunConfig& c) -> std::size_t& { return S(c).views_per_identity; }));
    k.push_back(uint_key("synth_cameras", "synthetic cameras", [S](RunConfig& c) -> std::size_t& { return S(c).num_cameras; }));
    k.push_back(uint_key("synth_height", "synthetic image height", [S](RunConfig& c) -> std::size_t& { return S(c).height; }));
    k.push_back(uint_key("synth_width", "synthetic image width", [S](RunConfig& c) -> std::size_t& { return S(c).width; }));
    k.push_back(real_key("synth_noise", "per-pixel Gaussian noise level", [S](RunConfig& c) -> double& { return S(c).noise; }));
    k.push_back(uint_key("synth_seed", "synthetic data seed", [S](RunConfig& c) -> std::uint64_t& { return S(c).seed; }));
    k.push_back(bool_key("synth_disjoint_eval", "evaluation identities differ from training identities",
                         [S](RunConfig& c) -> bool& { return S(c).disjoint_eval; }));
    return k;
  }();
  return keys;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  fail(ErrorKind::config, "unknown config key '" + key + "'");
}

/// Parses `key = value` lines over the defaults. '#' starts a comment.
inline RunConfig parse_config(const std::string& text, RunConfig cfg = {}) {
  std::istringstream is(text);
  std::string line;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::parse,
            "config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    require(!key.empty() && !value.empty(), ErrorKind::parse,
            "config line " + std::to_string(lineno) + ": empty key or value");
    require(seen.insert(key).second, ErrorKind::config, "config key '" + key + "' given twice");
    set_config_value(cfg, key, value);
  }
  cfg.train.augmentation.validate();
  cfg.train.merge.validate();
  cfg.backbone();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// Every key with its resolved value, one per line.
inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline std::string config_help() {
  std::string out = "Config keys (key = value, '#' comments):\n";
  const RunConfig defaults;
  for (const auto& k : config_keys()) out += "  " + k.name + " [" + k.get(defaults) + "]  " + k.help + "\n";
  return out;
}

}  // namespace gamreid
