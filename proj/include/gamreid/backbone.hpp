#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gamreid/attention.hpp"
#include "gamreid/layers.hpp"
#include "gamreid/ops.hpp"

namespace gamreid {

struct StemConfig {
  std::size_t in_channels = 3;
  std::size_t out_channels = 64;
  std::size_t kernel = 7;
  std::size_t stride = 2;
  std::size_t padding = 3;
  std::size_t pool_kernel = 3;  // 0 disables the pool
  std::size_t pool_stride = 2;
  std::size_t pool_padding = 1;
};

struct BottleneckConfig {
  std::size_t in_channels = 0;
  std::size_t mid_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  std::size_t groups = 1;
  bool has_projection = false;
  bool attention = false;
  bool batchnorm = true;

  void validate() const {
    require(in_channels > 0 && mid_channels > 0 && out_channels > 0 && stride > 0 && groups > 0,
            ErrorKind::config, "bottleneck extents must be positive");
    require(in_channels % groups == 0 && mid_channels % groups == 0 && out_channels % groups == 0,
            ErrorKind::config,
            "bottleneck channels " + std::to_string(in_channels) + "/" + std::to_string(mid_channels) + "/" +
                std::to_string(out_channels) + " not divisible by " + std::to_string(groups) + " groups");
    require(has_projection || (stride == 1 && in_channels == out_channels), ErrorKind::config,
            "bottleneck changing stride or width needs a projection shortcut");
  }
};

struct BackboneConfig {
  std::string name;
  StemConfig stem;
  std::vector<std::vector<BottleneckConfig>> stages;
  std::size_t embedding_dim = 2048;
  std::size_t groups = 1;
  bool attention = false;
  bool batchnorm = true;

  std::size_t feature_channels() const { return stages.back().back().out_channels; }

  std::size_t total_stride() const {
    std::size_t s = stem.stride * (stem.pool_kernel ? stem.pool_stride : 1);
    for (const auto& stage : stages)
      for (const auto& b : stage) s *= b.stride;
    return s;
  }

  void validate() const {
    require(!stages.empty(), ErrorKind::config, "backbone needs at least one stage");
    require(embedding_dim > 0, ErrorKind::config, "embedding_dim must be positive");
    std::size_t channels = stem.out_channels;
    for (const auto& stage : stages) {
      require(!stage.empty(), ErrorKind::config, "empty stage");
      for (const auto& b : stage) {
        b.validate();
        require(b.in_channels == channels, ErrorKind::config,
                "block input " + std::to_string(b.in_channels) + " does not chain from " + std::to_string(channels));
        channels = b.out_channels;
      }
    }
  }
};

inline const std::vector<std::string>& backbone_preset_names() {
  static const std::vector<std::string> names{"resnet50-baseline", "resnet50-gam", "tiny"};
  return names;
}

namespace detail {

struct StageSpec {
  std::size_t mid, blocks, out, stride;
};

inline std::vector<std::vector<BottleneckConfig>> build_stages(std::size_t in, const std::vector<StageSpec>& specs,
                                                               std::size_t groups, bool attention, bool batchnorm) {
  std::vector<std::vector<BottleneckConfig>> stages;
  for (const auto& s : specs) {
    std::vector<BottleneckConfig> blocks;
    for (std::size_t b = 0; b < s.blocks; ++b) {
      BottleneckConfig c;
      c.in_channels = in;
      c.mid_channels = s.mid;
      c.out_channels = s.out;
      c.stride = b == 0 ? s.stride : 1;
      c.groups = groups;
      c.has_projection = c.stride != 1 || in != s.out;
      c.attention = attention;
      c.batchnorm = batchnorm;
      blocks.push_back(c);
      in = s.out;
    }
    stages.push_back(std::move(blocks));
  }
  return stages;
}

}  // namespace detail

/// Named reference configurations. `groups` and `embedding_dim` override the
/// preset defaults (resnet50-gam: g=4; all ResNet-50 presets: D=512).
inline BackboneConfig make_backbone_config(const std::string& preset, std::optional<std::size_t> groups = {},
                                           std::optional<std::size_t> embedding_dim = {},
                                           std::optional<bool> batchnorm = {}) {
  BackboneConfig cfg;
  cfg.name = preset;
  cfg.batchnorm = batchnorm.value_or(true);
  std::vector<detail::StageSpec> specs;
  if (preset == "resnet50-baseline" || preset == "resnet50-gam") {
    cfg.stem = StemConfig{};
    specs = {{64, 3, 256, 1}, {128, 4, 512, 2}, {256, 6, 1024, 2}, {512, 3, 2048, 2}};
    cfg.attention = preset == "resnet50-gam";
    cfg.groups = groups.value_or(cfg.attention ? 4 : 1);
    cfg.embedding_dim = embedding_dim.value_or(512);
  } else if (preset == "tiny") {
    cfg.stem = StemConfig{3, 16, 3, 1, 1, 2, 2, 0};
    specs = {{16, 1, 32, 1}, {32, 1, 64, 2}};
    cfg.attention = true;
    cfg.groups = groups.value_or(4);
    cfg.embedding_dim = embedding_dim.value_or(64);
  } else {
    fail(ErrorKind::config, "unknown backbone preset '" + preset + "'");
  }
  cfg.stages = detail::build_stages(cfg.stem.out_channels, specs, cfg.groups, cfg.attention, cfg.batchnorm);
  cfg.validate();
  return cfg;
}

struct ParameterBreakdown {
  std::size_t conv = 0;
  std::size_t bn = 0;
  std::size_t linear = 0;
  std::size_t attention = 0;
  std::size_t total = 0;
};

/// Analytic parameter count; no weights are allocated. A grouped conv holds
/// C_out * (C_in/g) * k^2 weights.
inline ParameterBreakdown count_parameters(const BackboneConfig& cfg) {
  cfg.validate();
  using Counter = Conv2d<double>;
  ParameterBreakdown p;
  const bool bn = cfg.batchnorm;
  p.conv += Counter::count(cfg.stem.in_channels, cfg.stem.out_channels, cfg.stem.kernel, 1, !bn);
  if (bn) p.bn += BatchNorm2d<double>::count(cfg.stem.out_channels);
  for (const auto& stage : cfg.stages)
    for (const auto& b : stage) {
      p.conv += Counter::count(b.in_channels, b.mid_channels, 1, b.groups, !bn);
      p.conv += Counter::count(b.mid_channels, b.mid_channels, 3, b.groups, !bn);
      p.conv += Counter::count(b.mid_channels, b.out_channels, 1, b.groups, !bn);
      if (bn) p.bn += 4 * b.mid_channels + 2 * b.out_channels;
      if (b.has_projection) {
        p.conv += Counter::count(b.in_channels, b.out_channels, 1, 1, !bn);
        if (bn) p.bn += 2 * b.out_channels;
      }
      if (b.attention) p.attention += GroupedAttentionModule<double>::count(b.out_channels, b.groups);
    }
  p.linear = Linear<double>::count(cfg.feature_channels(), cfg.embedding_dim);
  p.total = p.conv + p.bn + p.linear + p.attention;
  return p;
}

/// Relu(GAM(F(x)) + skip(x)) with F = 1x1 -> 3x3 -> 1x1 grouped convolutions,
/// each followed by batchnorm, the first two by ReLU. The projection shortcut
/// is an ungrouped 1x1 conv + batchnorm.
template <std::floating_point T>
struct Bottleneck {
  BottleneckConfig config;
  Conv2d<T> conv1, conv2, conv3, projection;
  BatchNorm2d<T> bn1, bn2, bn3, projection_bn;
  std::optional<GroupedAttentionModule<T>> attention;

  Bottleneck() = default;
  Bottleneck(const BottleneckConfig& c, Rng& rng) : config(c) {
    c.validate();
    const bool bias = !c.batchnorm;
    conv1 = Conv2d<T>(c.in_channels, c.mid_channels, 1, {c.groups, 1, 0}, bias, rng);
    conv2 = Conv2d<T>(c.mid_channels, c.mid_channels, 3, {c.groups, c.stride, 1}, bias, rng);
    conv3 = Conv2d<T>(c.mid_channels, c.out_channels, 1, {c.groups, 1, 0}, bias, rng);
    if (c.batchnorm) {
      bn1 = BatchNorm2d<T>(c.mid_channels);
      bn2 = BatchNorm2d<T>(c.mid_channels);
      bn3 = BatchNorm2d<T>(c.out_channels);
    }
    if (c.has_projection) {
      projection = Conv2d<T>(c.in_channels, c.out_channels, 1, {1, c.stride, 0}, bias, rng);
      if (c.batchnorm) projection_bn = BatchNorm2d<T>(c.out_channels);
    }
    if (c.attention) attention.emplace(c.out_channels, c.groups, rng);
  }

  /// Output of F(x) before attention.
  BasicTensor<T> inner(const BasicTensor<T>& x, Mode mode) {
    auto h = conv1.forward(x);
    if (config.batchnorm) h = bn1.forward(h, mode);
    h = relu(h);
    h = conv2.forward(h);
    if (config.batchnorm) h = bn2.forward(h, mode);
    h = relu(h);
    h = conv3.forward(h);
    if (config.batchnorm) h = bn3.forward(h, mode);
    return h;
  }

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, BasicTensor<T>* spatial_map = nullptr) {
    require(x.dim() == 4 && x.extent(1) == config.in_channels, ErrorKind::shape,
            "bottleneck expects " + std::to_string(config.in_channels) + " input channels, got " +
                shape_str(x.shape()));
    auto h = inner(x, mode);
    if (attention) {
      auto out = attention->forward_with_maps(h);
      h = out.output;
      if (spatial_map) *spatial_map = out.spatial;
    }
    BasicTensor<T> skip = x;
    if (config.has_projection) {
      skip = projection.forward(x);
      if (config.batchnorm) skip = projection_bn.forward(skip, mode);
    }
    return relu(add(h, skip));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    conv1.visit(prefix + ".conv1", f);
    if (config.batchnorm) bn1.visit(prefix + ".bn1", f);
    conv2.visit(prefix + ".conv2", f);
    if (config.batchnorm) bn2.visit(prefix + ".bn2", f);
    conv3.visit(prefix + ".conv3", f);
    if (config.batchnorm) bn3.visit(prefix + ".bn3", f);
    if (config.has_projection) {
      projection.visit(prefix + ".projection", f);
      if (config.batchnorm) projection_bn.visit(prefix + ".projection_bn", f);
    }
    if (attention) attention->visit(prefix + ".gam", f);
  }
};

/// Spatial attention maps captured during a forward pass, one per bottleneck
/// in network order (undefined for blocks without attention).
template <std::floating_point T>
struct ForwardTrace {
  std::vector<BasicTensor<T>> spatial_maps;
};

/// Residual trunk plus embedding head: avgpool -> affine(D) -> L2 normalize.
template <std::floating_point T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneConfig cfg, std::uint64_t seed) : config_(std::move(cfg)) {
    config_.validate();
    Rng rng(seed);
    const auto& s = config_.stem;
    stem_conv_ = Conv2d<T>(s.in_channels, s.out_channels, s.kernel, {1, s.stride, s.padding}, !config_.batchnorm, rng);
    if (config_.batchnorm) stem_bn_ = BatchNorm2d<T>(s.out_channels);
    for (const auto& stage : config_.stages) {
      std::vector<Bottleneck<T>> blocks;
      for (const auto& b : stage) blocks.emplace_back(b, rng);
      stages_.push_back(std::move(blocks));
    }
    head_ = Linear<T>(config_.feature_channels(), config_.embedding_dim, rng);
  }

  const BackboneConfig& config() const { return config_; }
  std::vector<std::vector<Bottleneck<T>>>& stages() { return stages_; }

  std::size_t num_blocks() const {
    std::size_t n = 0;
    for (const auto& s : stages_) n += s.size();
    return n;
  }

  /// Trunk output before the head, [N, C_last, H', W'].
  BasicTensor<T> features(const BasicTensor<T>& images, Mode mode, ForwardTrace<T>* trace = nullptr) {
    require(images.dim() == 4 && images.extent(1) == config_.stem.in_channels, ErrorKind::shape,
            "backbone expects [N," + std::to_string(config_.stem.in_channels) + ",H,W], got " +
                shape_str(images.shape()));
    const std::size_t stride = config_.total_stride();
    require(images.extent(2) % stride == 0 && images.extent(3) % stride == 0, ErrorKind::shape,
            "input " + std::to_string(images.extent(2)) + "x" + std::to_string(images.extent(3)) +
                " not divisible by network stride " + std::to_string(stride));
    auto h = stem_conv_.forward(images);
    if (config_.batchnorm) h = stem_bn_.forward(h, mode);
    h = relu(h);
    if (config_.stem.pool_kernel) h = max_pool2d(h, config_.stem.pool_kernel, config_.stem.pool_stride, config_.stem.pool_padding);
    if (trace) trace->spatial_maps.clear();
    for (auto& stage : stages_)
      for (auto& block : stage) {
        BasicTensor<T> map;
        h = block.forward(h, mode, trace ? &map : nullptr);
        if (trace) trace->spatial_maps.push_back(map);
      }
    return h;
  }

  /// Unit-norm embeddings [N, D].
  BasicTensor<T> embed(const BasicTensor<T>& images, Mode mode, ForwardTrace<T>* trace = nullptr) {
    return l2_normalize_rows(head_.forward(global_avg_pool(features(images, mode, trace))));
  }

  /// Visits every parameter and buffer in a fixed order with dotted names.
  template <class F>
  void visit(F&& f) {
    stem_conv_.visit("stem.conv", f);
    if (config_.batchnorm) stem_bn_.visit("stem.bn", f);
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].visit("stages." + std::to_string(s) + "." + std::to_string(b), f);
    head_.visit("head", f);
  }

  std::vector<std::pair<std::string, BasicTensor<T>>> parameters() {
    std::vector<std::pair<std::string, BasicTensor<T>>> out;
    visit([&](const std::string& name, BasicTensor<T>& t, Slot slot) {
      if (slot == Slot::parameter) out.emplace_back(name, t);
    });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, BasicTensor<T>& t, Slot slot) {
      if (slot == Slot::parameter) n += t.numel();
    });
    return n;
  }

 private:
  BackboneConfig config_;
  Conv2d<T> stem_conv_;
  BatchNorm2d<T> stem_bn_;
  std::vector<std::vector<Bottleneck<T>>> stages_;
  Linear<T> head_;
};

}  // namespace gamreid
