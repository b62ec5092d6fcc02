#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gamreid/layers.hpp"
#include "gamreid/ops.hpp"

namespace gamreid {

/// Channel gate A_c = sigmoid(S(avgpool(F))).
///
/// The affine map S has no reduction bottleneck. With `groups` > 1 the pooled
/// channel vector is split into `groups` contiguous blocks, the blocks being
/// the filter groups of the grouped convolution that produced F, and one
/// (C/g x C/g) map is shared by every block. For groups == 1 this is a plain
/// C x C layer.
template <std::floating_point T>
struct ChannelAttention {
  std::size_t channels = 0;
  std::size_t groups = 1;
  Linear<T> fc;

  ChannelAttention() = default;
  ChannelAttention(std::size_t c, std::size_t g, Rng& rng) : channels(c), groups(g) {
    require(g > 0 && c % g == 0, ErrorKind::config,
            "ChannelAttention: " + std::to_string(c) + " channels not divisible by " + std::to_string(g) + " groups");
    fc = Linear<T>(c / g, c / g, rng);
  }

  static std::size_t count(std::size_t c, std::size_t g) { return Linear<T>::count(c / g, c / g); }

  BasicTensor<T> forward(const BasicTensor<T>& features) const {
    require(features.dim() == 4 && features.extent(1) == channels, ErrorKind::shape,
            "channel attention expects " + std::to_string(channels) + " channels, got " +
                shape_str(features.shape()));
    const std::size_t n = features.extent(0);
    auto pooled = global_avg_pool(features);
    if (groups > 1) pooled = reshape(pooled, {n * groups, channels / groups});
    auto gate = sigmoid(fc.forward(pooled));
    if (groups > 1) gate = reshape(gate, {n, channels});
    return gate;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    fc.visit(prefix + ".fc", f);
  }
};

/// Spatial gate A_s = sigmoid(conv7x7(channel_avgpool(F'))), padding 3.
template <std::floating_point T>
struct SpatialAttention {
  static constexpr std::size_t kKernel = 7;
  Conv2d<T> conv;

  SpatialAttention() = default;
  explicit SpatialAttention(Rng& rng) : conv(1, 1, kKernel, Conv2dOptions{1, 1, kKernel / 2}, true, rng) {}

  static std::size_t count() { return kKernel * kKernel + 1; }

  BasicTensor<T> forward(const BasicTensor<T>& refined) const {
    require(refined.dim() == 4, ErrorKind::shape, "spatial attention expects [N,C,H,W]");
    return sigmoid(conv.forward(channel_avg_pool(refined)));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    conv.visit(prefix + ".conv", f);
  }
};

template <std::floating_point T>
struct AttentionOutput {
  BasicTensor<T> output;   // A_s * (A_c * F)
  BasicTensor<T> channel;  // A_c [N,C]
  BasicTensor<T> spatial;  // A_s [N,1,H,W]
};

/// Sequential channel-then-spatial gating of grouped-convolution features.
template <std::floating_point T>
struct GroupedAttentionModule {
  ChannelAttention<T> channel;
  SpatialAttention<T> spatial;

  GroupedAttentionModule() = default;
  GroupedAttentionModule(std::size_t channels, std::size_t groups, Rng& rng)
      : channel(channels, groups, rng), spatial(rng) {}

  static std::size_t count(std::size_t channels, std::size_t groups) {
    return ChannelAttention<T>::count(channels, groups) + SpatialAttention<T>::count();
  }

  AttentionOutput<T> forward_with_maps(const BasicTensor<T>& features) const {
    auto a_c = channel.forward(features);
    auto refined = mul(reshape(a_c, {features.extent(0), features.extent(1), 1, 1}), features);
    auto a_s = spatial.forward(refined);
    return {mul(a_s, refined), a_c, a_s};
  }

  BasicTensor<T> forward(const BasicTensor<T>& features) const { return forward_with_maps(features).output; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    channel.visit(prefix + ".channel", f);
    spatial.visit(prefix + ".spatial", f);
  }
};

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

/// Min-max normalizes map `index` of A_s [N,1,H,W] to 0..255 with floor
/// rounding. A constant map becomes all zeros.
template <std::floating_point T>
GrayImage attention_map_image(const BasicTensor<T>& maps, std::size_t index) {
  require(maps.dim() == 4 && maps.extent(1) == 1, ErrorKind::shape,
          "attention map must be [N,1,H,W], got " + shape_str(maps.shape()));
  require(index < maps.extent(0), ErrorKind::usage,
          "attention map index " + std::to_string(index) + " out of range");
  GrayImage img{maps.extent(3), maps.extent(2), {}};
  const std::size_t hw = img.width * img.height;
  const auto values = maps.data().subspan(index * hw, hw);
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = static_cast<double>(*lo_it), hi = static_cast<double>(*hi_it);
  img.pixels.resize(hw, 0);
  if (hi > lo) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = std::floor((static_cast<double>(values[i]) - lo) / (hi - lo) * 255.0);
      img.pixels[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  require(!img.pixels.empty(), ErrorKind::usage, "refusing to write an empty attention map");
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::io, "cannot open " + path.string());
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  require(static_cast<bool>(os), ErrorKind::io, "write failed: " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open " + path.string());
  std::string magic;
  GrayImage img;
  int maxval = 0;
  is >> magic >> img.width >> img.height >> maxval;
  require(magic == "P5" && maxval == 255 && img.width > 0 && img.height > 0, ErrorKind::format,
          "not an 8-bit binary PGM: " + path.string());
  is.get();
  img.pixels.resize(img.width * img.height);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  require(static_cast<std::size_t>(is.gcount()) == img.pixels.size(), ErrorKind::format,
          "truncated PGM: " + path.string());
  return img;
}

template <std::floating_point T>
void export_attention_map(const BasicTensor<T>& maps, std::size_t index, const std::filesystem::path& path) {
  write_pgm(path, attention_map_image(maps, index));
}

}  // namespace gamreid
