#pragma once

// Planar [C, H, W] image helpers shared by augmentation and data loading.

#include <algorithm>
#include <cmath>
#include <vector>

#include "gamreid/tensor.hpp"

namespace gamreid {

struct Window {
  double y0, x0, height, width;
};

/// Bilinear resampling of the window (in source pixel units) onto an
/// out_h x out_w grid, using pixel-center alignment and edge clamping.
template <std::floating_point T>
std::vector<T> resample_window(const T* src, std::size_t C, std::size_t H, std::size_t W, const Window& win,
                               std::size_t out_h, std::size_t out_w) {
  std::vector<T> out(C * out_h * out_w);
  const double sy = win.height / static_cast<double>(out_h), sx = win.width / static_cast<double>(out_w);
  std::vector<std::size_t> x_lo(out_w), x_hi(out_w);
  std::vector<double> x_t(out_w);
  for (std::size_t x = 0; x < out_w; ++x) {
    double fx = win.x0 + (static_cast<double>(x) + 0.5) * sx - 0.5;
    fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
    x_lo[x] = static_cast<std::size_t>(fx);
    x_hi[x] = std::min(x_lo[x] + 1, W - 1);
    x_t[x] = fx - static_cast<double>(x_lo[x]);
  }
  for (std::size_t y = 0; y < out_h; ++y) {
    double fy = win.y0 + (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
    const auto y_lo = static_cast<std::size_t>(fy);
    const auto y_hi = std::min(y_lo + 1, H - 1);
    const double ty = fy - static_cast<double>(y_lo);
    for (std::size_t c = 0; c < C; ++c) {
      const T* plane = src + c * H * W;
      T* row = out.data() + (c * out_h + y) * out_w;
      for (std::size_t x = 0; x < out_w; ++x) {
        const double top = plane[y_lo * W + x_lo[x]] * (1 - x_t[x]) + plane[y_lo * W + x_hi[x]] * x_t[x];
        const double bottom = plane[y_hi * W + x_lo[x]] * (1 - x_t[x]) + plane[y_hi * W + x_hi[x]] * x_t[x];
        row[x] = static_cast<T>(top * (1 - ty) + bottom * ty);
      }
    }
  }
  return out;
}

/// Resizes a [C, H, W] tensor to [C, out_h, out_w].
template <std::floating_point T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& img, std::size_t out_h, std::size_t out_w) {
  require(img.dim() == 3, ErrorKind::shape, "resize_bilinear expects [C,H,W], got " + shape_str(img.shape()));
  require(out_h > 0 && out_w > 0, ErrorKind::usage, "resize_bilinear: empty target size");
  const std::size_t C = img.extent(0), H = img.extent(1), W = img.extent(2);
  if (H == out_h && W == out_w) return img.clone();
  const Window full{0, 0, static_cast<double>(H), static_cast<double>(W)};
  return BasicTensor<T>({C, out_h, out_w}, resample_window(img.data().data(), C, H, W, full, out_h, out_w));
}

/// Per-channel mean of a [C, H, W] tensor.
template <std::floating_point T>
std::vector<double> channel_means(const BasicTensor<T>& img) {
  const std::size_t C = img.extent(0), HW = img.extent(1) * img.extent(2);
  std::vector<double> m(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < HW; ++p) m[c] += img[c * HW + p];
    m[c] /= static_cast<double>(HW);
  }
  return m;
}

/// Stacks equally shaped [C, H, W] images into a [N, C, H, W] batch.
template <std::floating_point T>
BasicTensor<T> stack_images(const std::vector<BasicTensor<T>>& images) {
  require(!images.empty(), ErrorKind::usage, "stack_images: empty batch");
  const Shape s = images.front().shape();
  std::vector<T> data;
  data.reserve(images.size() * numel_of(s));
  for (const auto& im : images) {
    require(im.shape() == s, ErrorKind::shape,
            "stack_images: mixed shapes " + shape_str(s) + " and " + shape_str(im.shape()));
    data.insert(data.end(), im.data().begin(), im.data().end());
  }
  Shape out{images.size()};
  out.insert(out.end(), s.begin(), s.end());
  return BasicTensor<T>(std::move(out), std::move(data));
}

}  // namespace gamreid
