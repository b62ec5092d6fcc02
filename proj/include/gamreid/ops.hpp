#pragma once

// Differentiable operations used by the attention modules, the backbone and
// the losses. Every op validates its shapes, computes the forward values and,
// when recording, attaches a closure that accumulates input gradients.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "gamreid/error.hpp"
#include "gamreid/tensor.hpp"

namespace gamreid {

struct Conv2dOptions {
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  require(s.size() == rank, ErrorKind::shape,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

struct ConvGeometry {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t groups, stride, pad;
  std::size_t cin_g, cout_g, ho, wo;

  std::size_t kdim() const { return cin_g * kh * kw; }
  std::size_t positions() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Conv2dOptions& opt) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  require(opt.groups > 0, ErrorKind::config, "conv2d: groups must be positive");
  require(opt.stride > 0, ErrorKind::config, "conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = x[0]; g.cin = x[1]; g.h = x[2]; g.w = x[3];
  g.cout = w[0]; g.kh = w[2]; g.kw = w[3];
  g.groups = opt.groups; g.stride = opt.stride; g.pad = opt.padding;
  require(g.cin % g.groups == 0 && g.cout % g.groups == 0, ErrorKind::config,
          "conv2d: channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) +
              " not divisible by groups " + std::to_string(g.groups));
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  require(w[1] == g.cin_g, ErrorKind::shape,
          "conv2d: weight " + shape_str(w) + " incompatible with input " + shape_str(x) +
              " and groups " + std::to_string(g.groups));
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw, ErrorKind::shape,
          "conv2d: kernel larger than padded input");
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  return g;
}

// col[(c*kh + i)*kw + j][p] for one (sample, group) slice.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::vector<T>& col) {
  const std::size_t P = g.positions();
  col.assign(g.kdim() * P, T(0));
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col.data() + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          const T* xrow = xc + static_cast<std::size_t>(ih) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
            row[oh * g.wo + ow] = xrow[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const std::vector<T>& col, const ConvGeometry& g, T* dx) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    T* dxc = dx + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col.data() + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          T* dxrow = dxc + static_cast<std::size_t>(ih) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
            dxrow[iw] += row[oh * g.wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Grouped 2-D convolution. Output channel block j reads only input channel
/// block j. `bias` may be undefined.
template <std::floating_point T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Conv2dOptions opt = {}) {
  const auto g = detail::conv_geometry(x.shape(), weight.shape(), opt);
  if (bias.defined()) {
    require(bias.dim() == 1 && bias.extent(0) == g.cout, ErrorKind::shape,
            "conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(g.cout) + " outputs");
  }
  const std::size_t P = g.positions(), K = g.kdim();
  std::vector<T> out(g.n * g.cout * P, T(0));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  std::vector<T> col;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t gi = 0; gi < g.groups; ++gi) {
      const T* xg = xd + (n * g.cin + gi * g.cin_g) * g.h * g.w;
      const T* cd = xg;
      if (!g.pointwise()) {
        detail::im2col(xg, g, col);
        cd = col.data();
      }
      for (std::size_t oc = 0; oc < g.cout_g; ++oc) {
        const std::size_t co = gi * g.cout_g + oc;
        T* orow = out.data() + (n * g.cout + co) * P;
        if (bias.defined()) std::fill(orow, orow + P, bias[co]);
        const T* wrow = wd + co * K;
        for (std::size_t r = 0; r < K; ++r) {
          const T wv = wrow[r];
          const T* crow = cd + r * P;
          for (std::size_t p = 0; p < P; ++p) orow[p] += wv * crow[p];
        }
      }
    }
  }
  auto xn = x.node_ptr(), wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return make_result<T>(
      {g.n, g.cout, g.ho, g.wo}, std::move(out), {x, weight, bias},
      [xn, wn, bn, g](detail::Node<T>& self) {
        const std::size_t P = g.positions(), K = g.kdim();
        auto* dx = grad_sink(xn);
        auto* dw = grad_sink(wn);
        auto* db = bn ? grad_sink(bn) : nullptr;
        const T* dy = self.grad.data();
        if (db) {
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t co = 0; co < g.cout; ++co) {
              const T* r = dy + (n * g.cout + co) * P;
              T s = 0;
              for (std::size_t p = 0; p < P; ++p) s += r[p];
              (*db)[co] += s;
            }
        }
        if (!dx && !dw) return;
        std::vector<T> col, dcol;
        for (std::size_t n = 0; n < g.n; ++n) {
          for (std::size_t gi = 0; gi < g.groups; ++gi) {
            const std::size_t xoff = (n * g.cin + gi * g.cin_g) * g.h * g.w;
            const T* cd = xn->data.data() + xoff;
            if (dw) {
              if (!g.pointwise()) {
                detail::im2col(xn->data.data() + xoff, g, col);
                cd = col.data();
              }
              for (std::size_t oc = 0; oc < g.cout_g; ++oc) {
                const std::size_t co = gi * g.cout_g + oc;
                const T* dyr = dy + (n * g.cout + co) * P;
                T* dwr = dw->data() + co * K;
                for (std::size_t r = 0; r < K; ++r) {
                  const T* crow = cd + r * P;
                  T s = 0;
                  for (std::size_t p = 0; p < P; ++p) s += dyr[p] * crow[p];
                  dwr[r] += s;
                }
              }
            }
            if (dx) {
              T* dcd;
              if (g.pointwise()) {
                dcd = dx->data() + xoff;
              } else {
                dcol.assign(K * P, T(0));
                dcd = dcol.data();
              }
              for (std::size_t oc = 0; oc < g.cout_g; ++oc) {
                const std::size_t co = gi * g.cout_g + oc;
                const T* dyr = dy + (n * g.cout + co) * P;
                const T* wrow = wn->data.data() + co * K;
                for (std::size_t r = 0; r < K; ++r) {
                  const T wv = wrow[r];
                  T* drow = dcd + r * P;
                  for (std::size_t p = 0; p < P; ++p) drow[p] += wv * dyr[p];
                }
              }
              if (!g.pointwise()) detail::col2im_add(dcol, g, dx->data() + xoff);
            }
          }
        }
      });
}

/// Max pooling with square window; padded positions never win.
template <std::floating_point T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride,
                          std::size_t padding = 0) {
  detail::require_rank(x.shape(), 4, "max_pool2d");
  require(kernel > 0 && stride > 0 && padding < kernel, ErrorKind::config, "max_pool2d: invalid window");
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  require(H + 2 * padding >= kernel && W + 2 * padding >= kernel, ErrorKind::shape,
          "max_pool2d: window larger than input");
  const std::size_t Ho = (H + 2 * padding - kernel) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kernel) / stride + 1;
  std::vector<T> out(N * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  const T* xd = x.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = xd + nc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < kernel; ++i) {
          const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(padding);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t j = 0; j < kernel; ++j) {
            const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(padding);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const std::size_t idx = static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (nc * Ho + oh) * Wo + ow;
        out[o] = best;
        arg[o] = nc * H * W + best_idx;
      }
  }
  auto xn = x.node_ptr();
  return make_result<T>({N, C, Ho, Wo}, std::move(out), {x},
                        [xn, arg = std::move(arg)](detail::Node<T>& self) {
                          auto* dx = grad_sink(xn);
                          if (!dx) return;
                          for (std::size_t o = 0; o < arg.size(); ++o) (*dx)[arg[o]] += self.grad[o];
                        });
}

/// [N,C,H,W] -> [N,C], mean over spatial positions.
template <std::floating_point T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
  std::vector<T> out(N * C);
  const T* xd = x.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T s = 0;
    for (std::size_t p = 0; p < HW; ++p) s += xd[nc * HW + p];
    out[nc] = s / static_cast<T>(HW);
  }
  auto xn = x.node_ptr();
  return make_result<T>({N, C}, std::move(out), {x}, [xn, HW](detail::Node<T>& self) {
    auto* dx = grad_sink(xn);
    if (!dx) return;
    const T inv = T(1) / static_cast<T>(HW);
    for (std::size_t nc = 0; nc < self.grad.size(); ++nc) {
      const T g = self.grad[nc] * inv;
      for (std::size_t p = 0; p < HW; ++p) (*dx)[nc * HW + p] += g;
    }
  });
}

/// [N,C,H,W] -> [N,1,H,W], mean over channels at each position.
template <std::floating_point T>
BasicTensor<T> channel_avg_pool(const BasicTensor<T>& x) {
  detail::require_rank(x.shape(), 4, "channel_avg_pool");
  const std::size_t N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
  std::vector<T> out(N * HW, T(0));
  const T* xd = x.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    T* o = out.data() + n * HW;
    for (std::size_t c = 0; c < C; ++c) {
      const T* xc = xd + (n * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) o[p] += xc[p];
    }
    for (std::size_t p = 0; p < HW; ++p) o[p] /= static_cast<T>(C);
  }
  auto xn = x.node_ptr();
  return make_result<T>({N, 1, x.extent(2), x.extent(3)}, std::move(out), {x},
                        [xn, N, C, HW](detail::Node<T>& self) {
                          auto* dx = grad_sink(xn);
                          if (!dx) return;
                          const T inv = T(1) / static_cast<T>(C);
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t c = 0; c < C; ++c)
                              for (std::size_t p = 0; p < HW; ++p)
                                (*dx)[(n * C + c) * HW + p] += self.grad[n * HW + p] * inv;
                        });
}

/// y = x W^T + b for x [N,Din], W [Dout,Din], b [Dout] (b may be undefined).
template <std::floating_point T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  detail::require_rank(x.shape(), 2, "linear input");
  detail::require_rank(weight.shape(), 2, "linear weight");
  const std::size_t N = x.extent(0), Din = x.extent(1), Dout = weight.extent(0);
  require(weight.extent(1) == Din, ErrorKind::shape,
          "linear: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  if (bias.defined())
    require(bias.dim() == 1 && bias.extent(0) == Dout, ErrorKind::shape, "linear: bias extent mismatch");
  std::vector<T> out(N * Dout);
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Dout; ++o) {
      T s = bias.defined() ? bias[o] : T(0);
      for (std::size_t i = 0; i < Din; ++i) s += wd[o * Din + i] * xd[n * Din + i];
      out[n * Dout + o] = s;
    }
  auto xn = x.node_ptr(), wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return make_result<T>({N, Dout}, std::move(out), {x, weight, bias},
                        [xn, wn, bn, N, Din, Dout](detail::Node<T>& self) {
                          auto* dx = grad_sink(xn);
                          auto* dw = grad_sink(wn);
                          auto* db = bn ? grad_sink(bn) : nullptr;
                          const T* dy = self.grad.data();
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t o = 0; o < Dout; ++o) {
                              const T g = dy[n * Dout + o];
                              if (db) (*db)[o] += g;
                              if (dw)
                                for (std::size_t i = 0; i < Din; ++i) (*dw)[o * Din + i] += g * xn->data[n * Din + i];
                              if (dx)
                                for (std::size_t i = 0; i < Din; ++i) (*dx)[n * Din + i] += g * wn->data[o * Din + i];
                            }
                        });
}

template <std::floating_point T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    // Branch keeps exp() from overflowing for large |v|.
    out[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn](detail::Node<T>& self) {
    auto* dx = grad_sink(xn);
    if (!dx) return;
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const T s = self.data[i];
      (*dx)[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

/// max(0, x); the subgradient at 0 is 0.
template <std::floating_point T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn](detail::Node<T>& self) {
    auto* dx = grad_sink(xn);
    if (!dx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xn->data[i] > T(0)) (*dx)[i] += self.grad[i];
  });
}

/// Elementwise product. `gate` is either the same shape as `x`, or
/// [N,C,1,1] / [N,1,H,W] against x [N,C,H,W]. Nothing else broadcasts.
template <std::floating_point T>
BasicTensor<T> mul(const BasicTensor<T>& gate, const BasicTensor<T>& x) {
  const Shape& gs = gate.shape();
  const Shape& xs = x.shape();
  enum class Mode { same, channel, spatial } mode;
  if (gs == xs) {
    mode = Mode::same;
  } else if (gs.size() == 4 && xs.size() == 4 && gs[0] == xs[0] && gs[1] == xs[1] && gs[2] == 1 && gs[3] == 1) {
    mode = Mode::channel;
  } else if (gs.size() == 4 && xs.size() == 4 && gs[0] == xs[0] && gs[1] == 1 && gs[2] == xs[2] && gs[3] == xs[3]) {
    mode = Mode::spatial;
  } else {
    fail(ErrorKind::shape, "mul: unsupported broadcast " + shape_str(gs) + " x " + shape_str(xs));
  }
  const std::size_t total = x.numel();
  std::size_t C = 1, HW = 1;
  if (mode != Mode::same) {
    C = xs[1];
    HW = xs[2] * xs[3];
  }
  auto gate_index = [mode, C, HW](std::size_t i) -> std::size_t {
    switch (mode) {
      case Mode::same: return i;
      case Mode::channel: return i / HW;
      case Mode::spatial: return (i / (C * HW)) * HW + i % HW;
    }
    return i;
  };
  std::vector<T> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = gate[gate_index(i)] * x[i];
  auto gn = gate.node_ptr(), xn = x.node_ptr();
  return make_result<T>(xs, std::move(out), {gate, x}, [gn, xn, gate_index](detail::Node<T>& self) {
    auto* dg = grad_sink(gn);
    auto* dx = grad_sink(xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t gi = gate_index(i);
      if (dg) (*dg)[gi] += self.grad[i] * xn->data[i];
      if (dx) (*dx)[i] += self.grad[i] * gn->data[gi];
    }
  });
}

template <std::floating_point T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          "add: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    if (auto* da = grad_sink(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*da)[i] += self.grad[i];
    if (auto* db = grad_sink(bn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*db)[i] += self.grad[i];
  });
}

template <std::floating_point T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn, factor](detail::Node<T>& self) {
    if (auto* dx = grad_sink(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*dx)[i] += self.grad[i] * factor;
  });
}

/// Sum of all elements as a [1] tensor.
template <std::floating_point T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T s = 0;
  for (auto v : x.data()) s += v;
  auto xn = x.node_ptr();
  return make_result<T>({1}, {s}, {x}, [xn](detail::Node<T>& self) {
    if (auto* dx = grad_sink(xn))
      for (auto& v : *dx) v += self.grad[0];
  });
}

template <std::floating_point T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// View with a new shape (same element count, same order).
template <std::floating_point T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  require(numel_of(shape) == x.numel(), ErrorKind::shape,
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xn = x.node_ptr();
  return make_result<T>(std::move(shape), x.storage(), {x}, [xn](detail::Node<T>& self) {
    if (auto* dx = grad_sink(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*dx)[i] += self.grad[i];
  });
}

/// Rows [begin, end) along the first axis.
template <std::floating_point T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  require(x.dim() >= 1 && begin < end && end <= x.extent(0), ErrorKind::shape,
          "slice_rows: invalid range for " + shape_str(x.shape()));
  const std::size_t row = x.numel() / x.extent(0);
  Shape s = x.shape();
  s[0] = end - begin;
  std::vector<T> out(x.storage().begin() + static_cast<std::ptrdiff_t>(begin * row),
                     x.storage().begin() + static_cast<std::ptrdiff_t>(end * row));
  auto xn = x.node_ptr();
  return make_result<T>(std::move(s), std::move(out), {x}, [xn, begin, row](detail::Node<T>& self) {
    if (auto* dx = grad_sink(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*dx)[begin * row + i] += self.grad[i];
  });
}

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization over (N,H,W). In training mode batch
/// statistics are used and the running buffers are updated in place; in eval
/// mode the running buffers are used unchanged.
template <std::floating_point T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                           BasicTensor<T>& running_mean, BasicTensor<T>& running_var, BatchNormOptions opt = {}) {
  detail::require_rank(x.shape(), 4, "batchnorm2d");
  const std::size_t N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
  for (const BasicTensor<T>* t : {&gamma, &beta, static_cast<const BasicTensor<T>*>(&running_mean), static_cast<const BasicTensor<T>*>(&running_var)})
    require(t->dim() == 1 && t->extent(0) == C, ErrorKind::shape, "batchnorm2d: parameter extent mismatch");
  const std::size_t M = N * HW;
  std::vector<T> mu(C), inv_std(C), out(x.numel());
  for (std::size_t c = 0; c < C; ++c) {
    T m, v;
    if (opt.training) {
      T s = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) s += x[(n * C + c) * HW + p];
      m = s / static_cast<T>(M);
      T ss = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) {
          const T d = x[(n * C + c) * HW + p] - m;
          ss += d * d;
        }
      v = ss / static_cast<T>(M);
      const T mom = static_cast<T>(opt.momentum);
      const T unbiased = M > 1 ? ss / static_cast<T>(M - 1) : v;
      running_mean[c] = (T(1) - mom) * running_mean[c] + mom * m;
      running_var[c] = (T(1) - mom) * running_var[c] + mom * unbiased;
    } else {
      m = running_mean[c];
      v = running_var[c];
    }
    mu[c] = m;
    inv_std[c] = T(1) / std::sqrt(v + static_cast<T>(opt.eps));
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        const std::size_t i = (n * C + c) * HW + p;
        out[i] = gamma[c] * (x[i] - m) * inv_std[c] + beta[c];
      }
  }
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
  const bool training = opt.training;
  return make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, mu = std::move(mu), inv_std = std::move(inv_std), N, C, HW, M, training](detail::Node<T>& self) {
        auto* dx = grad_sink(xn);
        auto* dg = grad_sink(gn);
        auto* db = grad_sink(bn);
        const T* dy = self.grad.data();
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              const std::size_t i = (n * C + c) * HW + p;
              const T xhat = (xn->data[i] - mu[c]) * inv_std[c];
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * xhat;
            }
          if (dg) (*dg)[c] += sum_dy_xhat;
          if (db) (*db)[c] += sum_dy;
          if (!dx) continue;
          const T g = gn->data[c];
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              const std::size_t i = (n * C + c) * HW + p;
              if (training) {
                const T xhat = (xn->data[i] - mu[c]) * inv_std[c];
                (*dx)[i] += g * inv_std[c] / static_cast<T>(M) *
                            (static_cast<T>(M) * dy[i] - sum_dy - xhat * sum_dy_xhat);
              } else {
                (*dx)[i] += g * inv_std[c] * dy[i];
              }
            }
        }
      });
}

inline constexpr double kNormEpsilon = 1e-12;

/// Rows of x [N,D] divided by max(||row||, 1e-12).
template <std::floating_point T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& x) {
  detail::require_rank(x.shape(), 2, "l2_normalize_rows");
  const std::size_t N = x.extent(0), D = x.extent(1);
  std::vector<T> out(x.numel()), norms(N);
  for (std::size_t n = 0; n < N; ++n) {
    T ss = 0;
    for (std::size_t d = 0; d < D; ++d) ss += x[n * D + d] * x[n * D + d];
    const T norm = std::sqrt(ss);
    norms[n] = norm;
    const T denom = std::max(norm, static_cast<T>(kNormEpsilon));
    for (std::size_t d = 0; d < D; ++d) out[n * D + d] = x[n * D + d] / denom;
  }
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn, norms = std::move(norms), N, D](detail::Node<T>& self) {
    auto* dx = grad_sink(xn);
    if (!dx) return;
    for (std::size_t n = 0; n < N; ++n) {
      const T* y = self.data.data() + n * D;
      const T* dy = self.grad.data() + n * D;
      if (norms[n] > static_cast<T>(kNormEpsilon)) {
        T dot = 0;
        for (std::size_t d = 0; d < D; ++d) dot += y[d] * dy[d];
        for (std::size_t d = 0; d < D; ++d) (*dx)[n * D + d] += (dy[d] - y[d] * dot) / norms[n];
      } else {
        for (std::size_t d = 0; d < D; ++d) (*dx)[n * D + d] += dy[d] / static_cast<T>(kNormEpsilon);
      }
    }
  });
}

/// Row-wise softmax of x / tau with max subtraction.
template <std::floating_point T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x, T tau) {
  require(tau > T(0), ErrorKind::config, "softmax_rows: temperature must be positive");
  detail::require_rank(x.shape(), 2, "softmax_rows");
  const std::size_t N = x.extent(0), K = x.extent(1);
  std::vector<T> out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = x.data().data() + n * K;
    T mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T z = 0;
    for (std::size_t k = 0; k < K; ++k) {
      out[n * K + k] = std::exp((row[k] - mx) / tau);
      z += out[n * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] /= z;
  }
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn, N, K, tau](detail::Node<T>& self) {
    auto* dx = grad_sink(xn);
    if (!dx) return;
    for (std::size_t n = 0; n < N; ++n) {
      const T* y = self.data.data() + n * K;
      const T* dy = self.grad.data() + n * K;
      T dot = 0;
      for (std::size_t k = 0; k < K; ++k) dot += y[k] * dy[k];
      for (std::size_t k = 0; k < K; ++k) (*dx)[n * K + k] += y[k] * (dy[k] - dot) / tau;
    }
  });
}

}  // namespace gamreid
