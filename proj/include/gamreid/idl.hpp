#pragma once

// Instance discrimination: augmentation, the per-instance feature bank and
// the positive/negative classification loss against it.

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gamreid/image.hpp"
#include "gamreid/ops.hpp"
#include "gamreid/random.hpp"

namespace gamreid {

enum class Reduction { sum, mean };

inline Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return Reduction::sum;
  if (s == "mean") return Reduction::mean;
  fail(ErrorKind::config, "reduction must be 'sum' or 'mean', got '" + s + "'");
}

inline const char* to_string(Reduction r) { return r == Reduction::sum ? "sum" : "mean"; }

struct AugmentationSpec {
  double flip_prob = 0.5;
  // Side-length fraction kept by the random crop.
  double crop_min = 0.85, crop_max = 1.0;
  // Zoom > 1 magnifies the crop centre, < 1 shows more context (edges clamp).
  double zoom_min = 0.9, zoom_max = 1.1;
  double contrast_min = 0.7, contrast_max = 1.3;
  double occlusion_prob = 0.3;
  // Side-length fraction of the occluding rectangle.
  double occlusion_min = 0.1, occlusion_max = 0.3;
  // Independent multiplicative gain per colour channel (camera colour cast).
  double gain_min = 0.75, gain_max = 1.25;
  std::uint64_t seed = 0;

  /// No-op settings, useful as a base for tests.
  static AugmentationSpec identity() {
    AugmentationSpec s;
    s.flip_prob = 0;
    s.crop_min = s.crop_max = 1;
    s.zoom_min = s.zoom_max = 1;
    s.contrast_min = s.contrast_max = 1;
    s.occlusion_prob = 0;
    s.gain_min = s.gain_max = 1;
    return s;
  }

  void validate() const {
    auto range = [](double lo, double hi, const char* what) {
      require(std::isfinite(lo) && std::isfinite(hi) && lo <= hi, ErrorKind::config,
              std::string("augmentation ") + what + " range is empty or not finite");
    };
    auto prob = [](double p, const char* what) {
      require(p >= 0 && p <= 1, ErrorKind::config, std::string("augmentation ") + what + " must lie in [0,1]");
    };
    prob(flip_prob, "flip probability");
    prob(occlusion_prob, "occlusion probability");
    range(crop_min, crop_max, "crop");
    require(crop_min > 0 && crop_max <= 1, ErrorKind::config, "augmentation crop fraction must lie in (0,1]");
    range(zoom_min, zoom_max, "zoom");
    require(zoom_min > 0, ErrorKind::config, "augmentation zoom must be positive");
    range(contrast_min, contrast_max, "contrast");
    require(contrast_min >= 0, ErrorKind::config, "augmentation contrast must be non-negative");
    range(occlusion_min, occlusion_max, "occlusion size");
    require(occlusion_min >= 0 && occlusion_max <= 1, ErrorKind::config,
            "augmentation occlusion size must lie in [0,1]");
    range(gain_min, gain_max, "gain");
    require(gain_min >= 0, ErrorKind::config, "augmentation gain must be non-negative");
  }
};

/// Randomly augments one [C, H, W] image. The draw depends only on
/// (spec.seed, instance_seed, epoch), so reruns are bit-identical.
template <std::floating_point T>
BasicTensor<T> augment(const BasicTensor<T>& image, const AugmentationSpec& spec, std::uint64_t instance_seed,
                       std::uint64_t epoch = 0) {
  spec.validate();
  require(image.dim() == 3, ErrorKind::shape, "augment expects [C,H,W], got " + shape_str(image.shape()));
  const std::size_t C = image.extent(0), H = image.extent(1), W = image.extent(2);
  Rng rng(mix_seed({spec.seed, instance_seed, epoch}));
  // Every draw happens unconditionally so one parameter never shifts the others.
  const bool flip = bernoulli(rng, spec.flip_prob);
  const double crop = uniform(rng, spec.crop_min, spec.crop_max);
  const double crop_y = uniform01(rng), crop_x = uniform01(rng);
  const double zoom = uniform(rng, spec.zoom_min, spec.zoom_max);
  const double contrast = uniform(rng, spec.contrast_min, spec.contrast_max);
  const bool occlude = bernoulli(rng, spec.occlusion_prob);
  const double occ_h = uniform(rng, spec.occlusion_min, spec.occlusion_max);
  const double occ_w = uniform(rng, spec.occlusion_min, spec.occlusion_max);
  const double occ_y = uniform01(rng), occ_x = uniform01(rng);
  std::vector<double> gain(C);
  for (auto& g : gain) g = uniform(rng, spec.gain_min, spec.gain_max);

  std::vector<T> px(image.data().begin(), image.data().end());

  if (crop != 1.0 || zoom != 1.0) {
    // Crop window, clamped to at least one source pixel, then zoomed about its centre.
    const double ch = std::max(1.0, crop * static_cast<double>(H));
    const double cw = std::max(1.0, crop * static_cast<double>(W));
    const double y0 = crop_y * (static_cast<double>(H) - ch), x0 = crop_x * (static_cast<double>(W) - cw);
    const double zh = ch / zoom, zw = cw / zoom;
    const Window win{y0 + (ch - zh) / 2, x0 + (cw - zw) / 2, zh, zw};
    px = resample_window(px.data(), C, H, W, win, H, W);
  }
  if (flip) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y) std::reverse(px.begin() + (c * H + y) * W, px.begin() + (c * H + y + 1) * W);
  }
  if (contrast != 1.0) {
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0;
      for (std::size_t p = 0; p < H * W; ++p) m += px[c * H * W + p];
      m /= static_cast<double>(H * W);
      for (std::size_t p = 0; p < H * W; ++p) {
        T& v = px[c * H * W + p];
        v = static_cast<T>(m + contrast * (v - m));
      }
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    if (gain[c] == 1.0) continue;
    for (std::size_t p = 0; p < H * W; ++p) px[c * H * W + p] = static_cast<T>(gain[c] * px[c * H * W + p]);
  }
  if (occlude) {
    const auto rh = static_cast<std::size_t>(std::lround(occ_h * static_cast<double>(H)));
    const auto rw = static_cast<std::size_t>(std::lround(occ_w * static_cast<double>(W)));
    if (rh > 0 && rw > 0) {
      const auto ry = static_cast<std::size_t>(occ_y * static_cast<double>(H - rh + 1)) % (H - rh + 1);
      const auto rx = static_cast<std::size_t>(occ_x * static_cast<double>(W - rw + 1)) % (W - rw + 1);
      for (std::size_t c = 0; c < C; ++c) {
        double m = 0;
        for (std::size_t p = 0; p < H * W; ++p) m += px[c * H * W + p];
        const T fill = static_cast<T>(m / static_cast<double>(H * W));
        for (std::size_t y = ry; y < ry + rh; ++y)
          std::fill_n(px.begin() + (c * H + y) * W + rx, rw, fill);
      }
    }
  }
  return BasicTensor<T>(image.shape(), std::move(px));
}

/// One unit-norm feature row per training instance.
class InstanceBank {
 public:
  InstanceBank() = default;

  /// Rows are normalised on entry.
  template <std::floating_point T>
  explicit InstanceBank(const BasicTensor<T>& features) {
    require(features.dim() == 2 && features.extent(0) > 0, ErrorKind::shape,
            "instance bank needs [n, D] features, got " + shape_str(features.shape()));
    n_ = features.extent(0);
    d_ = features.extent(1);
    v_.assign(features.data().begin(), features.data().end());
    for (std::size_t i = 0; i < n_; ++i) normalize_row(i);
  }

  std::size_t size() const { return n_; }
  std::size_t dim() const { return d_; }
  std::span<const double> row(std::size_t i) const { return {v_.data() + i * d_, d_}; }
  const std::vector<double>& data() const { return v_; }

  /// V_i <- normalize(mu * V_i + (1 - mu) * f).
  template <typename Span>
  void update(std::size_t i, const Span& f, double mu) {
    require(i < n_, ErrorKind::usage, "instance bank index out of range");
    require(f.size() == d_, ErrorKind::shape, "instance bank update has wrong width");
    double* r = v_.data() + i * d_;
    std::vector<double> old(r, r + d_);
    for (std::size_t k = 0; k < d_; ++k) r[k] = mu * r[k] + (1 - mu) * static_cast<double>(f[k]);
    if (!normalize_row(i)) {
      // Antipodal update cancelled out; adopt the new feature outright.
      for (std::size_t k = 0; k < d_; ++k) r[k] = static_cast<double>(f[k]);
      normalize_row(i);
    }
  }

  /// Throws if any row drifted off the unit sphere.
  void check_invariants(double tol = 1e-9) const {
    for (std::size_t i = 0; i < n_; ++i) {
      double ss = 0;
      for (double v : row(i)) ss += v * v;
      require(std::abs(std::sqrt(ss) - 1.0) <= tol, ErrorKind::integrity,
              "instance bank row " + std::to_string(i) + " is not unit norm");
    }
  }

 private:
  bool normalize_row(std::size_t i) {
    double* r = v_.data() + i * d_;
    double ss = 0;
    for (std::size_t k = 0; k < d_; ++k) ss += r[k] * r[k];
    const double norm = std::sqrt(ss);
    if (norm < kNormEpsilon) return false;
    for (std::size_t k = 0; k < d_; ++k) r[k] /= norm;
    return true;
  }

  std::size_t n_ = 0, d_ = 0;
  std::vector<double> v_;
};

namespace detail {

/// logits_k = bank_k . f / tau.
template <typename Span>
std::vector<double> bank_logits(const InstanceBank& bank, const Span& f, double tau) {
  require(tau > 0, ErrorKind::config, "temperature must be positive");
  require(f.size() == bank.dim(), ErrorKind::shape,
          "feature width " + std::to_string(f.size()) + " does not match bank width " + std::to_string(bank.dim()));
  std::vector<double> z(bank.size());
  for (std::size_t k = 0; k < bank.size(); ++k) {
    const auto r = bank.row(k);
    double s = 0;
    for (std::size_t d = 0; d < r.size(); ++d) s += r[d] * static_cast<double>(f[d]);
    z[k] = s / tau;
  }
  return z;
}

/// log-sum-exp over all entries except `skip` (pass size() to keep all).
inline double logsumexp(const std::vector<double>& z, std::size_t skip) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < z.size(); ++k)
    if (k != skip) mx = std::max(mx, z[k]);
  if (!std::isfinite(mx)) return mx;
  double s = 0;
  for (std::size_t k = 0; k < z.size(); ++k)
    if (k != skip) s += std::exp(z[k] - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Softmax over the whole bank for probe feature f.
template <typename Span>
std::vector<double> bank_softmax(const Span& f, const InstanceBank& bank, double tau) {
  auto z = detail::bank_logits(bank, f, tau);
  const double lse = detail::logsumexp(z, z.size());
  for (auto& v : z) v = std::exp(v - lse);
  return z;
}

/// Probability that the augmented view f_aug is classified as instance i.
template <typename Span>
double p_positive(std::size_t i, const Span& f_aug, const InstanceBank& bank, double tau) {
  require(i < bank.size(), ErrorKind::usage, "instance index out of range");
  const auto z = detail::bank_logits(bank, f_aug, tau);
  return std::exp(z[i] - detail::logsumexp(z, z.size()));
}

/// Probability that another instance's feature f_j is classified as instance i.
template <typename Span>
double p_negative(std::size_t i, const Span& f_j, const InstanceBank& bank, double tau) {
  return p_positive(i, f_j, bank, tau);
}

/// -sum_b log P(i_b | aug_b) - sum_b sum_{c != b} log(1 - P(i_b | emb_c)).
/// Bank rows are constants. log(1 - P) is evaluated as a log-sum-exp over the
/// other instances so it stays finite when P rounds to 1.
template <std::floating_point T>
BasicTensor<T> idl_loss(const std::vector<std::size_t>& indices, const BasicTensor<T>& augmented,
                        const BasicTensor<T>& embeddings, const InstanceBank& bank, double tau,
                        Reduction reduction = Reduction::sum) {
  require(tau > 0, ErrorKind::config, "idl temperature must be positive");
  const std::size_t B = indices.size(), D = bank.dim(), n = bank.size();
  require(B > 0, ErrorKind::usage, "idl_loss: empty batch");
  require(augmented.shape() == Shape({B, D}) && embeddings.shape() == Shape({B, D}), ErrorKind::shape,
          "idl_loss expects [" + std::to_string(B) + ", " + std::to_string(D) + "] embeddings, got " +
              shape_str(augmented.shape()) + " and " + shape_str(embeddings.shape()));
  require(std::set<std::size_t>(indices.begin(), indices.end()).size() == B, ErrorKind::usage,
          "idl_loss: duplicate instance indices in batch");
  for (auto i : indices) require(i < n, ErrorKind::usage, "idl_loss: instance index out of range");
  require(B == 1 || n > 1, ErrorKind::usage, "idl_loss: negatives need at least two bank rows");

  // Logit coefficients: d loss / d logit_k for each probe row.
  std::vector<double> coef_aug(B * n, 0.0), coef_emb(B * n, 0.0);
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto z = detail::bank_logits(bank, augmented.data().subspan(b * D, D), tau);
    const double lse = detail::logsumexp(z, n);
    loss -= z[indices[b]] - lse;
    for (std::size_t k = 0; k < n; ++k) coef_aug[b * n + k] = std::exp(z[k] - lse);
    coef_aug[b * n + indices[b]] -= 1.0;
  }
  for (std::size_t c = 0; c < B && B > 1; ++c) {
    const auto z = detail::bank_logits(bank, embeddings.data().subspan(c * D, D), tau);
    const double lse = detail::logsumexp(z, n);
    for (std::size_t b = 0; b < B; ++b) {
      if (b == c) continue;
      const std::size_t i = indices[b];
      const double lse_other = detail::logsumexp(z, i);
      loss -= lse_other - lse;
      for (std::size_t k = 0; k < n; ++k) {
        const double p = std::exp(z[k] - lse);
        const double q = k == i ? 0.0 : std::exp(z[k] - lse_other);
        coef_emb[c * n + k] += p - q;
      }
    }
  }
  const double factor = reduction == Reduction::mean ? 1.0 / static_cast<double>(B) : 1.0;
  loss *= factor;

  auto an = augmented.node_ptr();
  auto en = embeddings.node_ptr();
  const InstanceBank* bank_ptr = &bank;
  // The bank is copied so later updates cannot leak into this step's gradient.
  auto frozen = std::make_shared<std::vector<double>>(bank_ptr->data());
  return make_result<T>({}, {static_cast<T>(loss)}, {augmented, embeddings},
                        [an, en, frozen, coef_aug = std::move(coef_aug), coef_emb = std::move(coef_emb), B, D, n, tau,
                         factor](detail::Node<T>& self) {
                          const double g = self.grad[0] * factor / tau;
                          auto apply = [&](const std::vector<double>& coef, std::vector<T>* dst) {
                            if (!dst) return;
                            for (std::size_t b = 0; b < B; ++b)
                              for (std::size_t k = 0; k < n; ++k) {
                                const double a = coef[b * n + k] * g;
                                if (a == 0.0) continue;
                                const double* r = frozen->data() + k * D;
                                for (std::size_t d = 0; d < D; ++d) (*dst)[b * D + d] += static_cast<T>(a * r[d]);
                              }
                          };
                          apply(coef_aug, grad_sink(an));
                          // When both arguments are the same tensor the sink is shared and both terms accumulate.
                          apply(coef_emb, grad_sink(en));
                        });
}

}  // namespace gamreid
