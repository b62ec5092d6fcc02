#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gamreid/ops.hpp"
#include "gamreid/random.hpp"
#include "gamreid/tensor.hpp"

namespace gamreid::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> data(numel_of(shape));
  for (auto& v : data) v = uniform(rng, lo, hi);
  return Tensor(std::move(shape), std::move(data));
}

/// Scalar probe sum(y * r) with a fixed random r, so every output coordinate
/// contributes a distinct weight to the gradient.
inline Tensor probe_loss(const Tensor& y, std::uint64_t seed = 99) {
  return sum(mul(random_tensor(y.shape(), seed), y));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor unit_rows(Tensor t) {
  const std::size_t n = t.extent(0), d = t.extent(1);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0;
    for (std::size_t k = 0; k < d; ++k) ss += t[i * d + k] * t[i * d + k];
    for (std::size_t k = 0; k < d; ++k) t[i * d + k] /= std::sqrt(ss);
  }
  return t;
}

inline Tensor unit_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  return unit_rows(random_tensor({n, d}, seed));
}

}  // namespace gamreid::testing
