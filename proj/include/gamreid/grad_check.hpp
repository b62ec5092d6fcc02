#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "gamreid/error.hpp"
#include "gamreid/tensor.hpp"

namespace gamreid {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape gradient of a scalar function against central
/// differences, coordinate by coordinate. The relative error of one
/// coordinate is |a - n| / max(1e-6, |a| + |n|). The floor keeps rounding
/// noise in the central difference (about 1e-11 for O(1) losses) from
/// dominating coordinates whose true derivative is near zero.
///
/// `fn` must be deterministic; it is evaluated twice at the base point and a
/// mismatch is reported as a usage error.
template <std::floating_point T>
GradCheckResult grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& fn,
                           const BasicTensor<T>& input, double eps = 1e-5) {
  require(eps > 0.0, ErrorKind::usage, "grad_check: eps must be positive");

  BasicTensor<T> x = input.clone();
  x.set_requires_grad(true);
  auto loss = fn(x);
  require(loss.numel() == 1, ErrorKind::usage, "grad_check: function must return a scalar");
  const T base = loss.item();
  backward(loss);
  std::vector<T> analytic(x.numel(), T(0));
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  NoGradGuard<T> no_grad;
  BasicTensor<T> probe = input.clone();
  {
    const T again = fn(probe).item();
    require(again == base, ErrorKind::usage, "grad_check: function is not deterministic");
  }

  GradCheckResult result;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + static_cast<T>(eps);
    const double plus = static_cast<double>(fn(probe).item());
    probe[i] = orig - static_cast<T>(eps);
    const double minus = static_cast<double>(fn(probe).item());
    probe[i] = orig;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double rel = std::abs(a - numeric) / std::max(1e-6, std::abs(a) + std::abs(numeric));
    if (rel > result.max_relative_error || i == 0) {
      result = {rel, i, a, numeric};
    }
  }
  return result;
}

}  // namespace gamreid
