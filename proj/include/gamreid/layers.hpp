#pragma once

#include <cmath>
#include <string>

#include "gamreid/ops.hpp"
#include "gamreid/random.hpp"
#include "gamreid/tensor.hpp"

namespace gamreid {

enum class Mode { train, eval };

/// Tensor role seen by module visitors: learnable parameter or persistent
/// buffer (batchnorm running statistics).
enum class Slot { parameter, buffer };

template <std::floating_point T>
BasicTensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> data(numel_of(shape));
  for (auto& v : data) v = static_cast<T>(uniform(rng, -bound, bound));
  BasicTensor<T> t(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

template <std::floating_point T>
BasicTensor<T> parameter_full(Shape shape, T value) {
  auto t = BasicTensor<T>::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

template <std::floating_point T>
struct Conv2d {
  BasicTensor<T> weight;
  BasicTensor<T> bias;  // undefined when the conv feeds a batchnorm
  Conv2dOptions options;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opt, bool with_bias, Rng& rng)
      : options(opt) {
    require(opt.groups > 0 && in % opt.groups == 0 && out % opt.groups == 0, ErrorKind::config,
            "Conv2d: channels " + std::to_string(in) + "->" + std::to_string(out) +
                " not divisible by groups " + std::to_string(opt.groups));
    const std::size_t fan_in = in / opt.groups * kernel * kernel;
    weight = kaiming_uniform<T>({out, in / opt.groups, kernel, kernel}, fan_in, rng);
    if (with_bias) bias = parameter_full<T>({out}, T(0));
  }

  static std::size_t count(std::size_t in, std::size_t out, std::size_t kernel, std::size_t groups, bool with_bias) {
    return out * (in / groups) * kernel * kernel + (with_bias ? out : 0);
  }

  BasicTensor<T> forward(const BasicTensor<T>& x) const { return conv2d(x, weight, bias, options); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight, Slot::parameter);
    if (bias.defined()) f(prefix + ".bias", bias, Slot::parameter);
  }
};

template <std::floating_point T>
struct BatchNorm2d {
  BasicTensor<T> gamma, beta, running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels)
      : gamma(parameter_full<T>({channels}, T(1))),
        beta(parameter_full<T>({channels}, T(0))),
        running_mean(BasicTensor<T>::zeros({channels})),
        running_var(BasicTensor<T>::full({channels}, T(1))) {}

  static std::size_t count(std::size_t channels) { return 2 * channels; }

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var,
                       BatchNormOptions{mode == Mode::train, momentum, eps});
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma, Slot::parameter);
    f(prefix + ".beta", beta, Slot::parameter);
    f(prefix + ".running_mean", running_mean, Slot::buffer);
    f(prefix + ".running_var", running_var, Slot::buffer);
  }
};

template <std::floating_point T>
struct Linear {
  BasicTensor<T> weight, bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(kaiming_uniform<T>({out, in}, in, rng)), bias(parameter_full<T>({out}, T(0))) {}

  static std::size_t count(std::size_t in, std::size_t out) { return in * out + out; }

  BasicTensor<T> forward(const BasicTensor<T>& x) const { return linear(x, weight, bias); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight, Slot::parameter);
    f(prefix + ".bias", bias, Slot::parameter);
  }
};

}  // namespace gamreid
