#pragma once

// Randomised finite-difference sweep over every differentiable operation,
// the attention modules, a GAM bottleneck and both losses.

#include <string>
#include <vector>

#include "gamreid/acl.hpp"
#include "gamreid/attention.hpp"
#include "gamreid/backbone.hpp"
#include "gamreid/grad_check.hpp"
#include "gamreid/idl.hpp"

namespace gamreid {

struct GradCase {
  std::string module;
  std::string name;
  double error = 0;
  double analytic = 0, numeric = 0;  // at the worst coordinate
};

inline const std::vector<std::string>& grad_modules() {
  static const std::vector<std::string> m{"tensor", "attention", "backbone", "idl", "acl"};
  return m;
}

namespace detail {

inline Tensor random_values(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(numel_of(shape));
  for (auto& v : data) v = uniform(rng, lo, hi);
  return Tensor(std::move(shape), std::move(data));
}

inline Tensor random_unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  return l2_normalize_rows(random_values({n, d}, rng));
}

// Scalar probe sum(r * y) with a fixed random r.
inline Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(random_values(y.shape(), rng), y));
}

class GradSweep {
 public:
  GradSweep(std::string module, std::vector<GradCase>& out, double eps) : module_(std::move(module)), out_(out), eps_(eps) {}

  template <class F>
  void check(const std::string& name, F&& fn, const Tensor& x) {
    const auto r = grad_check<double>(std::function<Tensor(const Tensor&)>(fn), x, eps_);
    out_.push_back({module_, name, r.max_relative_error, r.analytic, r.numeric});
  }

 private:
  std::string module_;
  std::vector<GradCase>& out_;
  double eps_;
};

inline void tensor_round(GradSweep& g, Rng& rng) {
  const std::size_t N = 1 + uniform_index(rng, 2), groups = 1 + uniform_index(rng, 2);
  const std::size_t C = 2 * groups, H = 3 + uniform_index(rng, 3), W = 3 + uniform_index(rng, 3);
  const std::uint64_t s = rng();
  const Tensor x = random_values({N, C, H, W}, rng);
  const Tensor w = random_values({C, C / groups, 3, 3}, rng), b = random_values({C}, rng);
  const Conv2dOptions opt{groups, 1 + uniform_index(rng, 2), 1};
  g.check("conv2d.input", [&](const Tensor& t) { return probe(conv2d(t, w, b, opt), s); }, x);
  g.check("conv2d.weight", [&](const Tensor& t) { return probe(conv2d(x, t, b, opt), s); }, w);
  g.check("conv2d.bias", [&](const Tensor& t) { return probe(conv2d(x, w, t, opt), s); }, b);
  g.check("max_pool2d", [&](const Tensor& t) { return probe(max_pool2d(t, 2, 2, 0), s); }, x);
  g.check("global_avg_pool", [&](const Tensor& t) { return probe(global_avg_pool(t), s); }, x);
  g.check("channel_avg_pool", [&](const Tensor& t) { return probe(channel_avg_pool(t), s); }, x);
  g.check("sigmoid", [&](const Tensor& t) { return probe(sigmoid(t), s); }, x);
  g.check("relu", [&](const Tensor& t) { return probe(relu(t), s); }, x);
  const Tensor y = random_values({N, C, H, W}, rng);
  g.check("add", [&](const Tensor& t) { return probe(add(t, y), s); }, x);
  g.check("scale", [&](const Tensor& t) { return probe(scale(t, 0.7), s); }, x);
  g.check("mean", [&](const Tensor& t) { return mul(mean(t), mean(t)); }, x);
  const Tensor cg = random_values({N, C, 1, 1}, rng), sg = random_values({N, 1, H, W}, rng);
  g.check("mul.same", [&](const Tensor& t) { return probe(mul(t, y), s); }, x);
  g.check("mul.channel_gate", [&](const Tensor& t) { return probe(mul(t, x), s); }, cg);
  g.check("mul.spatial_gate", [&](const Tensor& t) { return probe(mul(t, x), s); }, sg);
  const Tensor gamma = random_values({C}, rng, 0.5, 1.5), beta = random_values({C}, rng);
  auto bn = [&](const Tensor& in, const Tensor& ga, const Tensor& be) {
    Tensor rm = Tensor::zeros({C}), rv = Tensor::full({C}, 1.0);
    return batchnorm2d(in, ga, be, rm, rv, {true, 0.1, 1e-5});
  };
  g.check("batchnorm2d.input", [&](const Tensor& t) { return probe(bn(t, gamma, beta), s); }, x);
  g.check("batchnorm2d.gamma", [&](const Tensor& t) { return probe(bn(x, t, beta), s); }, gamma);
  g.check("batchnorm2d.beta", [&](const Tensor& t) { return probe(bn(x, gamma, t), s); }, beta);
  const std::size_t in = 2 + uniform_index(rng, 5), out = 2 + uniform_index(rng, 5);
  const Tensor v = random_values({3, in}, rng), lw = random_values({out, in}, rng), lb = random_values({out}, rng);
  g.check("linear.input", [&](const Tensor& t) { return probe(linear(t, lw, lb), s); }, v);
  g.check("linear.weight", [&](const Tensor& t) { return probe(linear(v, t, lb), s); }, lw);
  g.check("linear.bias", [&](const Tensor& t) { return probe(linear(v, lw, t), s); }, lb);
  g.check("l2_normalize_rows", [&](const Tensor& t) { return probe(l2_normalize_rows(t), s); }, v);
  g.check("softmax_rows", [&](const Tensor& t) { return probe(softmax_rows(t, 0.5), s); }, v);
  g.check("reshape", [&](const Tensor& t) { return probe(reshape(t, {in, 3}), s); }, v);
  g.check("slice_rows", [&](const Tensor& t) { return probe(slice_rows(t, 1, 3), s); }, v);
}

inline void attention_round(GradSweep& g, Rng& rng) {
  const std::size_t groups = 1 + uniform_index(rng, 2), C = 2 * groups;
  const std::size_t H = 3 + uniform_index(rng, 3), W = 3 + uniform_index(rng, 3);
  const std::uint64_t s = rng();
  Rng init(rng());
  GroupedAttentionModule<double> gam(C, groups, init);
  const Tensor x = random_values({1 + uniform_index(rng, 2), C, H, W}, rng);
  g.check("channel_attention", [&](const Tensor& t) { return probe(gam.channel.forward(t), s); }, x);
  g.check("spatial_attention", [&](const Tensor& t) { return probe(gam.spatial.forward(t), s); }, x);
  g.check("gam.input", [&](const Tensor& t) { return probe(gam.forward(t), s); }, x);
  auto with_weight = [&](Tensor& slot, const std::string& name) {
    const Tensor saved = slot;
    g.check(name, [&](const Tensor& t) {
      slot = t;
      auto out = probe(gam.forward(x), s);
      return out;
    }, saved);
    slot = saved;
  };
  with_weight(gam.channel.fc.weight, "gam.channel_weight");
  with_weight(gam.spatial.conv.weight, "gam.spatial_weight");
}

inline void backbone_round(GradSweep& g, Rng& rng) {
  const std::size_t groups = 1 + uniform_index(rng, 2);
  BottleneckConfig bc{4 * groups, 2 * groups, 4 * groups, 1 + uniform_index(rng, 2), groups, true, true, true};
  Rng init(rng());
  Bottleneck<double> block(bc, init);
  const std::uint64_t s = rng();
  const Tensor x = random_values({2, bc.in_channels, 4, 4}, rng);
  g.check("gam_bottleneck.input", [&](const Tensor& t) { return probe(block.forward(t, Mode::train), s); }, x);
  const Tensor saved = block.conv2.weight;
  g.check("gam_bottleneck.conv2_weight", [&](const Tensor& t) {
    block.conv2.weight = t;
    return probe(block.forward(x, Mode::train), s);
  }, saved);
  block.conv2.weight = saved;
}

inline void idl_round(GradSweep& g, Rng& rng) {
  const std::size_t n = 4 + uniform_index(rng, 5), D = 3 + uniform_index(rng, 4), B = 2 + uniform_index(rng, 2);
  InstanceBank bank(random_unit_rows(n, D, rng));
  const auto perm = permutation(rng, n);
  const std::vector<std::size_t> idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(B));
  const double tau = std::array<double, 3>{0.1, 0.5, 1.0}[uniform_index(rng, 3)];
  const Tensor aug = random_unit_rows(B, D, rng), emb = random_unit_rows(B, D, rng);
  g.check("idl.augmented", [&](const Tensor& t) { return idl_loss(idx, t, emb, bank, tau); }, aug);
  g.check("idl.embeddings", [&](const Tensor& t) { return idl_loss(idx, aug, t, bank, tau); }, emb);
}

inline void acl_round(GradSweep& g, Rng& rng) {
  const std::size_t n = 5 + uniform_index(rng, 5), D = 3 + uniform_index(rng, 4), B = 2 + uniform_index(rng, 3);
  auto bank = MemoryBank::singletons(random_unit_rows(n, D, rng));
  merge_step(bank, 1 + uniform_index(rng, 2), 0.0);
  std::vector<std::size_t> asg;
  for (std::size_t b = 0; b < B; ++b) asg.push_back(bank.assignment()[uniform_index(rng, n)]);
  const double tau = std::array<double, 3>{0.1, 0.5, 1.0}[uniform_index(rng, 3)];
  const Tensor emb = random_values({B, D}, rng);
  g.check("acl.embeddings", [&](const Tensor& t) { return acl_loss(l2_normalize_rows(t), asg, bank, tau); }, emb);
}

}  // namespace detail

/// Runs `rounds` randomised rounds of the named module ("all" for every one).
inline std::vector<GradCase> run_grad_suite(const std::string& module, std::size_t rounds, std::uint64_t seed = 0,
                                            double eps = 1e-5) {
  const auto& mods = grad_modules();
  require(module == "all" || std::find(mods.begin(), mods.end(), module) != mods.end(), ErrorKind::usage,
          "unknown grad-check module '" + module + "' (tensor, attention, backbone, idl, acl, all)");
  std::vector<GradCase> out;
  for (const auto& m : mods) {
    if (module != "all" && module != m) continue;
    detail::GradSweep sweep(m, out, eps);
    Rng rng(mix_seed({seed, static_cast<std::uint64_t>(&m - mods.data())}));
    for (std::size_t r = 0; r < rounds; ++r) {
      if (m == "tensor") detail::tensor_round(sweep, rng);
      if (m == "attention") detail::attention_round(sweep, rng);
      if (m == "backbone") detail::backbone_round(sweep, rng);
      if (m == "idl") detail::idl_round(sweep, rng);
      if (m == "acl") detail::acl_round(sweep, rng);
    }
  }
  return out;
}

}  // namespace gamreid
