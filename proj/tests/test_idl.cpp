#include <gtest/gtest.h>

#include <cmath>

#include "gamreid/grad_check.hpp"
#include "gamreid/idl.hpp"
#include "test_util.hpp"

using namespace gamreid;
using gamreid::testing::random_tensor;
using gamreid::testing::unit_rows;

namespace {

Tensor orthonormal(std::size_t n, std::size_t d) {
  Tensor t = Tensor::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i) t[i * d + i] = 1.0;
  return t;
}

std::vector<double> row(const Tensor& t, std::size_t i) {
  const std::size_t d = t.extent(1);
  return {t.data().begin() + i * d, t.data().begin() + (i + 1) * d};
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::io;
}

}  // namespace

TEST(Augment, IdentitySettingsReturnInput) {
  auto img = random_tensor({3, 12, 6}, 1, 0, 1);
  auto out = augment(img, AugmentationSpec::identity(), 7, 3);
  for (std::size_t i = 0; i < img.numel(); ++i) ASSERT_EQ(out[i], img[i]);
}

TEST(Augment, FlipIsMirrorAndInvolution) {
  auto spec = AugmentationSpec::identity();
  spec.flip_prob = 1.0;
  auto img = random_tensor({3, 4, 5}, 2);
  auto once = augment(img, spec, 1);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 5; ++x) ASSERT_EQ(once[(c * 4 + y) * 5 + x], img[(c * 4 + y) * 5 + (4 - x)]);
  auto twice = augment(once, spec, 2);
  for (std::size_t i = 0; i < img.numel(); ++i) ASSERT_EQ(twice[i], img[i]);
}

TEST(Augment, DeterministicPerSeedAndEpoch) {
  AugmentationSpec spec;
  spec.seed = 99;
  spec.occlusion_prob = 0.5;
  auto img = random_tensor({3, 16, 8}, 3, 0, 1);
  auto a = augment(img, spec, 5, 2), b = augment(img, spec, 5, 2);
  for (std::size_t i = 0; i < img.numel(); ++i) ASSERT_EQ(a[i], b[i]);
  std::size_t differing = 0;
  for (std::uint64_t epoch = 0; epoch < 8; ++epoch) {
    auto c = augment(img, spec, 5, epoch);
    for (std::size_t i = 0; i < img.numel(); ++i)
      if (c[i] != a[i]) {
        ++differing;
        break;
      }
  }
  EXPECT_GE(differing, 6u);
}

TEST(Augment, DegenerateCropIsClampedNotAnError) {
  auto spec = AugmentationSpec::identity();
  spec.crop_min = spec.crop_max = 1e-6;
  spec.zoom_min = spec.zoom_max = 50.0;
  auto img = random_tensor({3, 8, 4}, 4);
  auto out = augment(img, spec, 1);
  ASSERT_EQ(out.shape(), img.shape());
  for (auto v : out.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Augment, FullOcclusionFillsChannelMean) {
  auto spec = AugmentationSpec::identity();
  spec.occlusion_prob = 1;
  spec.occlusion_min = spec.occlusion_max = 1;
  auto img = random_tensor({3, 6, 4}, 5);
  const auto means = channel_means(img);
  auto out = augment(img, spec, 1);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 24; ++p) ASSERT_NEAR(out[c * 24 + p], means[c], 1e-12);
}

TEST(Augment, ZeroContrastFlattensEachChannel) {
  auto spec = AugmentationSpec::identity();
  spec.contrast_min = spec.contrast_max = 0;
  auto img = random_tensor({3, 5, 5}, 6);
  const auto means = channel_means(img);
  auto out = augment(img, spec, 1);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 25; ++p) ASSERT_NEAR(out[c * 25 + p], means[c], 1e-12);
}

TEST(Augment, InvalidSpecIsConfigError) {
  auto img = random_tensor({3, 4, 4}, 7);
  for (auto mutate : std::vector<std::function<void(AugmentationSpec&)>>{
           [](auto& s) { s.crop_min = 0; },
           [](auto& s) { s.crop_max = 1.5; },
           [](auto& s) { s.flip_prob = 1.2; },
           [](auto& s) { s.occlusion_prob = -0.1; },
           [](auto& s) { s.zoom_min = 2, s.zoom_max = 1; },
       }) {
    AugmentationSpec spec;
    mutate(spec);
    EXPECT_EQ(kind_of([&] { augment(img, spec, 1); }), ErrorKind::config);
  }
}

TEST(InstanceProbability, WorkedExamples) {
  InstanceBank single(Tensor({1, 3}, {0, 0.6, 0.8}));
  EXPECT_DOUBLE_EQ(p_positive(0, std::vector<double>{0, 0.6, 0.8}, single, 0.1), 1.0);

  InstanceBank two(orthonormal(2, 3));
  const auto v0 = row(orthonormal(2, 3), 0);
  EXPECT_NEAR(p_positive(0, v0, two, 0.1), 0.9999546, 1e-7);
  EXPECT_NEAR(p_negative(1, v0, two, 0.1), 4.54e-5, 1e-7);

  InstanceBank uniform_bank(Tensor({4, 2}, {1, 1, 1, 1, 1, 1, 1, 1}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(p_positive(i, std::vector<double>{0.6, -0.8}, uniform_bank, 0.3), 0.25, 1e-15);
    EXPECT_NEAR(p_negative(i, std::vector<double>{1, 0}, uniform_bank, 0.05), 0.25, 1e-15);
  }
}

TEST(InstanceProbability, NormalisedOverBank) {
  InstanceBank bank(random_tensor({20, 8}, 8));
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto f = row(unit_rows(1, 8, s + 100), 0);
    double total = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      const double p = p_negative(i, f, bank, 0.1);
      EXPECT_GT(p, 0.0);
      EXPECT_LT(p, 1.0);
      total += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(InstanceProbability, NonPositiveTemperatureIsConfigError) {
  InstanceBank bank(orthonormal(2, 2));
  EXPECT_EQ(kind_of([&] { p_positive(0, std::vector<double>{1, 0}, bank, 0.0); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { p_negative(0, std::vector<double>{1, 0}, bank, -1.0); }), ErrorKind::config);
}

TEST(InstanceProbability, InvariantToCommonLogitShift) {
  // Every row shares the same last coordinate, so changing the probe's last
  // coordinate adds one constant to all logits.
  const double a = 0.6, r = 0.8;
  auto base = unit_rows(6, 3, 9);
  Tensor rows = Tensor::zeros({6, 4});
  for (std::size_t k = 0; k < 6; ++k) {
    for (std::size_t d = 0; d < 3; ++d) rows[k * 4 + d] = r * base[k * 3 + d];
    rows[k * 4 + 3] = a;
  }
  InstanceBank bank(rows);
  for (double shift : {-0.7, 0.3, 2.5}) {
    const std::vector<double> f0{0.3, -0.2, 0.5, 0.0}, f1{0.3, -0.2, 0.5, shift};
    for (std::size_t i = 0; i < 6; ++i)
      EXPECT_NEAR(p_positive(i, f0, bank, 0.1), p_positive(i, f1, bank, 0.1), 1e-12);
  }
}

TEST(IdlLoss, WorkedExamples) {
  InstanceBank one(Tensor({1, 2}, {1, 0}));
  auto f = Tensor({1, 2}, {1, 0});
  EXPECT_DOUBLE_EQ(idl_loss<double>({0}, f, f, one, 0.1).item(), 0.0);

  InstanceBank two(orthonormal(2, 2));
  auto perfect = orthonormal(2, 2);
  const double e10 = std::exp(10.0);
  const double expect = -2 * std::log(e10 / (e10 + 1)) - 2 * std::log(1 - 1 / (1 + e10));
  const double got = idl_loss<double>({0, 1}, perfect, perfect, two, 0.1).item();
  EXPECT_NEAR(got, expect, 1e-9 * expect);
  EXPECT_NEAR(got, 1.816e-4, 1e-7);
  EXPECT_NEAR(idl_loss<double>({0, 1}, perfect, perfect, two, 0.1, Reduction::mean).item(), expect / 2, 1e-9 * expect);
}

TEST(IdlLoss, DuplicateIndicesAreUsageError) {
  InstanceBank bank(orthonormal(3, 3));
  auto f = unit_rows(2, 3, 10);
  EXPECT_EQ(kind_of([&] { idl_loss<double>({1, 1}, f, f, bank, 0.1); }), ErrorKind::usage);
  EXPECT_EQ(kind_of([&] { idl_loss<double>({1, 3}, f, f, bank, 0.1); }), ErrorKind::usage);
  EXPECT_EQ(kind_of([&] { idl_loss<double>({0, 1}, f, f, bank, 0.0); }), ErrorKind::config);
}

TEST(IdlLoss, NonNegativeAndFiniteAtLowTemperature) {
  auto rows = unit_rows(10, 6, 11);
  InstanceBank bank(rows);
  // Worst case: every augmentation points away from its own row and
  // every embedding sits on another member's row.
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  Tensor aug = Tensor::zeros({4, 6}), emb = Tensor::zeros({4, 6});
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t d = 0; d < 6; ++d) {
      aug[b * 6 + d] = -rows[idx[b] * 6 + d];
      emb[b * 6 + d] = rows[idx[(b + 1) % 4] * 6 + d];
    }
  aug.set_requires_grad();
  emb.set_requires_grad();
  auto loss = idl_loss<double>(idx, aug, emb, bank, 0.05);
  EXPECT_TRUE(std::isfinite(loss.item()));
  EXPECT_GE(loss.item(), 0.0);
  backward(loss);
  for (auto g : aug.grad()) EXPECT_TRUE(std::isfinite(g));
  for (auto g : emb.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(IdlLoss, DecreasesWhenRotatedTowardOwnRow) {
  // The augmentation travels along the great circle from u to V_i, where u is
  // orthogonal to every bank row, so only its alignment with V_i changes.
  const std::size_t n = 6, D = 10;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto rows = unit_rows(n, D, 200 + seed);
    InstanceBank bank(rows);
    const std::vector<std::size_t> idx{2, 4};
    auto u = random_tensor({D}, 300 + seed);
    std::vector<std::vector<double>> basis;
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<double> q(rows.data().begin() + k * D, rows.data().begin() + (k + 1) * D);
      for (const auto& e : basis) {
        double dot = 0;
        for (std::size_t d = 0; d < D; ++d) dot += q[d] * e[d];
        for (std::size_t d = 0; d < D; ++d) q[d] -= dot * e[d];
      }
      double qn = 0;
      for (double v : q) qn += v * v;
      for (double& v : q) v /= std::sqrt(qn);
      basis.push_back(q);
    }
    for (const auto& e : basis) {
      double dot = 0;
      for (std::size_t d = 0; d < D; ++d) dot += u[d] * e[d];
      for (std::size_t d = 0; d < D; ++d) u[d] -= dot * e[d];
    }
    double un = 0;
    for (std::size_t d = 0; d < D; ++d) un += u[d] * u[d];
    for (std::size_t d = 0; d < D; ++d) u[d] /= std::sqrt(un);
    for (std::size_t k = 0; k < n; ++k) {
      double dot = 0;
      for (std::size_t d = 0; d < D; ++d) dot += u[d] * rows[k * D + d];
      ASSERT_NEAR(dot, 0.0, 1e-9);
    }
    auto emb = unit_rows(2, D, 400 + seed);
    double previous = std::numeric_limits<double>::infinity();
    for (double t : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
      const double phi = 3.141592653589793 * (1 - t);
      Tensor aug = emb.clone();
      for (std::size_t d = 0; d < D; ++d) aug[d] = std::cos(phi) * rows[idx[0] * D + d] + std::sin(phi) * u[d];
      const double l = idl_loss<double>(idx, aug, emb, bank, 0.1).item();
      EXPECT_LT(l, previous) << "seed " << seed << " t " << t;
      previous = l;
    }
  }
}

TEST(IdlLoss, GradientMatchesFiniteDifference) {
  InstanceBank bank(unit_rows(7, 4, 12));
  const std::vector<std::size_t> idx{5, 1, 3};
  auto aug = unit_rows(3, 4, 13), emb = unit_rows(3, 4, 14);
  for (auto red : {Reduction::sum, Reduction::mean}) {
    auto fa = [&](const Tensor& a) { return idl_loss<double>(idx, a, emb, bank, 0.2, red); };
    EXPECT_LE(grad_check<double>(fa, aug).max_relative_error, 1e-4);
    auto fe = [&](const Tensor& e) { return idl_loss<double>(idx, aug, e, bank, 0.2, red); };
    EXPECT_LE(grad_check<double>(fe, emb).max_relative_error, 1e-4);
    auto shared = [&](const Tensor& x) { return idl_loss<double>(idx, x, x, bank, 0.2, red); };
    EXPECT_LE(grad_check<double>(shared, aug).max_relative_error, 1e-4);
  }
}

TEST(InstanceBank, MomentumUpdateKeepsUnitRows) {
  InstanceBank bank(orthonormal(3, 3));
  bank.update(0, std::vector<double>{0, 1, 0}, 0.5);
  EXPECT_NEAR(bank.row(0)[0], std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(bank.row(0)[1], std::sqrt(0.5), 1e-15);
  bank.update(2, std::vector<double>{0, 0, -1}, 0.5);
  EXPECT_DOUBLE_EQ(bank.row(2)[2], -1.0);
  auto feats = unit_rows(30, 3, 15);
  for (std::size_t s = 0; s < 30; ++s) bank.update(s % 3, row(feats, s), 0.5);
  EXPECT_NO_THROW(bank.check_invariants());
  EXPECT_THROW(bank.update(3, std::vector<double>{1, 0, 0}, 0.5), Error);
}
