#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "gamreid/attention.hpp"
#include "gamreid/grad_check.hpp"
#include "test_util.hpp"

using namespace gamreid;
using gamreid::testing::max_abs_diff;
using gamreid::testing::probe_loss;
using gamreid::testing::random_tensor;

namespace {

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

GroupedAttentionModule<double> make_gam(std::size_t c, std::size_t g, std::uint64_t seed) {
  Rng rng(seed);
  GroupedAttentionModule<double> gam(c, g, rng);
  // Non-zero biases so the oracle exercises every term.
  gam.channel.fc.bias = random_tensor({c / g}, seed + 1).set_requires_grad();
  gam.spatial.conv.bias = random_tensor({1}, seed + 2).set_requires_grad();
  return gam;
}

void zero_weights(GroupedAttentionModule<double>& gam) {
  gam.visit("gam", [](const std::string&, Tensor& t, Slot) {
    for (auto& v : t.data()) v = 0.0;
  });
}

// pool -> affine -> sigmoid, written directly with the per-group shared map.
std::vector<double> channel_oracle(const Tensor& f, const Tensor& w, const Tensor& b, std::size_t groups) {
  const std::size_t N = f.extent(0), C = f.extent(1), HW = f.extent(2) * f.extent(3), Cg = C / groups;
  std::vector<double> out(N * C);
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> pooled(C);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t p = 0; p < HW; ++p) s += f[(n * C + c) * HW + p];
      pooled[c] = s / static_cast<double>(HW);
    }
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t o = 0; o < Cg; ++o) {
        double z = b[o];
        for (std::size_t i = 0; i < Cg; ++i) z += w[o * Cg + i] * pooled[g * Cg + i];
        out[n * C + g * Cg + o] = sig(z);
      }
  }
  return out;
}

// channel mean -> 7x7 conv with zero padding 3 -> sigmoid.
std::vector<double> spatial_oracle(const Tensor& f, const Tensor& w, double bias) {
  const std::size_t N = f.extent(0), C = f.extent(1), H = f.extent(2), W = f.extent(3);
  std::vector<double> out(N * H * W);
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> m(H * W, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < H * W; ++p) m[p] += f[(n * C + c) * H * W + p] / static_cast<double>(C);
    for (long y = 0; y < static_cast<long>(H); ++y)
      for (long x = 0; x < static_cast<long>(W); ++x) {
        double s = bias;
        for (long i = 0; i < 7; ++i)
          for (long j = 0; j < 7; ++j) {
            const long yy = y + i - 3, xx = x + j - 3;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
            s += w[i * 7 + j] * m[yy * W + xx];
          }
        out[n * H * W + y * W + x] = sig(s);
      }
  }
  return out;
}

}  // namespace

TEST(ChannelAttention, ZeroInputZeroWeights) {
  auto gam = make_gam(4, 1, 1);
  zero_weights(gam);
  auto a = gam.channel.forward(Tensor::zeros({2, 4, 3, 3}));
  for (auto v : a.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(ChannelAttention, ConstantInputIdentityWeight) {
  auto gam = make_gam(3, 1, 2);
  zero_weights(gam);
  for (std::size_t i = 0; i < 3; ++i) gam.channel.fc.weight[i * 3 + i] = 1.0;
  auto a = gam.channel.forward(Tensor::full({1, 3, 2, 2}, 0.8));
  for (auto v : a.data()) EXPECT_NEAR(v, sig(0.8), 1e-15);
}

TEST(ChannelAttention, MatchesCompositionOracle) {
  for (std::size_t groups : {1u, 2u, 4u}) {
    auto gam = make_gam(8, groups, 3 + groups);
    auto f = random_tensor({2, 8, 4, 4}, 4);
    auto a = gam.channel.forward(f);
    ASSERT_EQ(a.shape(), (Shape{2, 8}));
    auto ref = channel_oracle(f, gam.channel.fc.weight, gam.channel.fc.bias, groups);
    EXPECT_LE(max_abs_diff(a.data(), ref), 1e-12) << "groups=" << groups;
    for (auto v : a.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(ChannelAttention, ChannelMismatchIsShapeError) {
  auto gam = make_gam(8, 1, 5);
  try {
    gam.channel.forward(random_tensor({1, 6, 2, 2}, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
  }
}

TEST(ChannelAttention, SpatialPermutationInvariant) {
  auto gam = make_gam(6, 2, 6);
  auto f = random_tensor({1, 6, 3, 4}, 7);
  auto permuted = f.clone();
  Rng rng(8);
  const auto perm = permutation(rng, 12);
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t p = 0; p < 12; ++p) permuted[c * 12 + p] = f[c * 12 + perm[p]];
  EXPECT_LE(max_abs_diff(gam.channel.forward(f).data(), gam.channel.forward(permuted).data()), 1e-14);
}

TEST(SpatialAttention, DegenerateCases) {
  auto gam = make_gam(4, 1, 9);
  zero_weights(gam);
  auto a = gam.spatial.forward(Tensor::zeros({1, 4, 5, 5}));
  for (auto v : a.data()) EXPECT_DOUBLE_EQ(v, 0.5);
  gam.spatial.conv.bias[0] = -1.3;
  auto b = gam.spatial.forward(random_tensor({1, 1, 4, 4}, 10));
  for (auto v : b.data()) EXPECT_NEAR(v, sig(-1.3), 1e-15);
}

TEST(SpatialAttention, MatchesCompositionOracle) {
  auto gam = make_gam(4, 1, 11);
  auto f = random_tensor({1, 4, 8, 8}, 12);
  auto a = gam.spatial.forward(f);
  ASSERT_EQ(a.shape(), (Shape{1, 1, 8, 8}));
  auto ref = spatial_oracle(f, gam.spatial.conv.weight, gam.spatial.conv.bias[0]);
  EXPECT_LE(max_abs_diff(a.data(), ref), 1e-12);
}

TEST(SpatialAttention, ChannelPermutationInvariant) {
  auto gam = make_gam(5, 1, 13);
  auto f = random_tensor({1, 5, 4, 4}, 14);
  auto permuted = f.clone();
  const std::size_t order[5] = {3, 0, 4, 1, 2};
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t p = 0; p < 16; ++p) permuted[c * 16 + p] = f[order[c] * 16 + p];
  EXPECT_LE(max_abs_diff(gam.spatial.forward(f).data(), gam.spatial.forward(permuted).data()), 1e-14);
}

TEST(GroupedAttention, ZeroInputGivesZero) {
  auto gam = make_gam(4, 2, 15);
  auto y = gam.forward(Tensor::zeros({2, 4, 3, 3}));
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(GroupedAttention, HalfGatesQuarterOutput) {
  auto gam = make_gam(4, 4, 16);
  zero_weights(gam);
  auto f = random_tensor({2, 4, 3, 5}, 17);
  auto y = gam.forward(f);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.25 * f[i]);
}

TEST(GroupedAttention, ShapePreservedAndAttenuating) {
  for (std::size_t groups : {1u, 2u, 4u}) {
    for (Shape s : {Shape{1, 4, 5, 5}, Shape{3, 8, 2, 7}, Shape{2, 16, 1, 1}}) {
      auto gam = make_gam(s[1], groups, 18 + groups);
      auto f = random_tensor(s, 19, -3, 3);
      auto y = gam.forward(f);
      ASSERT_EQ(y.shape(), f.shape());
      for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(f[i]));
    }
  }
}

TEST(GroupedAttention, GradientMatchesFiniteDifference) {
  for (std::size_t groups : {1u, 2u, 4u}) {
    auto gam = make_gam(4, groups, 20);
    auto fn = [&](const Tensor& x) { return probe_loss(gam.forward(x)); };
    EXPECT_LE(grad_check<double>(fn, random_tensor({1, 4, 5, 5}, 21)).max_relative_error, 1e-4);
    auto wfn = [&](const Tensor& w) {
      auto saved = gam.channel.fc.weight;
      gam.channel.fc.weight = w;
      auto out = probe_loss(gam.forward(random_tensor({1, 4, 5, 5}, 21)));
      gam.channel.fc.weight = saved;
      return out;
    };
    EXPECT_LE(grad_check<double>(wfn, gam.channel.fc.weight).max_relative_error, 1e-4);
    auto cfn = [&](const Tensor& w) {
      auto saved = gam.spatial.conv.weight;
      gam.spatial.conv.weight = w;
      auto out = probe_loss(gam.forward(random_tensor({1, 4, 5, 5}, 21)));
      gam.spatial.conv.weight = saved;
      return out;
    };
    EXPECT_LE(grad_check<double>(cfn, gam.spatial.conv.weight).max_relative_error, 1e-4);
  }
}

TEST(AttentionExport, MinMaxPixels) {
  auto img = attention_map_image(Tensor({1, 1, 2, 2}, {0, 1, 0.5, 0.25}), 0);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 255, 127, 63}));
  auto flat = attention_map_image(Tensor::full({2, 1, 3, 3}, 0.4), 1);
  for (auto p : flat.pixels) EXPECT_EQ(p, 0);
  try {
    attention_map_image(Tensor::full({2, 1, 3, 3}, 0.4), 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
  }
}

TEST(AttentionExport, FileRoundTripPreservesOrder) {
  auto maps = random_tensor({2, 1, 6, 4}, 30, 0.0, 1.0);
  const auto path = std::filesystem::temp_directory_path() / "gamreid_attn_test.pgm";
  export_attention_map(maps, 1, path);
  auto img = read_pgm(path);
  ASSERT_EQ(img.width, 4u);
  ASSERT_EQ(img.height, 6u);
  for (std::size_t i = 0; i < 24; ++i)
    for (std::size_t j = 0; j < 24; ++j)
      if (maps[24 + i] < maps[24 + j]) {
        EXPECT_LE(img.pixels[i], img.pixels[j]);
      }
  std::filesystem::remove(path);
}
