#include <gtest/gtest.h>

#include <cmath>

#include "nexop/analysis.hpp"
#include "oracles.hpp"

using namespace nexop;
using namespace nexop::analysis;

namespace {

// Direct 10×10 box sum over offsets −5..+4, zero outside.
Tensor box_oracle(const Tensor& m) {
  const long h = long(m.dim(0)), w = long(m.dim(1));
  Tensor out(m.shape());
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c)
      for (long a = r - 5; a <= r + 4; ++a)
        for (long b = c - 5; b <= c + 4; ++b)
          if (a >= 0 && b >= 0 && a < h && b < w) out.at(r, c) += m.at(a, b) / 100.0;
  return out;
}

Tensor gaussian_blob(std::size_t h, std::size_t w, double cy, double cx, double sy, double sx) {
  Tensor t({h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      t.at(r, c) = std::exp(-0.5 * (std::pow((double(r) - cy) / sy, 2) + std::pow((double(c) - cx) / sx, 2)));
  return t;
}

}  // namespace

TEST(Smooth, ConstantStaysConstantInInterior) {
  const Tensor s = smooth_map(Tensor({30, 30}, 0.4));
  for (std::size_t r = 5; r < 26; ++r)
    for (std::size_t c = 5; c < 26; ++c) EXPECT_NEAR(s.at(r, c), 0.4, 1e-15);
  EXPECT_LT(s.at(0, 0), 0.4);
}

TEST(Smooth, ImpulseSpreadsOverSupport) {
  Tensor m({30, 30});
  m.at(15, 15) = 1.0;
  const Tensor s = smooth_map(m);
  double total = 0;
  for (std::size_t r = 0; r < 30; ++r)
    for (std::size_t c = 0; c < 30; ++c) {
      // Output (r,c) sees the impulse when 15 − r ∈ [−5, 4].
      const bool in = r >= 11 && r <= 20 && c >= 11 && c <= 20;
      EXPECT_NEAR(s.at(r, c), in ? 0.01 : 0.0, 1e-15);
      total += s.at(r, c);
    }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Smooth, MatchesDirectConvolution) {
  const Tensor m = oracle::random_tensor({23, 17}, 1, 0.0, 1.0);
  const Tensor s = smooth_map(m);
  EXPECT_LT(max_abs_diff(s, box_oracle(m)), 1e-14);
  EXPECT_LE(s.sum(), m.sum() + 1e-12);
}

TEST(Normalize, SumsToOneAndScaleInvariant) {
  const Tensor m = oracle::random_tensor({12, 9}, 2, 0.0, 3.0);
  const Tensor p = normalize_distribution(m);
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
  Tensor m7 = m;
  m7 *= 7.0;
  EXPECT_LT(max_abs_diff(normalize_distribution(m7), p), 1e-16);
  Tensor delta({5, 5});
  delta.at(2, 3) = 4.0;
  EXPECT_EQ(normalize_distribution(delta).at(2, 3), 1.0);
  EXPECT_THROW(normalize_distribution(Tensor({3, 3})), NumericError);
}

TEST(Moments, DeltaHasZeroSpread) {
  Tensor d({10, 12});
  d.at(3, 7) = 1.0;
  const MomentSummary s = marginal_std(d);
  EXPECT_EQ(s.mean_u, 7.0);
  EXPECT_EQ(s.mean_v, 3.0);
  EXPECT_EQ(s.sigma_u, 0.0);
  EXPECT_EQ(s.sigma_v, 0.0);
}

TEST(Moments, UniformAxisClosedForm) {
  const Tensor u = normalize_distribution(Tensor({4, 256}, 1.0));
  const MomentSummary s = marginal_std(u);
  EXPECT_NEAR(s.sigma_u, std::sqrt((256.0 * 256.0 - 1.0) / 12.0), 1e-9);
  EXPECT_NEAR(s.sigma_u, 73.9, 0.05);
  EXPECT_NEAR(s.sigma_v, std::sqrt((16.0 - 1.0) / 12.0), 1e-12);
}

TEST(Moments, SeparableProductMatchesPerAxis) {
  const Tensor pu = oracle::random_tensor({1, 20}, 3, 0.0, 1.0), pv = oracle::random_tensor({15, 1}, 4, 0.0, 1.0);
  Tensor joint({15, 20});
  for (std::size_t r = 0; r < 15; ++r)
    for (std::size_t c = 0; c < 20; ++c) joint.at(r, c) = pv[r] * pu[c];
  auto axis_std = [](const Tensor& p) {
    const double total = p.sum();
    double m = 0, v = 0;
    for (std::size_t i = 0; i < p.size(); ++i) m += double(i) * p[i] / total;
    for (std::size_t i = 0; i < p.size(); ++i) v += (double(i) - m) * (double(i) - m) * p[i] / total;
    return std::sqrt(v);
  };
  const MomentSummary s = marginal_std(normalize_distribution(joint));
  EXPECT_NEAR(s.sigma_u, axis_std(pu), 1e-10);
  EXPECT_NEAR(s.sigma_v, axis_std(pv), 1e-10);
}

TEST(Moments, SmoothingAddsBoxVariance) {
  const Tensor raw = normalize_distribution(gaussian_blob(96, 96, 47.0, 48.0, 6.0, 4.0));
  const MomentSummary a = marginal_std(raw);
  const MomentSummary b = marginal_std(normalize_distribution(smooth_map(raw)));
  const double add = (100.0 - 1.0) / 12.0;
  EXPECT_NEAR(b.sigma_u * b.sigma_u, a.sigma_u * a.sigma_u + add, 0.01 * (a.sigma_u * a.sigma_u + add));
  EXPECT_NEAR(b.sigma_v * b.sigma_v, a.sigma_v * a.sigma_v + add, 0.01 * (a.sigma_v * a.sigma_v + add));
}

TEST(Moments, SpreadBoundedByHalfAxis) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const MomentSummary m = marginal_std(normalize_distribution(oracle::random_tensor({16, 24}, s, 0.0, 1.0)));
    EXPECT_GE(m.sigma_u, 0.0);
    EXPECT_LE(m.sigma_u, 12.0);
    EXPECT_LE(m.sigma_v, 8.0);
  }
}

TEST(Rates, FullAndAcsOnly) {
  const sampling::Grid g{16, 16, 3, {4, 4}};
  const auto full = per_nex_rates(Tensor({3, 16, 16}, 1.0), g);
  EXPECT_DOUBLE_EQ(full[0], 1.0 - 16.0 / 256.0);
  EXPECT_DOUBLE_EQ(full[1], 1.0);
  EXPECT_DOUBLE_EQ(full[2], 1.0);
  Tensor acs({3, 16, 16});
  for (std::size_t i = 0; i < 256; ++i) acs[i] = g.in_acs(i) ? 1.0 : 0.0;
  for (double r : per_nex_rates(acs, g)) EXPECT_EQ(r, 0.0);
}

TEST(Rates, RepeatedAcsExcludedWhereFlagged) {
  const sampling::Grid g{16, 16, 3, {4, 4}};
  const auto plan = sampling::baseline_mask_plan(sampling::Method::LoupeExt3, 4.0, g);
  const auto flags = acs_flags(plan);
  EXPECT_EQ(flags, (std::vector<bool>{true, true, true}));
  const auto r = per_nex_rates(Tensor({3, 16, 16}, 1.0), g, flags);
  for (double v : r) EXPECT_DOUBLE_EQ(v, 1.0 - 16.0 / 256.0);
  EXPECT_THROW(per_nex_rates(Tensor({3, 8, 8}), g), ConfigError);
}

TEST(Accumulate, Examples) {
  const Tensor m = oracle::random_mask({1, 6, 6}, 5);
  Tensor rep({3, 6, 6});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 36; ++i) rep[n * 36 + i] = m[i];
  Tensor three = m.reshaped({6, 6});
  three *= 3.0;
  EXPECT_TRUE(accumulate(rep) == three);

  Tensor disjoint({3, 6, 6});
  for (std::size_t i = 0; i < 36; ++i) disjoint[(i % 3) * 36 + i] = 1.0;
  EXPECT_TRUE(accumulate(disjoint) == Tensor({6, 6}, 1.0));

  const Tensor r = oracle::random_mask({3, 10, 8}, 6);
  const Tensor acc = accumulate(r);
  EXPECT_EQ(acc.sum(), total_samples(r));
  EXPECT_GE(acc.min(), 0.0);
  EXPECT_LE(acc.max(), 3.0);
  for (std::size_t i = 0; i < 80; ++i) EXPECT_EQ(acc[i], r[i] + r[80 + i] + r[160 + i]);
}

TEST(Acceleration, Examples) {
  const sampling::Grid small{16, 16, 3, {4, 4}};
  EXPECT_DOUBLE_EQ(acceleration({small, 3 * 256 - 16}), 1.0);
  const sampling::Grid full{256, 195, 3, {20, 20}};
  EXPECT_DOUBLE_EQ(acceleration({full, 24560}), 6.0);
  const double r1 = acceleration({small, 200}), r2 = acceleration({small, (200 + 16) / 2 - 16});
  EXPECT_DOUBLE_EQ(r2, 2 * r1);
}
