#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "nexop/phantom.hpp"
#include "oracles.hpp"

using namespace nexop;
using namespace nexop::phantom;
namespace fs = std::filesystem;

TEST(Phantom, ZeroEllipsesGiveZeroImage) {
  PhantomSpec s;
  s.min_ellipses = s.max_ellipses = 0;
  EXPECT_EQ(generate_phantom(s).squared_norm(), 0.0);
}

TEST(Phantom, SameSeedBitIdentical) {
  PhantomSpec s;
  s.seed = 42;
  const ComplexImage a = generate_phantom(s), b = generate_phantom(s);
  EXPECT_TRUE(a.re == b.re);
  EXPECT_TRUE(a.im == b.im);
  s.seed = 43;
  EXPECT_FALSE(generate_phantom(s).re == a.re);
}

TEST(Phantom, MagnitudeInUnitRange) {
  PhantomSpec s;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    s.seed = seed;
    const Tensor m = generate_phantom(s).magnitude();
    EXPECT_LE(m.max(), 1.0 + 1e-12);
    EXPECT_GT(m.max(), 0.99);
    EXPECT_GE(m.min(), 0.0);
  }
}

TEST(Phantom, PhaseIsSmooth) {
  PhantomSpec s;
  s.seed = 3;
  const ComplexImage x = generate_phantom(s);
  // Neighbouring phase differences stay small wherever both pixels carry signal.
  double worst = 0;
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c + 1 < 32; ++c) {
      const auto a = x.get(r * 32 + c), b = x.get(r * 32 + c + 1);
      if (std::abs(a) < 1e-6 || std::abs(b) < 1e-6) continue;
      worst = std::max(worst, std::abs(std::arg(b * std::conj(a))));
    }
  EXPECT_LT(worst, 0.3);
}

TEST(MultiNex, NoiselessTargetIsMagnitude) {
  PhantomSpec s;
  s.seed = 4;
  const ComplexImage x = generate_phantom(s);
  const MultiNexSample m = make_multinex(x, 0.0, 3, 1);
  EXPECT_LT(max_abs_diff(m.target, x.magnitude()), 1e-12);
  EXPECT_THROW(make_multinex(x, -1.0, 3, 1), ConfigError);
}

TEST(MultiNex, AveragingGainNearSqrtNex) {
  const double sigma = 0.2;
  double e_single = 0, e_mean = 0;
  PhantomSpec s;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    s.seed = seed;
    const ComplexImage x = generate_phantom(s);
    const Tensor truth = x.magnitude();
    const MultiNexSample m = make_multinex(x, sigma, 3, 1000 + seed);
    const std::size_t hw = truth.size();
    for (std::size_t i = 0; i < hw; ++i) {
      if (truth[i] < 0.4) continue;  // keep to pixels well above the Rician floor
      const double single = std::hypot(m.images[i], m.images[hw + i]);
      e_single += (single - truth[i]) * (single - truth[i]);
      e_mean += (m.target[i] - truth[i]) * (m.target[i] - truth[i]);
    }
  }
  const double gain = std::sqrt(e_single / e_mean);
  EXPECT_NEAR(gain, std::sqrt(3.0), 0.1 * std::sqrt(3.0)) << gain;
}

TEST(MultiNex, NoiseIndependentAcrossRepetitions) {
  PhantomSpec s;
  s.seed = 5;
  s.height = s.width = 64;
  const ComplexImage x = generate_phantom(s);
  const MultiNexSample m = make_multinex(x, 1.0, 2, 7);
  const ComplexImage k = fft2c(x);
  const std::size_t hw = 64 * 64;
  double s12 = 0, s11 = 0, s22 = 0;
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t i = 0; i < hw; ++i) {
      const double clean = p == 0 ? k.re[i] : k.im[i];
      const double a = m.kspace[p * hw + i] - clean, b = m.kspace[(2 + p) * hw + i] - clean;
      s12 += a * b;
      s11 += a * a;
      s22 += b * b;
    }
  EXPECT_LT(std::abs(s12) / std::sqrt(s11 * s22), 3.0 / std::sqrt(static_cast<double>(hw)));
}

TEST(MultiNex, TargetNonnegativeAndFinite) {
  PhantomSpec s;
  s.seed = 6;
  for (double sigma : {0.0, 0.1, 1.0, 50.0}) {
    const MultiNexSample m = make_multinex(generate_phantom(s), sigma, 3, 2);
    EXPECT_GE(m.target.min(), 0.0);
    EXPECT_TRUE(m.target.all_finite());
  }
}

TEST(Dataset, SplitsDisjointAndRegenerable) {
  PhantomSpec spec;
  spec.height = spec.width = 16;
  const DatasetManifest m = make_manifest(spec, 3, 0.1, 9, 6, 3, 4);
  std::set<std::uint64_t> seeds;
  for (const auto* split : {&m.train, &m.val, &m.test})
    for (const auto& e : *split) EXPECT_TRUE(seeds.insert(e.phantom_seed).second);
  EXPECT_EQ(seeds.size(), 13u);
  const Dataset a = generate_dataset(m), b = generate_dataset(manifest_from_json(to_json(m)));
  ASSERT_EQ(a.test.size(), 4u);
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    EXPECT_TRUE(a.test[i].data.kspace == b.test[i].data.kspace);
    EXPECT_TRUE(a.test[i].data.target == b.test[i].data.target);
  }
  EXPECT_THROW(a.split("holdout"), ConfigError);
}

TEST(Dataset, WriteReadRoundTripBitExact) {
  PhantomSpec spec;
  spec.height = 12;
  spec.width = 10;
  const Dataset d = generate_dataset(make_manifest(spec, 3, 0.2, 4, 2, 1, 1));
  const fs::path dir = fs::temp_directory_path() / "nexop_test_dataset";
  fs::remove_all(dir);
  write_dataset(dir, d);
  const Dataset back = read_dataset(dir);
  ASSERT_EQ(back.train.size(), 2u);
  for (const std::string split : {"train", "val", "test"})
    for (std::size_t i = 0; i < d.split(split).size(); ++i) {
      const auto &x = d.split(split)[i], &y = back.split(split)[i];
      EXPECT_EQ(x.info.phantom_seed, y.info.phantom_seed);
      EXPECT_TRUE(x.data.kspace == y.data.kspace);
      EXPECT_TRUE(x.data.target == y.data.target);
      EXPECT_LT(max_abs_diff(x.data.images, y.data.images), 1e-15);
    }
}

TEST(Dataset, CorruptFilesRejected) {
  PhantomSpec spec;
  spec.height = spec.width = 8;
  const Dataset d = generate_dataset(make_manifest(spec, 2, 0.1, 1, 1, 0, 0));
  const fs::path dir = fs::temp_directory_path() / "nexop_test_corrupt";
  fs::remove_all(dir);
  write_dataset(dir, d);
  const fs::path rep = dir / "train" / "0000_rep1.nxt";
  {
    std::fstream f(rep, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('Z');
  }
  EXPECT_THROW(read_dataset(dir), FormatError);
  write_dataset(dir, d);
  fs::resize_file(rep, 20);
  try {
    read_dataset(dir);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "manifest.json") << "{\"format\": \"other\"}";
  EXPECT_THROW(read_dataset(dir), FormatError);
}
