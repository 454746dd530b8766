#include <gtest/gtest.h>

#include <cmath>

#include "nexop/forward.hpp"
#include "oracles.hpp"

using namespace nexop;
using namespace nexop::forward;

namespace {

double inner(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

SensitivitySet random_coils(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  return {oracle::random_tensor({c, 2, h, w}, seed)};
}

}  // namespace

TEST(Measure, FullMaskIsPlainFft) {
  const Tensor x = oracle::random_tensor({3, 2, 8, 6}, 1);
  const auto y = measure(x, Tensor({3, 8, 6}, 1.0), {}, {});
  for (std::size_t n = 0; n < 3; ++n) {
    ComplexImage img(8, 6);
    for (std::size_t i = 0; i < 48; ++i) img.set(i, {x[2 * n * 48 + i], x[(2 * n + 1) * 48 + i]});
    const ComplexImage ref = oracle::naive_fft2c(img);
    for (std::size_t i = 0; i < 48; ++i) {
      EXPECT_NEAR(y.data[2 * n * 48 + i], ref.re[i], 1e-12);
      EXPECT_NEAR(y.data[(2 * n + 1) * 48 + i], ref.im[i], 1e-12);
    }
  }
}

TEST(Measure, ZeroMaskGivesZero) {
  const auto y = measure(oracle::random_tensor({2, 2, 8, 8}, 2), Tensor({2, 8, 8}), {}, {0.3, 4});
  EXPECT_EQ(squared_norm(y.data.data()), 0.0);
}

TEST(Measure, NoiseVariance) {
  const double sigma = 0.1;
  double s2 = 0;
  std::size_t n = 0;
  for (std::uint64_t seed = 0; n < 100000; ++seed) {
    const auto y = measure(Tensor({1, 2, 64, 64}), Tensor({1, 64, 64}, 1.0), {}, {sigma, seed});
    for (double v : y.data.vec()) s2 += v * v;
    n += y.data.size();
  }
  EXPECT_NEAR(s2 / static_cast<double>(n), sigma * sigma, 0.03 * sigma * sigma);
}

TEST(Measure, NoiseOnlyWhereSampled) {
  const Tensor m = oracle::random_mask({2, 8, 8}, 3);
  const auto y = measure(Tensor({2, 2, 8, 8}), m, {}, {1.0, 5});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 2; ++p)
      for (std::size_t i = 0; i < 64; ++i)
        if (m[n * 64 + i] == 0) {
          EXPECT_EQ(y.data[(2 * n + p) * 64 + i], 0.0);
        }
}

TEST(Measure, NoiseIndependentAcrossRepetitionsAndReproducible) {
  double sab = 0, saa = 0, sbb = 0;
  std::size_t n = 0;
  const std::size_t hw = 64 * 64;
  for (std::uint64_t seed = 0; n < 100000; ++seed) {
    const auto y = measure(Tensor({2, 2, 64, 64}), Tensor({2, 64, 64}, 1.0), {}, {1.0, seed});
    for (std::size_t i = 0; i < 2 * hw; ++i) {
      const double a = y.data[i], b = y.data[2 * hw + i];
      sab += a * b;
      saa += a * a;
      sbb += b * b;
    }
    n += 2 * hw;
  }
  EXPECT_LT(std::abs(sab / std::sqrt(saa * sbb)), 3.0 / std::sqrt(static_cast<double>(n)));
  const auto y1 = measure(Tensor({2, 2, 8, 8}), Tensor({2, 8, 8}, 1.0), {}, {1.0, 9});
  const auto y2 = measure(Tensor({2, 2, 8, 8}), Tensor({2, 8, 8}, 1.0), {}, {1.0, 9});
  EXPECT_TRUE(y1.data == y2.data);
}

TEST(Measure, ShapeMismatchThrows) {
  EXPECT_THROW(measure(Tensor({2, 2, 8, 8}), Tensor({3, 8, 8}, 1.0), {}, {}), ConfigError);
  EXPECT_THROW(measure(Tensor({2, 8, 8}), Tensor({2, 8, 8}, 1.0), {}, {}), ConfigError);
  EXPECT_THROW(measure(Tensor({1, 2, 8, 8}), Tensor({1, 8, 8}, 1.0), random_coils(2, 4, 4, 1), {}), ConfigError);
}

TEST(Adjoint, InvertsFullSampling) {
  const Tensor x = oracle::random_tensor({3, 2, 16, 12}, 4);
  const Tensor back = adjoint(measure(x, Tensor({3, 16, 12}, 1.0), {}, {}), {});
  EXPECT_LT(max_abs_diff(back, x), 1e-12);
}

TEST(Adjoint, ZeroInZeroOut) {
  const Tensor out = adjoint(Tensor({2 * 2, 2, 8, 8}), random_coils(2, 8, 8, 2));
  EXPECT_EQ(out.dim(0), 2u);
  EXPECT_EQ(squared_norm(out.data()), 0.0);
}

TEST(Adjoint, InnerProductIdentityWithCoils) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const SensitivitySet coils = random_coils(2, 12, 10, 100 + s);
    const Tensor x = oracle::random_tensor({3, 2, 12, 10}, 200 + s);
    const Tensor m = oracle::random_mask({3, 12, 10}, 300 + s);
    Tensor y = oracle::random_tensor({6, 2, 12, 10}, 400 + s);
    const double lhs = inner(measure(x, m, coils, {}).data, y);
    apply_masks(y, m, 2);
    const double rhs = inner(x, adjoint(y, coils));
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(Measure, MaskingIsIdempotent) {
  const Tensor m = oracle::random_mask({2, 8, 8}, 6);
  const auto y = measure(oracle::random_tensor({2, 2, 8, 8}, 7), m, random_coils(3, 8, 8, 8), {0.2, 1});
  Tensor again = y.data;
  apply_masks(again, m, 3);
  EXPECT_TRUE(again == y.data);
}

// AᴴMA assembled column by column from the operator and compared with the
// dense DFT-matrix form Fᴴ diag(m) F.
TEST(NormalOperator, DenseMatrixSelfAdjointPsd) {
  const std::size_t h = 16, w = 16, d = h * w;
  const Tensor m = oracle::random_mask({1, h, w}, 11);
  const Eigen::MatrixXcd f = oracle::dft_matrix(h, w);
  Eigen::VectorXcd mv(static_cast<long>(d));
  for (std::size_t i = 0; i < d; ++i) mv(static_cast<long>(i)) = m[i];
  const Eigen::MatrixXcd ref = f.adjoint() * mv.asDiagonal() * f;

  Eigen::MatrixXd real_op(2 * d, 2 * d);
  for (std::size_t j = 0; j < 2 * d; ++j) {
    Tensor e({1, 2, h, w});
    e[j] = 1.0;
    const Tensor col = adjoint(measure(e, m, {}, {}), {});
    for (std::size_t i = 0; i < 2 * d; ++i) real_op(static_cast<long>(i), static_cast<long>(j)) = col[i];
  }
  // Real embedding of the complex oracle: [[Re, −Im], [Im, Re]].
  Eigen::MatrixXd ref_real(2 * d, 2 * d);
  const long n = static_cast<long>(d);
  ref_real.topLeftCorner(n, n) = ref.real();
  ref_real.topRightCorner(n, n) = -ref.imag();
  ref_real.bottomLeftCorner(n, n) = ref.imag();
  ref_real.bottomRightCorner(n, n) = ref.real();
  EXPECT_LT((real_op - ref_real).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((real_op - real_op.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (real_op + real_op.transpose()));
  EXPECT_GT(eig.eigenvalues().minCoeff(), -1e-10);
  EXPECT_LT(eig.eigenvalues().maxCoeff(), 1.0 + 1e-10);

  // Linearity.
  const Tensor a = oracle::random_tensor({1, 2, h, w}, 12), b = oracle::random_tensor({1, 2, h, w}, 13);
  Tensor combo = a;
  combo *= 2.0;
  combo += b;
  Tensor expect = adjoint(measure(a, m, {}, {}), {});
  expect *= 2.0;
  expect += adjoint(measure(b, m, {}, {}), {});
  EXPECT_LT(max_abs_diff(adjoint(measure(combo, m, {}, {}), {}), expect), 1e-12);
}

TEST(Differentiable, MatchesPlainOperators) {
  const SensitivitySet coils = random_coils(2, 8, 8, 20);
  const Tensor x = oracle::random_tensor({3, 2, 8, 8}, 21), m = oracle::random_mask({3, 8, 8}, 22);
  ad::Tape tape;
  const ad::Var y = measure(tape.variable(x), tape.constant(m), coils);
  EXPECT_LT(max_abs_diff(y.value(), measure(x, m, coils, {}).data), 1e-14);
  EXPECT_LT(max_abs_diff(adjoint(y, coils).value(), adjoint(y.value(), coils)), 1e-14);
}

TEST(Differentiable, GradientCheckWithCoils) {
  const SensitivitySet coils = random_coils(2, 6, 6, 30);
  const Tensor x = oracle::random_tensor({2, 2, 6, 6}, 31), m = oracle::random_mask({2, 6, 6}, 32);
  const Tensor target = oracle::random_tensor({2, 2, 6, 6}, 33);
  const auto r = ad::grad_check(
      [&](ad::Tape& t, std::span<const ad::Var> v) {
        const ad::Var back = adjoint(measure(v[0], v[1], coils), coils);
        return ad::mse(back, t.constant(target));
      },
      {x, m}, 1e-5);
  EXPECT_TRUE(r.ok(1e-7)) << r.max_rel_error;
}
