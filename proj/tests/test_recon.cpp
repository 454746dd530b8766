#include <gtest/gtest.h>

#include <cmath>

#include "nexop/recon.hpp"
#include "nexop/sampling.hpp"
#include "oracles.hpp"

using namespace nexop;
using namespace nexop::recon;

namespace {

ReconConfig small_config(std::size_t nex = 3) {
  ReconConfig c;
  c.nex = nex;
  c.hidden = 6;
  c.steps = 3;
  c.cg_iters = 50;
  c.cg_tol = 1e-12;
  return c;
}

// Planar stack with magnitudes bounded away from zero.
Tensor random_stack(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  Tensor t = oracle::random_tensor({n, 2, h, w}, seed);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < h * w; ++i) t[2 * k * h * w + i] += t[2 * k * h * w + i] >= 0 ? 0.5 : -0.5;
  return t;
}

Tensor mean_magnitude(const Tensor& stack) {
  const std::size_t n = stack.dim(0), h = stack.dim(2), w = stack.dim(3), hw = h * w;
  Tensor out({h, w});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < hw; ++i) out[i] += std::hypot(stack[2 * k * hw + i], stack[(2 * k + 1) * hw + i]);
  out *= 1.0 / static_cast<double>(n);
  return out;
}

double relative_diff(const Tensor& a, const Tensor& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST(Denoise, ZeroFinalLayerIsIdentity) {
  for (std::size_t nex : {1u, 2u, 3u}) {
    const ReconParams p = init_params(small_config(nex), 1);
    const Tensor mag = oracle::random_tensor({nex, 7, 5}, 2, 0.0, 1.0);
    const Tensor masks = oracle::random_mask({nex, 7, 5}, 3);
    const Tensor out = denoise(mag, &masks, p);
    EXPECT_EQ(out.shape(), mag.shape());
    EXPECT_TRUE(out == mag);
  }
}

TEST(Denoise, RandomWeightsKeepShape) {
  const ReconParams p = init_params(small_config(2), 4, false);
  const Tensor mag = oracle::random_tensor({2, 9, 11}, 5, 0.0, 1.0);
  const Tensor out = denoise(mag, nullptr, p);
  EXPECT_EQ(out.shape(), mag.shape());
  EXPECT_TRUE(out.all_finite());
  EXPECT_GT(max_abs_diff(out, mag), 0.0);
}

TEST(Denoise, KernelWeightGradient) {
  ReconConfig cfg = small_config(2);
  const ReconParams p = init_params(cfg, 6, false);
  const Tensor mag = oracle::random_tensor({2, 6, 6}, 7, 0.0, 1.0), masks = oracle::random_mask({2, 6, 6}, 8);
  const std::size_t layer = 2;
  const auto r = ad::grad_check(
      [&](ad::Tape& t, std::span<const ad::Var> v) {
        ParamVars pv = make_vars(t, p, false);
        pv.conv[2 * layer] = v[0];
        const ad::Var m = t.constant(mag);
        const ad::Var in = ad::concat(std::vector<ad::Var>{m, t.constant(masks)});
        return ad::sum(denoise(in, pv.conv, m));
      },
      {p.conv[2 * layer]}, 1e-5, {{0, 0}, {0, 7}, {0, 40}, {0, 100}});
  EXPECT_TRUE(r.ok(1e-6)) << r.max_rel_error;
}

TEST(DcCg, LargeLambdaReturnsZ) {
  const ComplexImage z = oracle::random_image(8, 8, 1);
  const ComplexImage y = oracle::random_image(8, 8, 2);
  const Tensor m = oracle::random_mask({8, 8}, 3);
  const auto r = dc_cg(z, std::span<const ComplexImage>(&y, 1), m, {}, 1e6, 10, 1e-6);
  EXPECT_LT(relative_diff(stack_planar(std::vector<ComplexImage>{r.x}), stack_planar(std::vector<ComplexImage>{z})),
            1e-4);
}

TEST(DcCg, FullMaskWithoutRegularizerInverts) {
  const ComplexImage z = oracle::random_image(8, 8, 4);
  const ComplexImage y = oracle::random_image(8, 8, 5);
  const auto r = dc_cg(z, std::span<const ComplexImage>(&y, 1), Tensor({8, 8}, 1.0), {}, 0.0, 10, 1e-12);
  const ComplexImage ref = oracle::naive_fft2c(y, true);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_LT(std::abs(r.x.get(i) - ref.get(i)), 1e-10);
}

TEST(DcCg, MatchesDenseSolve) {
  const std::size_t h = 16, w = 16, d = h * w;
  const Eigen::MatrixXcd f = oracle::dft_matrix(h, w);
  const double lambda = 0.05;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const ComplexImage z = oracle::random_image(h, w, 10 + s), y0 = oracle::random_image(h, w, 20 + s);
    const Tensor m = oracle::random_mask({h, w}, 30 + s);
    ComplexImage y = y0;
    for (std::size_t i = 0; i < d; ++i) y.set(i, y0.get(i) * m[i]);
    Eigen::VectorXcd mv(static_cast<long>(d));
    for (std::size_t i = 0; i < d; ++i) mv(static_cast<long>(i)) = m[i];
    const Eigen::MatrixXcd k =
        f.adjoint() * mv.asDiagonal() * f + lambda * Eigen::MatrixXcd::Identity(long(d), long(d));
    const Eigen::VectorXcd rhs = f.adjoint() * oracle::to_vector(y) + lambda * oracle::to_vector(z);
    const Eigen::VectorXcd x = k.partialPivLu().solve(rhs);
    const auto r = dc_cg(z, std::span<const ComplexImage>(&y, 1), m, {}, lambda, 200, 1e-13);
    EXPECT_LT((oracle::to_vector(r.x) - x).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(DcCg, ReportsNonConvergence) {
  const ComplexImage z = oracle::random_image(16, 16, 1), y = oracle::random_image(16, 16, 2);
  const auto r = dc_cg(z, std::span<const ComplexImage>(&y, 1), oracle::random_mask({16, 16}, 3), {}, 1e-3, 1, 1e-12);
  EXPECT_FALSE(r.report.converged);
  EXPECT_EQ(r.report.iterations, 1u);
  EXPECT_TRUE(r.x.re.all_finite());
}

TEST(DcCg, ImplicitGradientMatchesFiniteDifferences) {
  const std::size_t h = 6, w = 6;
  const forward::SensitivitySet coils{oracle::random_tensor({2, 2, h, w}, 40)};
  const Tensor z = oracle::random_tensor({2, 2, h, w}, 41), y = oracle::random_tensor({4, 2, h, w}, 42);
  const Tensor m = oracle::random_tensor({2, h, w}, 43, 0.0, 1.0);
  const Tensor lam = Tensor::scalar(0.3), target = oracle::random_tensor({2, 2, h, w}, 44);
  const auto r = ad::grad_check(
      [&](ad::Tape& t, std::span<const ad::Var> v) {
        const ad::Var x = data_consistency(v[0], v[1], v[2], v[3], coils, 400, 1e-14);
        return ad::mse(x, t.constant(target));
      },
      {z, y, m, lam}, 1e-5);
  EXPECT_TRUE(r.ok(1e-6)) << r.max_rel_error << " input " << r.worst_input;
}

TEST(MrStep, IdentityDenoiserWithStrongDcKeepsInput) {
  ReconConfig cfg = small_config();
  ReconParams p = init_params(cfg, 1);
  p.lambda = Tensor::scalar(1e6);
  const Tensor x = random_stack(3, 8, 8, 2), m = oracle::random_mask({3, 8, 8}, 3);
  ad::Tape tape;
  const ParamVars v = make_vars(tape, p, false);
  const forward::SensitivitySet s;
  const StepInputs in{tape.constant(forward::measure(random_stack(3, 8, 8, 4), m, s, {}).data), tape.constant(m), &s,
                      nullptr};
  const ad::Var out = mr_step(tape.constant(x), in, v, cfg, 0, true);
  EXPECT_LT(relative_diff(out.value(), x), 1e-4);
}

TEST(MrStep, PreservesPhaseWithoutDc) {
  ReconConfig cfg = small_config();
  const ReconParams p = init_params(cfg, 5, false);
  const Tensor x = random_stack(3, 8, 8, 6), m = oracle::random_mask({3, 8, 8}, 7);
  ad::Tape tape;
  const ParamVars v = make_vars(tape, p, false);
  const forward::SensitivitySet s;
  const StepInputs in{tape.constant(Tensor({3, 2, 8, 8})), tape.constant(m), &s, nullptr};
  const Tensor out = mr_step(tape.constant(x), in, v, cfg, 0, false).value();
  const std::size_t hw = 64;
  std::size_t checked = 0;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < hw; ++i) {
      const std::complex<double> a{x[2 * k * hw + i], x[(2 * k + 1) * hw + i]};
      const std::complex<double> b{out[2 * k * hw + i], out[(2 * k + 1) * hw + i]};
      if (std::abs(a) <= 1e-8 || std::abs(b) <= 1e-8) continue;
      // b is a real multiple of a.
      EXPECT_LE(std::abs(std::imag(b * std::conj(a))), 1e-12 * std::abs(a) * std::abs(b));
      if (std::real(b * std::conj(a)) > 0) {
        EXPECT_NEAR(std::arg(b), std::arg(a), 1e-12);
        ++checked;
      }
    }
  EXPECT_GT(checked, 100u);
}

TEST(Reconstruct, ZeroInitFullSamplingRecoversTarget) {
  for (bool masks_in : {true, false}) {
    ReconConfig cfg = small_config();
    cfg.steps = 5;
    cfg.mask_channels = masks_in;
    const ReconParams p = init_params(cfg, 3);
    const Tensor x = random_stack(3, 12, 10, 9), m({3, 12, 10}, 1.0);
    const Tensor y = forward::measure(x, m, {}, {}).data;
    const Tensor out = reconstruct(y, m, {}, p);
    ASSERT_EQ(out.shape(), (Shape{12, 10}));
    EXPECT_LT(max_abs_diff(out, mean_magnitude(x)), 1e-6);
  }
}

TEST(Reconstruct, OutputShapeIndependentOfNex) {
  for (std::size_t nex : {1u, 2u, 4u}) {
    const ReconParams p = init_params(small_config(nex), 1, false);
    const Tensor m = oracle::random_mask({nex, 8, 6}, 2);
    const Tensor out = reconstruct(forward::measure(random_stack(nex, 8, 6, 3), m, {}, {}).data, m, {}, p);
    EXPECT_EQ(out.shape(), (Shape{8, 6}));
  }
}

TEST(Reconstruct, DcUndoesDenoiserOnFullSampling) {
  ReconConfig cfg = small_config();
  cfg.steps = 4;
  cfg.shared_weights = false;
  cfg.lambda_init = 1e-9;
  ReconParams p = init_params(cfg, 11, false);
  // The final step has no DC, so its denoiser must be the identity.
  const std::size_t per = p.tensors_per_denoiser();
  p.conv[3 * per + per - 2].fill(0.0);
  p.conv[3 * per + per - 1].fill(0.0);
  const Tensor x = random_stack(3, 8, 8, 12), m({3, 8, 8}, 1.0);
  const Tensor out = reconstruct(forward::measure(x, m, {}, {}).data, m, {}, p);
  EXPECT_LT(max_abs_diff(out, mean_magnitude(x)), 1e-6);
}

TEST(Reconstruct, NonnegativeAndFinite) {
  const ReconParams p = init_params(small_config(), 13, false);
  const Tensor m = oracle::random_mask({3, 10, 10}, 14, 0.3);
  const Tensor out = reconstruct(forward::measure(random_stack(3, 10, 10, 15), m, {}, {0.2, 1}).data, m, {}, p);
  EXPECT_TRUE(out.all_finite());
  EXPECT_GE(out.min(), 0.0);
}

// Channel-tied weights: the first layer sees the sum over repetitions and the
// last layer writes the same value to every repetition, so the denoiser
// commutes with any permutation of the repetitions.
TEST(Reconstruct, InvariantToRepetitionOrderWithTiedWeights) {
  ReconConfig cfg = small_config();
  ReconParams p = init_params(cfg, 16, false);
  const std::size_t nex = 3, hid = cfg.hidden, k2 = cfg.kernel * cfg.kernel;
  Tensor& w0 = p.conv[0];
  for (std::size_t o = 0; o < hid; ++o)
    for (std::size_t i = 0; i < 2 * nex; ++i)
      for (std::size_t e = 0; e < k2; ++e) w0[(o * 2 * nex + i) * k2 + e] = w0[(o * 2 * nex + (i < nex ? 0 : nex)) * k2 + e];
  Tensor& wl = p.conv[2 * (cfg.layers - 1)];
  Tensor& bl = p.conv[2 * (cfg.layers - 1) + 1];
  for (double& v : wl.vec()) v *= 0.1;
  for (std::size_t o = 0; o < nex; ++o) {
    for (std::size_t i = 0; i < hid * k2; ++i) wl[o * hid * k2 + i] = wl[i];
    bl[o] = 0.01;
  }
  const Tensor x = random_stack(3, 8, 8, 17), m = oracle::random_mask({3, 8, 8}, 18);
  const Tensor y = forward::measure(x, m, {}, {0.05, 2}).data;
  const Tensor out = reconstruct(y, m, {}, p);

  const std::size_t perm[3] = {2, 0, 1}, hw = 64;
  Tensor yp(y.shape()), mp(m.shape());
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < 2 * hw; ++i) yp[2 * k * hw + i] = y[2 * perm[k] * hw + i];
    for (std::size_t i = 0; i < hw; ++i) mp[k * hw + i] = m[perm[k] * hw + i];
  }
  EXPECT_LT(max_abs_diff(reconstruct(yp, mp, {}, p), out), 1e-12);
}

TEST(Reconstruct, DeterministicRepeatedRuns) {
  const ReconParams p = init_params(small_config(), 19, false);
  const Tensor m = oracle::random_mask({3, 8, 8}, 20);
  const Tensor y = forward::measure(random_stack(3, 8, 8, 21), m, {}, {0.1, 3}).data;
  EXPECT_TRUE(reconstruct(y, m, {}, p) == reconstruct(y, m, {}, p));
}

TEST(Reconstruct, SamplingGradientSurvives) {
  const sampling::Grid g{8, 8, 3, {2, 2}};
  const auto plan = sampling::baseline_mask_plan(sampling::Method::NexOP, 3.0, g);
  const Tensor psi = oracle::random_tensor({plan.logit_count}, 22, -1, 1);
  const ReconParams p = init_params(small_config(), 23, false);
  const Tensor x = random_stack(3, 8, 8, 24), target = mean_magnitude(x);
  const Tensor full = forward::measure(x, Tensor({3, 8, 8}, 1.0), {}, {}).data;
  const forward::SensitivitySet s;
  ad::Tape tape;
  const ad::Var l = tape.variable(psi);
  const auto dm = sampling::sample_masks(tape, l, plan, sampling::make_draw(plan.logit_count, 0.5, 1, 1),
                                         sampling::MaskMode::Hard);
  const ad::Var y = ad::cscale(tape.constant(full), dm.masks);
  const ParamVars v = make_vars(tape, p, true);
  const ad::Var out = reconstruct(StepInputs{y, dm.masks, &s, nullptr}, v, p.config);
  tape.backward(ad::mse(out, tape.constant(target)));
  EXPECT_GT(squared_norm(tape.gradient(l).data()), 0.0);
  EXPECT_NE(tape.gradient(v.lambda)[0], 0.0);
}

TEST(Reconstruct, EndToEndGradientCheck) {
  ReconConfig cfg = small_config();
  cfg.steps = 5;
  cfg.cg_iters = 200;
  cfg.cg_tol = 1e-14;
  const ReconParams p = init_params(cfg, 25, false);
  const Tensor x = random_stack(3, 8, 8, 26), target = mean_magnitude(x);
  const Tensor full = forward::measure(x, Tensor({3, 8, 8}, 1.0), {}, {0.05, 4}).data;
  const Tensor soft = oracle::random_tensor({3, 8, 8}, 27, 0.1, 0.9);
  const forward::SensitivitySet s;
  const auto r = ad::grad_check(
      [&](ad::Tape& t, std::span<const ad::Var> v) {
        ParamVars pv = make_vars(t, p, false);
        pv.conv[2] = v[1];
        pv.lambda = v[2];
        const ad::Var y = ad::cscale(t.constant(full), v[0]);
        return ad::mse(reconstruct(StepInputs{y, v[0], &s, nullptr}, pv, cfg), t.constant(target));
      },
      {soft, p.conv[2], p.lambda}, 1e-5,
      {{0, 0}, {0, 17}, {0, 63}, {0, 100}, {0, 191}, {1, 3}, {1, 50}, {1, 200}, {2, 0}});
  EXPECT_TRUE(r.ok(1e-4)) << r.max_rel_error << " input " << r.worst_input << " index " << r.worst_index;
}
