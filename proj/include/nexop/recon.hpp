#pragma once

// Unrolled multi-repetition reconstruction network.
//
// Each MR step splits the repetition stack into magnitude and phase, runs a
// residual CNN over the magnitude channels, restores the phase per repetition
// and pulls every repetition back towards its own measurements with a
// conjugate-gradient data-consistency solve. The last step skips the solve and
// the fuser averages the repetition magnitudes.

#include <cmath>
#include <complex>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "nexop/autodiff.hpp"
#include "nexop/fft.hpp"
#include "nexop/forward.hpp"
#include "nexop/random.hpp"
#include "nexop/tensor.hpp"

namespace nexop::recon {

struct ReconConfig {
  std::size_t nex = 3;
  std::size_t hidden = 16;   // feature channels of the denoiser
  std::size_t layers = 5;    // conv layers per denoiser
  std::size_t kernel = 3;
  std::size_t steps = 5;     // MR steps
  std::size_t cg_iters = 10;
  double cg_tol = 1e-6;      // relative residual
  double lambda_init = 0.05;
  double lambda_min = 1e-4;  // floor applied after optimizer updates
  double delta = 1e-12;      // magnitude regularizer inside MR steps
  bool shared_weights = true;
  bool mask_channels = true; // masks enter the first step as extra channels

  std::size_t input_channels() const { return mask_channels ? 2 * nex : nex; }
  std::size_t denoisers() const { return shared_weights ? 1 : steps; }

  void validate() const {
    if (nex == 0 || hidden == 0 || steps == 0 || kernel % 2 == 0 || layers < 2)
      throw ConfigError("invalid reconstruction configuration");
    if (!(lambda_init > 0)) throw ConfigError("DC weight lambda must be positive");
  }
};

/// θ: conv weights/biases for each denoiser instance plus the DC weight λ.
struct ReconParams {
  ReconConfig config;
  std::vector<Tensor> conv;  // [w0, b0, w1, b1, ...] for each denoiser instance
  Tensor lambda = Tensor::scalar(0.05);

  std::size_t tensors_per_denoiser() const { return 2 * config.layers; }

  /// Every trainable tensor, conv first, λ last.
  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (auto& t : conv) out.push_back(&t);
    out.push_back(&lambda);
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for (const auto& t : conv) out.push_back(&t);
    out.push_back(&lambda);
    return out;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (std::size_t d = 0; d < config.denoisers(); ++d)
      for (std::size_t l = 0; l < config.layers; ++l) {
        out.push_back("d" + std::to_string(d) + "_conv" + std::to_string(l) + "_w");
        out.push_back("d" + std::to_string(d) + "_conv" + std::to_string(l) + "_b");
      }
    out.push_back("lambda");
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* t : tensors()) n += t->size();
    return n;
  }
};

/// He-normal conv weights, zero biases. With zero_last the final layer starts
/// at zero so every denoiser is the identity map.
inline ReconParams init_params(const ReconConfig& cfg, std::uint64_t seed, bool zero_last = true) {
  cfg.validate();
  ReconParams p;
  p.config = cfg;
  p.lambda = Tensor::scalar(cfg.lambda_init);
  Rng rng(seed, 0x7468657461ull);
  for (std::size_t d = 0; d < cfg.denoisers(); ++d)
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::size_t in = l == 0 ? cfg.input_channels() : cfg.hidden;
      const std::size_t out = l + 1 == cfg.layers ? cfg.nex : cfg.hidden;
      Tensor w({out, in, cfg.kernel, cfg.kernel});
      const bool zero = zero_last && l + 1 == cfg.layers;
      const double std = std::sqrt(2.0 / static_cast<double>(in * cfg.kernel * cfg.kernel));
      for (double& v : w.vec()) v = zero ? 0.0 : std * rng.normal();
      p.conv.push_back(std::move(w));
      p.conv.push_back(Tensor({out}));
    }
  return p;
}

/// Tape leaves for a parameter set.
struct ParamVars {
  std::vector<ad::Var> conv;
  ad::Var lambda;
};

inline ParamVars make_vars(ad::Tape& tape, const ReconParams& p, bool trainable) {
  ParamVars v;
  for (const auto& t : p.conv) v.conv.push_back(trainable ? tape.variable(t) : tape.constant(t));
  v.lambda = trainable ? tape.variable(p.lambda) : tape.constant(p.lambda);
  return v;
}

// ---------------------------------------------------------------------------
// Data consistency

/// K v = Σ_c S_c* F⁻¹(m ⊙ F(S_c v)) + λ v for one repetition.
class NormalOperator {
 public:
  NormalOperator(std::span<const double> mask, const forward::SensitivitySet& sens, double lambda, std::size_t h,
                 std::size_t w)
      : mask_(mask), sens_(sens), lambda_(lambda), h_(h), w_(w), buf_(h * w) {}

  void apply(std::span<const cplx> in, std::span<cplx> out) {
    const std::size_t hw = h_ * w_;
    for (std::size_t i = 0; i < hw; ++i) out[i] = lambda_ * in[i];
    for (std::size_t c = 0; c < sens_.coils(); ++c) {
      coil_forward(in, c, buf_);
      for (std::size_t i = 0; i < hw; ++i) buf_[i] *= mask_[i];
      fft2c_inplace(buf_, h_, w_, true);
      for (std::size_t i = 0; i < hw; ++i) out[i] += conj_map(c, i) * buf_[i];
    }
  }

  /// F(S_c v) into dst.
  void coil_forward(std::span<const cplx> v, std::size_t c, std::vector<cplx>& dst) const {
    const std::size_t hw = h_ * w_;
    dst.resize(hw);
    for (std::size_t i = 0; i < hw; ++i) dst[i] = map(c, i) * v[i];
    fft2c_inplace(dst, h_, w_, false);
  }

  cplx map(std::size_t c, std::size_t i) const {
    if (sens_.identity()) return 1.0;
    const std::size_t hw = h_ * w_;
    return {sens_.maps[2 * c * hw + i], sens_.maps[(2 * c + 1) * hw + i]};
  }
  cplx conj_map(std::size_t c, std::size_t i) const { return std::conj(map(c, i)); }

 private:
  std::span<const double> mask_;
  const forward::SensitivitySet& sens_;
  double lambda_;
  std::size_t h_, w_;
  std::vector<cplx> buf_;
};

struct CgReport {
  std::size_t iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
};

inline double cdot_re(std::span<const cplx> a, std::span<const cplx> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i].real() * b[i].real() + a[i].imag() * b[i].imag();
  return s;
}

/// Conjugate gradient on K x = rhs from the initial iterate in x.
inline CgReport conjugate_gradient(NormalOperator& op, std::span<const cplx> rhs, std::span<cplx> x,
                                   std::size_t max_iters, double tol) {
  const std::size_t n = rhs.size();
  std::vector<cplx> r(n), p(n), ap(n);
  op.apply(x, ap);
  for (std::size_t i = 0; i < n; ++i) r[i] = rhs[i] - ap[i];
  p = r;
  const double bnorm = std::sqrt(cdot_re(rhs, rhs));
  double rs = cdot_re(r, r);
  CgReport rep;
  auto done = [&] { return rs == 0.0 || std::sqrt(rs) <= tol * bnorm; };
  while (!done() && rep.iterations < max_iters) {
    op.apply(p, ap);
    const double pap = cdot_re(p, ap);
    if (!(pap > 0)) break;
    const double alpha = rs / pap;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    const double rs_new = cdot_re(r, r);
    const double beta = rs_new / rs;
    rs = rs_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    ++rep.iterations;
  }
  rep.converged = done();
  rep.relative_residual = bnorm > 0 ? std::sqrt(rs) / bnorm : std::sqrt(rs);
  return rep;
}

/// Running record of data-consistency solves that hit the iteration cap.
struct DcStats {
  std::size_t solves = 0;
  std::size_t nonconverged = 0;
  double worst_residual = 0.0;

  void note(const CgReport& r) {
    ++solves;
    if (!r.converged) ++nonconverged;
    worst_residual = std::max(worst_residual, r.relative_residual);
  }
};

struct DcResult {
  ComplexImage x;
  CgReport report;
};

/// Solves (AᴴMA + λI) x = Aᴴy + λz from x₀ = z for one repetition.
/// y holds the (masked) measurements of this repetition, one plane per coil.
inline DcResult dc_cg(const ComplexImage& z, std::span<const ComplexImage> y, const Tensor& mask,
                      const forward::SensitivitySet& sens, double lambda, std::size_t iters, double tol) {
  const std::size_t h = z.height(), w = z.width(), hw = h * w;
  if (y.size() != sens.coils()) throw ConfigError("dc_cg: one measurement plane per coil expected");
  if (mask.size() != hw) throw ConfigError("dc_cg: mask does not match the image grid");
  NormalOperator op(mask.data(), sens, lambda, h, w);
  std::vector<cplx> rhs(hw), x = z.to_complex();
  for (std::size_t c = 0; c < y.size(); ++c) {
    auto buf = y[c].to_complex();
    fft2c_inplace(buf, h, w, true);
    for (std::size_t i = 0; i < hw; ++i) rhs[i] += op.conj_map(c, i) * buf[i];
  }
  for (std::size_t i = 0; i < hw; ++i) rhs[i] += lambda * x[i];
  DcResult res;
  res.report = conjugate_gradient(op, rhs, x, iters, tol);
  res.x = ComplexImage::from_complex(x, h, w);
  return res;
}

namespace detail {

inline std::vector<cplx> plane(const Tensor& t, std::size_t k, std::size_t hw) {
  std::vector<cplx> out(hw);
  for (std::size_t i = 0; i < hw; ++i) out[i] = {t[2 * k * hw + i], t[(2 * k + 1) * hw + i]};
  return out;
}

inline void store_plane(Tensor& t, std::size_t k, std::span<const cplx> v) {
  const std::size_t hw = v.size();
  for (std::size_t i = 0; i < hw; ++i) {
    t[2 * k * hw + i] = v[i].real();
    t[(2 * k + 1) * hw + i] = v[i].imag();
  }
}

}  // namespace detail

/// Differentiable per-repetition DC over a [NEX,2,H,W] stack. The backward
/// pass differentiates the solution implicitly: with g = K⁻¹ x̄,
///   z̄ = λ g,  λ̄ = Re⟨g, z − x⟩,  ȳ_c = F(S_c g),
///   m̄ = −Σ_c Re(conj(F S_c g) ⊙ F S_c x).
inline ad::Var data_consistency(const ad::Var& z, const ad::Var& y, const ad::Var& masks, const ad::Var& lambda,
                                const forward::SensitivitySet& sens, std::size_t iters, double tol,
                                std::shared_ptr<DcStats> stats = nullptr) {
  const Tensor& zv = z.value();
  const std::size_t nex = zv.dim(0), h = zv.dim(2), w = zv.dim(3), hw = h * w, coils = sens.coils();
  const double lam = lambda.value()[0];
  const Tensor& yv = y.value();
  const Tensor& mv = masks.value();
  Tensor out(zv.shape());
  for (std::size_t n = 0; n < nex; ++n) {
    NormalOperator op(std::span<const double>(mv.vec().data() + n * hw, hw), sens, lam, h, w);
    std::vector<cplx> x = detail::plane(zv, n, hw), rhs(hw);
    for (std::size_t c = 0; c < coils; ++c) {
      auto buf = detail::plane(yv, n * coils + c, hw);
      fft2c_inplace(buf, h, w, true);
      for (std::size_t i = 0; i < hw; ++i) rhs[i] += op.conj_map(c, i) * buf[i];
    }
    for (std::size_t i = 0; i < hw; ++i) rhs[i] += lam * x[i];
    const CgReport rep = conjugate_gradient(op, rhs, x, iters, tol);
    if (stats) stats->note(rep);
    detail::store_plane(out, n, x);
  }
  return z.tape().record(
      std::move(out), {z, y, masks, lambda},
      [z, y, masks, lambda, sens, iters, tol, nex, h, w, hw, coils](ad::Tape& t, std::size_t self) {
        const Tensor& gx = t.grad(self);
        const Tensor& xv = t.value(self);
        const Tensor& zv = t.value(z.id());
        const Tensor& mv = t.value(masks.id());
        const double lam = t.value(lambda.id())[0];
        for (std::size_t n = 0; n < nex; ++n) {
          NormalOperator op(std::span<const double>(mv.vec().data() + n * hw, hw), sens, lam, h, w);
          const std::vector<cplx> rhs = detail::plane(gx, n, hw);
          std::vector<cplx> g(hw);
          conjugate_gradient(op, rhs, g, iters, tol);
          if (t.requires_grad(z)) {
            auto& gz = t.grad_accum(z.id()).vec();
            for (std::size_t i = 0; i < hw; ++i) {
              gz[2 * n * hw + i] += lam * g[i].real();
              gz[(2 * n + 1) * hw + i] += lam * g[i].imag();
            }
          }
          if (t.requires_grad(lambda)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
              acc += g[i].real() * (zv[2 * n * hw + i] - xv[2 * n * hw + i]) +
                     g[i].imag() * (zv[(2 * n + 1) * hw + i] - xv[(2 * n + 1) * hw + i]);
            }
            t.grad_accum(lambda.id())[0] += acc;
          }
          const bool need_y = t.requires_grad(y), need_m = t.requires_grad(masks);
          if (!need_y && !need_m) continue;
          const std::vector<cplx> xn = detail::plane(xv, n, hw);
          std::vector<cplx> fg, fx;
          for (std::size_t c = 0; c < coils; ++c) {
            op.coil_forward(g, c, fg);
            if (need_y) {
              auto& gy = t.grad_accum(y.id()).vec();
              const std::size_t k = n * coils + c;
              for (std::size_t i = 0; i < hw; ++i) {
                gy[2 * k * hw + i] += fg[i].real();
                gy[(2 * k + 1) * hw + i] += fg[i].imag();
              }
            }
            if (need_m) {
              op.coil_forward(xn, c, fx);
              auto& gm = t.grad_accum(masks.id()).vec();
              for (std::size_t i = 0; i < hw; ++i)
                gm[n * hw + i] -= fg[i].real() * fx[i].real() + fg[i].imag() * fx[i].imag();
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Network

/// Residual denoiser over a channel stack: returns first `out_channels` input
/// channels plus the CNN output.
inline ad::Var denoise(const ad::Var& input, std::span<const ad::Var> conv, const ad::Var& residual) {
  ad::Var h = input;
  const std::size_t layers = conv.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::conv2d(h, conv[2 * l], conv[2 * l + 1]);
    if (l + 1 < layers) h = ad::relu(h);
  }
  return ad::add(residual, h);
}

/// Denoiser over a plain magnitude stack [NEX,H,W] (masks optional, [NEX,H,W]).
inline Tensor denoise(const Tensor& mag_stack, const Tensor* masks, const ReconParams& p, std::size_t instance = 0) {
  ad::Tape tape;
  ParamVars v = make_vars(tape, p, false);
  const std::size_t per = p.tensors_per_denoiser();
  std::span<const ad::Var> conv(v.conv.data() + instance * per, per);
  const ad::Var mag = tape.constant(mag_stack);
  ad::Var in = mag;
  if (p.config.mask_channels) {
    const ad::Var m = tape.constant(masks ? *masks : Tensor(mag_stack.shape()));
    in = ad::concat(std::vector<ad::Var>{mag, m});
  }
  return denoise(in, conv, mag).value();
}

struct StepInputs {
  ad::Var y;      // [NEX·C,2,H,W]
  ad::Var masks;  // [NEX,H,W]
  const forward::SensitivitySet* sens = nullptr;
  std::shared_ptr<DcStats> stats;
};

/// One MR step on a [NEX,2,H,W] stack.
inline ad::Var mr_step(const ad::Var& images, const StepInputs& in, const ParamVars& params, const ReconConfig& cfg,
                       std::size_t step, bool apply_dc) {
  ad::Tape& tape = images.tape();
  const ad::Var mag = ad::magnitude(images, cfg.delta);
  ad::Var features = mag;
  if (cfg.mask_channels) {
    // Masks are injected in the first step only; later steps see zeros there.
    const ad::Var extra = step == 0 ? in.masks : tape.constant(Tensor(mag.shape()));
    features = ad::concat(std::vector<ad::Var>{mag, extra});
  }
  const std::size_t per = 2 * cfg.layers;
  const std::size_t instance = cfg.shared_weights ? 0 : step;
  std::span<const ad::Var> conv(params.conv.data() + instance * per, per);
  const ad::Var refined = denoise(features, conv, mag);
  ad::Var out = ad::cscale(images, ad::div(refined, mag));
  if (apply_dc)
    out = data_consistency(out, in.y, in.masks, params.lambda, *in.sens, cfg.cg_iters, cfg.cg_tol, in.stats);
  return out;
}

/// Full network: zero-filled adjoint, T MR steps (no DC in the last), then the
/// magnitude-mean fuser. Returns [H,W].
inline ad::Var reconstruct(const StepInputs& in, const ParamVars& params, const ReconConfig& cfg) {
  ad::Var x = forward::adjoint(in.y, *in.sens);
  for (std::size_t t = 0; t < cfg.steps; ++t) x = mr_step(x, in, params, cfg, t, t + 1 < cfg.steps);
  return ad::mean0(ad::magnitude(x, 0.0));
}

/// Inference without gradients.
inline Tensor reconstruct(const Tensor& kspace, const Tensor& masks, const forward::SensitivitySet& sens,
                          const ReconParams& p, std::shared_ptr<DcStats> stats = nullptr) {
  ad::Tape tape;
  const ParamVars v = make_vars(tape, p, false);
  StepInputs in{tape.constant(kspace), tape.constant(masks), &sens, std::move(stats)};
  return reconstruct(in, v, p.config).value();
}

/// Mean magnitude of the zero-filled repetitions (reference baseline).
inline Tensor zero_filled(const Tensor& kspace, const forward::SensitivitySet& sens) {
  const Tensor imgs = forward::adjoint(kspace, sens);
  const std::size_t n = imgs.dim(0), h = imgs.dim(2), w = imgs.dim(3), hw = h * w;
  Tensor out({h, w});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < hw; ++i) out[i] += std::hypot(imgs[2 * k * hw + i], imgs[(2 * k + 1) * hw + i]);
  out *= 1.0 / static_cast<double>(n);
  return out;
}

}  // namespace nexop::recon
