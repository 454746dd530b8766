#pragma once

// Multi-repetition measurement operator y_n = m_n ⊙ F(S x_n) + m_n ⊙ ε and its
// adjoint Σ_c S_c* F⁻¹ y_{n,c}.
//
// Complex stacks are planar [N,2,H,W] tensors. Measurements are ordered
// repetition-major: entry n·C + c holds coil c of repetition n.

#include <cstdint>
#include <vector>

#include "nexop/autodiff.hpp"
#include "nexop/fft.hpp"
#include "nexop/random.hpp"
#include "nexop/tensor.hpp"

namespace nexop::forward {

/// Coil sensitivity maps as planar [C,2,H,W]; empty means one coil with S = 1.
struct SensitivitySet {
  Tensor maps;

  bool identity() const { return maps.empty(); }
  std::size_t coils() const { return identity() ? 1 : maps.dim(0); }

  void validate(std::size_t height, std::size_t width) const {
    if (identity()) return;
    if (maps.rank() != 4 || maps.dim(1) != 2 || maps.dim(2) != height || maps.dim(3) != width)
      throw ConfigError("sensitivity maps must be [C,2,H,W] matching the image grid");
    if (!maps.all_finite()) throw ConfigError("sensitivity maps contain non-finite values");
  }
};

struct NoiseModel {
  double sigma = 0.0;  // per real/imaginary component
  std::uint64_t seed = 0;
};

/// Undersampled multi-repetition k-space, zero where not sampled.
struct MultiNexKSpace {
  Tensor data;  // [NEX·C,2,H,W]
  Tensor masks; // [NEX,H,W]
  std::size_t nex = 0;
  std::size_t coils = 1;
};

namespace detail {

// out = S_c · x (complex multiply per pixel); conj flips the map.
inline void apply_map(const double* xr, const double* xi, const double* sr, const double* si, double* outr,
                      double* outi, std::size_t hw, bool conj) {
  const double sgn = conj ? -1.0 : 1.0;
  for (std::size_t i = 0; i < hw; ++i) {
    const double a = xr[i], b = xi[i], c = sr[i], d = sgn * si[i];
    outr[i] = a * c - b * d;
    outi[i] = a * d + b * c;
  }
}

}  // namespace detail

/// [N,2,H,W] -> [N·C,2,H,W], entry n·C+c = S_c x_n.
inline Tensor coil_expand(const Tensor& x, const SensitivitySet& s) {
  if (s.identity()) return x;
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w, c = s.coils();
  Tensor out({n * c, 2, h, w});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < c; ++j) {
      const double* xr = x.vec().data() + 2 * k * hw;
      const double* sr = s.maps.vec().data() + 2 * j * hw;
      double* o = out.vec().data() + 2 * (k * c + j) * hw;
      detail::apply_map(xr, xr + hw, sr, sr + hw, o, o + hw, hw, false);
    }
  return out;
}

/// [N·C,2,H,W] -> [N,2,H,W], Σ_c conj(S_c) y_{n,c}.
inline Tensor coil_combine(const Tensor& y, const SensitivitySet& s) {
  if (s.identity()) return y;
  const std::size_t c = s.coils(), n = y.dim(0) / c, h = y.dim(2), w = y.dim(3), hw = h * w;
  Tensor out({n, 2, h, w});
  std::vector<double> tr(hw), ti(hw);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < c; ++j) {
      const double* yr = y.vec().data() + 2 * (k * c + j) * hw;
      const double* sr = s.maps.vec().data() + 2 * j * hw;
      detail::apply_map(yr, yr + hw, sr, sr + hw, tr.data(), ti.data(), hw, true);
      double* o = out.vec().data() + 2 * k * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        o[i] += tr[i];
        o[hw + i] += ti[i];
      }
    }
  return out;
}

/// Multiplies every coil plane of repetition n by mask n.
inline void apply_masks(Tensor& k, const Tensor& masks, std::size_t coils) {
  const std::size_t hw = k.dim(2) * k.dim(3), nex = masks.dim(0);
  for (std::size_t n = 0; n < nex; ++n)
    for (std::size_t c = 0; c < coils; ++c)
      for (std::size_t p = 0; p < 2; ++p) {
        double* d = k.vec().data() + (2 * (n * coils + c) + p) * hw;
        const double* m = masks.vec().data() + n * hw;
        for (std::size_t i = 0; i < hw; ++i) d[i] *= m[i];
      }
}

/// y_n = m_n ⊙ (F(S x_n) + ε_n). Noise is drawn at every location and then
/// masked, so a given seed yields the same noise field for any mask.
inline MultiNexKSpace measure(const Tensor& images, const Tensor& masks, const SensitivitySet& s,
                              const NoiseModel& noise) {
  if (images.rank() != 4 || images.dim(1) != 2) throw ConfigError("measure expects images as [NEX,2,H,W]");
  if (masks.rank() != 3 || masks.dim(0) != images.dim(0) || masks.dim(1) != images.dim(2) ||
      masks.dim(2) != images.dim(3))
    throw ConfigError("measure: masks " + shape_string(masks.shape()) + " do not match images " +
                      shape_string(images.shape()));
  s.validate(images.dim(2), images.dim(3));
  MultiNexKSpace y;
  y.nex = images.dim(0);
  y.coils = s.coils();
  y.data = fft2c_planar(coil_expand(images, s), false);
  if (noise.sigma > 0) {
    Rng rng(noise.seed, 0x4E4F495345ull);
    for (double& v : y.data.vec()) v += noise.sigma * rng.normal();
  }
  apply_masks(y.data, masks, y.coils);
  y.masks = masks;
  return y;
}

/// Zero-filled images, one per repetition: Σ_c S_c* F⁻¹ y_{n,c}.
inline Tensor adjoint(const Tensor& kspace, const SensitivitySet& s) {
  return coil_combine(fft2c_planar(kspace, true), s);
}

inline Tensor adjoint(const MultiNexKSpace& y, const SensitivitySet& s) { return adjoint(y.data, s); }

// ---------------------------------------------------------------------------
// Differentiable versions

inline ad::Var coil_expand(const ad::Var& x, const SensitivitySet& s) {
  if (s.identity()) return x;
  return x.tape().record(coil_expand(x.value(), s), {x}, [x, s](ad::Tape& t, std::size_t self) {
    const Tensor back = coil_combine(t.grad(self), s);
    auto& g = t.grad_accum(x.id());
    g += back;
  });
}

inline ad::Var coil_combine(const ad::Var& y, const SensitivitySet& s) {
  if (s.identity()) return y;
  return y.tape().record(coil_combine(y.value(), s), {y}, [y, s](ad::Tape& t, std::size_t self) {
    const Tensor back = coil_expand(t.grad(self), s);
    auto& g = t.grad_accum(y.id());
    g += back;
  });
}

/// Repeats each repetition's mask once per coil: [NEX,H,W] -> [NEX·C,H,W].
inline ad::Var repeat_masks(const ad::Var& masks, std::size_t coils) {
  if (coils == 1) return masks;
  const std::size_t nex = masks.shape()[0], h = masks.shape()[1], w = masks.shape()[2], hw = h * w;
  std::vector<std::size_t> src, dst;
  for (std::size_t n = 0; n < nex; ++n)
    for (std::size_t c = 0; c < coils; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        src.push_back(n * hw + i);
        dst.push_back((n * coils + c) * hw + i);
      }
  return ad::scatter(masks, std::move(src), std::move(dst), {nex * coils, h, w});
}

/// Noiseless masked forward model for a planar [NEX,2,H,W] stack.
inline ad::Var measure(const ad::Var& images, const ad::Var& masks, const SensitivitySet& s) {
  return ad::cscale(ad::fft2c(coil_expand(images, s)), repeat_masks(masks, s.coils()));
}

inline ad::Var adjoint(const ad::Var& kspace, const SensitivitySet& s) { return coil_combine(ad::ifft2c(kspace), s); }

}  // namespace nexop::forward
