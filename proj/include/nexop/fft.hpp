#pragma once

#include <bit>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <unordered_map>
#include <vector>

#include "nexop/tensor.hpp"

namespace nexop {

namespace detail {

// Per-length FFT tables. Power-of-two lengths use an iterative radix-2
// transform; other lengths fall back to a direct DFT over a twiddle table.
struct FftPlan {
  std::size_t n = 0;
  bool radix2 = false;
  std::vector<std::size_t> bitrev;
  std::vector<cplx> twiddle;  // exp(-2πi k/n), k < n
};

inline const FftPlan& fft_plan(std::size_t n) {
  thread_local std::unordered_map<std::size_t, FftPlan> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  FftPlan p;
  p.n = n;
  p.radix2 = std::has_single_bit(n);
  p.twiddle.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    p.twiddle[k] = {std::cos(a), std::sin(a)};
  }
  if (p.radix2) {
    const int bits = std::countr_zero(n);
    p.bitrev.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (int b = 0; b < bits; ++b)
        if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
      p.bitrev[i] = r;
    }
  }
  return cache.emplace(n, std::move(p)).first->second;
}

inline cplx twiddle(const FftPlan& p, std::size_t k, bool inverse) {
  const cplx w = p.twiddle[k % p.n];
  return inverse ? std::conj(w) : w;
}

}  // namespace detail

/// Unnormalized in-place 1D DFT (sign -1 forward, +1 inverse).
inline void fft1d(std::span<cplx> x, bool inverse, std::vector<cplx>& scratch) {
  const std::size_t n = x.size();
  if (n <= 1) return;
  const auto& plan = detail::fft_plan(n);
  if (plan.radix2) {
    for (std::size_t i = 0; i < n; ++i)
      if (i < plan.bitrev[i]) std::swap(x[i], x[plan.bitrev[i]]);
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t half = len / 2, stride = n / len;
      for (std::size_t start = 0; start < n; start += len) {
        for (std::size_t k = 0; k < half; ++k) {
          const cplx w = detail::twiddle(plan, k * stride, inverse);
          const cplx a = x[start + k];
          const cplx b = x[start + k + half] * w;
          x[start + k] = a + b;
          x[start + k + half] = a - b;
        }
      }
    }
    return;
  }
  scratch.assign(n, cplx{});
  for (std::size_t k = 0; k < n; ++k) {
    cplx acc{};
    for (std::size_t j = 0; j < n; ++j) acc += x[j] * detail::twiddle(plan, j * k, inverse);
    scratch[k] = acc;
  }
  std::copy(scratch.begin(), scratch.end(), x.begin());
}

/// Unnormalized, uncentered 2D DFT of a row-major H×W array.
inline void fft2(std::span<cplx> data, std::size_t height, std::size_t width, bool inverse) {
  std::vector<cplx> scratch;
  for (std::size_t r = 0; r < height; ++r) fft1d(data.subspan(r * width, width), inverse, scratch);
  std::vector<cplx> col(height);
  for (std::size_t c = 0; c < width; ++c) {
    for (std::size_t r = 0; r < height; ++r) col[r] = data[r * width + c];
    fft1d(col, inverse, scratch);
    for (std::size_t r = 0; r < height; ++r) data[r * width + c] = col[r];
  }
}

namespace detail {

// Circular shift of a row-major H×W array by (dy, dx).
inline void roll2(std::span<cplx> data, std::size_t height, std::size_t width, std::size_t dy,
                  std::size_t dx) {
  if ((dy % height == 0) && (dx % width == 0)) return;
  std::vector<cplx> tmp(data.begin(), data.end());
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c)
      data[((r + dy) % height) * width + (c + dx) % width] = tmp[r * width + c];
}

}  // namespace detail

/// Centered unitary transform: fftshift ∘ FFT ∘ ifftshift, scaled by 1/√(HW).
/// The zero frequency sits at (H/2, W/2).
inline void fft2c_inplace(std::span<cplx> data, std::size_t height, std::size_t width, bool inverse) {
  // ifftshift rolls by ceil(n/2), fftshift by floor(n/2).
  detail::roll2(data, height, width, (height + 1) / 2, (width + 1) / 2);
  fft2(data, height, width, inverse);
  detail::roll2(data, height, width, height / 2, width / 2);
  const double scale = 1.0 / std::sqrt(static_cast<double>(height * width));
  for (auto& v : data) v *= scale;
}

inline ComplexImage fft2c(const ComplexImage& x) {
  auto buf = x.to_complex();
  fft2c_inplace(buf, x.height(), x.width(), false);
  return ComplexImage::from_complex(buf, x.height(), x.width());
}

inline ComplexImage ifft2c(const ComplexImage& y) {
  auto buf = y.to_complex();
  fft2c_inplace(buf, y.height(), y.width(), true);
  return ComplexImage::from_complex(buf, y.height(), y.width());
}

/// Applies fft2c / ifft2c to every [2,H,W] plane pair of a planar [N,2,H,W] tensor.
inline Tensor fft2c_planar(const Tensor& x, bool inverse) {
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w;
  Tensor out(x.shape());
  std::vector<cplx> buf(hw);
  for (std::size_t i = 0; i < n; ++i) {
    const double* re = x.vec().data() + 2 * i * hw;
    const double* im = re + hw;
    for (std::size_t k = 0; k < hw; ++k) buf[k] = {re[k], im[k]};
    fft2c_inplace(buf, h, w, inverse);
    double* ore = out.vec().data() + 2 * i * hw;
    double* oim = ore + hw;
    for (std::size_t k = 0; k < hw; ++k) {
      ore[k] = buf[k].real();
      oim[k] = buf[k].imag();
    }
  }
  return out;
}

}  // namespace nexop
