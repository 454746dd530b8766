#pragma once

// PSNR, SSIM and FSIM restricted to an anatomy region of interest.
//
// Both images are multiplied by the ROI before any windowed computation and
// the final average runs over ROI pixels only, so background pixels never
// influence a score.

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <vector>

#include "nexop/error.hpp"
#include "nexop/fft.hpp"
#include "nexop/tensor.hpp"

namespace nexop::metrics {

/// Binary H×W mask stored as 0/1 doubles.
using RoiMask = Tensor;

inline constexpr double kPsnrCap = 100.0;

namespace detail {

inline void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || a.shape() != b.shape())
    throw ConfigError(std::string(what) + ": images must be rank-2 with equal shapes");
}

/// 3×3 dilation; outside the grid counts as background.
inline std::vector<char> dilate(const std::vector<char>& m, std::size_t h, std::size_t w) {
  std::vector<char> out(m.size(), 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      bool any = false;
      for (int dr = -1; dr <= 1 && !any; ++dr)
        for (int dc = -1; dc <= 1 && !any; ++dc) {
          const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
          any = m[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)] != 0;
        }
      out[r * w + c] = any;
    }
  return out;
}

/// 3×3 erosion; outside the grid counts as foreground.
inline std::vector<char> erode(const std::vector<char>& m, std::size_t h, std::size_t w) {
  std::vector<char> out(m.size(), 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      bool all = true;
      for (int dr = -1; dr <= 1 && all; ++dr)
        for (int dc = -1; dc <= 1 && all; ++dc) {
          const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
          all = m[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)] != 0;
        }
      out[r * w + c] = all;
    }
  return out;
}

/// Background pixels not 4-connected to the border become foreground.
inline std::vector<char> fill_holes(const std::vector<char>& m, std::size_t h, std::size_t w) {
  std::vector<char> outside(m.size(), 0);
  std::deque<std::size_t> queue;
  auto seed = [&](std::size_t r, std::size_t c) {
    const std::size_t i = r * w + c;
    if (!m[i] && !outside[i]) {
      outside[i] = 1;
      queue.push_back(i);
    }
  };
  for (std::size_t c = 0; c < w; ++c) {
    seed(0, c);
    seed(h - 1, c);
  }
  for (std::size_t r = 0; r < h; ++r) {
    seed(r, 0);
    seed(r, w - 1);
  }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const std::size_t r = i / w, c = i % w;
    if (r > 0) seed(r - 1, c);
    if (r + 1 < h) seed(r + 1, c);
    if (c > 0) seed(r, c - 1);
    if (c + 1 < w) seed(r, c + 1);
  }
  std::vector<char> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = !outside[i];
  return out;
}

inline Tensor masked(const Tensor& img, const RoiMask& roi) {
  Tensor out = img;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= roi[i];
  return out;
}

inline double roi_peak(const Tensor& img, const RoiMask& roi) {
  double peak = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i)
    if (roi[i] != 0) peak = std::max(peak, img[i]);
  return peak;
}

inline double roi_mean(const Tensor& map, const RoiMask& roi) {
  double s = 0.0, n = 0.0;
  for (std::size_t i = 0; i < map.size(); ++i)
    if (roi[i] != 0) {
      s += map[i];
      n += 1.0;
    }
  if (n == 0) throw ConfigError("empty ROI");
  return s / n;
}

/// 'same'-size correlation with zero padding.
inline Tensor correlate_same(const Tensor& img, const std::vector<double>& kernel, std::size_t k) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  const long half = static_cast<long>(k / 2);
  Tensor out({h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const long rr = static_cast<long>(r + i) - half, cc = static_cast<long>(c + j) - half;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
          s += kernel[i * k + j] * img.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
        }
      out.at(r, c) = s;
    }
  return out;
}

}  // namespace detail

/// Threshold at frac·max, binary closing with a 3×3 square (two dilations then
/// two erosions), then hole filling.
inline RoiMask roi_mask(const Tensor& img, double threshold_frac = 0.1) {
  if (img.rank() != 2) throw ConfigError("roi_mask needs a rank-2 image");
  const std::size_t h = img.dim(0), w = img.dim(1);
  const double thr = threshold_frac * img.max();
  std::vector<char> m(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) m[i] = img[i] > thr;
  for (int k = 0; k < 2; ++k) m = detail::dilate(m, h, w);
  for (int k = 0; k < 2; ++k) m = detail::erode(m, h, w);
  m = detail::fill_holes(m, h, w);
  RoiMask roi({h, w});
  bool any = false;
  for (std::size_t i = 0; i < m.size(); ++i) {
    roi[i] = m[i] ? 1.0 : 0.0;
    any = any || m[i];
  }
  if (!any) throw ConfigError("empty ROI: no pixel exceeds the threshold");
  return roi;
}

/// 10·log10(peak² / MSE) over the ROI with peak = max(ref) in the ROI; capped.
inline double psnr(const Tensor& ref, const Tensor& test, const RoiMask& roi) {
  detail::require_same(ref, test, "psnr");
  double se = 0.0, n = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i)
    if (roi[i] != 0) {
      const double d = ref[i] - test[i];
      se += d * d;
      n += 1.0;
    }
  if (n == 0) throw ConfigError("empty ROI");
  const double mse = se / n, peak = detail::roi_peak(ref, roi);
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 0.0;  // 0: peak of ref within the ROI
};

/// Mean SSIM over ROI pixels with a normalized Gaussian window truncated at the
/// image border.
inline double ssim(const Tensor& ref, const Tensor& test, const RoiMask& roi, const SsimOptions& opt = {}) {
  detail::require_same(ref, test, "ssim");
  const std::size_t k = opt.window;
  std::vector<double> g(k * k);
  const double c0 = static_cast<double>(k / 2);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double di = static_cast<double>(i) - c0, dj = static_cast<double>(j) - c0;
      g[i * k + j] = std::exp(-(di * di + dj * dj) / (2.0 * opt.sigma * opt.sigma));
    }
  const Tensor a = detail::masked(ref, roi), b = detail::masked(test, roi);
  const Tensor norm = detail::correlate_same(Tensor(ref.shape(), 1.0), g, k);
  auto filt = [&](const Tensor& x) {
    Tensor f = detail::correlate_same(x, g, k);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] /= norm[i];
    return f;
  };
  Tensor aa = a, bb = b, ab = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const Tensor mu_a = filt(a), mu_b = filt(b), s_aa = filt(aa), s_bb = filt(bb), s_ab = filt(ab);
  const double range = opt.dynamic_range > 0 ? opt.dynamic_range : detail::roi_peak(ref, roi);
  const double c1 = std::pow(opt.k1 * range, 2), c2 = std::pow(opt.k2 * range, 2);
  Tensor map(ref.shape());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double va = s_aa[i] - mu_a[i] * mu_a[i], vb = s_bb[i] - mu_b[i] * mu_b[i];
    const double cov = s_ab[i] - mu_a[i] * mu_b[i];
    const double num = (2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2);
    const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
    map[i] = den == 0.0 ? 1.0 : num / den;
  }
  return detail::roi_mean(map, roi);
}

// ---------------------------------------------------------------------------
// FSIM

struct PhaseCongruencyOptions {
  std::size_t scales = 4;
  std::size_t orientations = 4;
  double min_wavelength = 6.0;
  double mult = 2.0;
  double sigma_on_f = 0.55;
  double dtheta_on_sigma = 1.2;
  double noise_k = 2.0;
  double epsilon = 1e-4;
};

namespace detail {

/// Normalized frequency coordinate per index, matching an fftshift-ed grid.
inline std::vector<double> freq_range(std::size_t n) {
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (n % 2)
      r[i] = (static_cast<double>(i) - static_cast<double>(n - 1) / 2) / static_cast<double>(n > 1 ? n - 1 : 1);
    else
      r[i] = (static_cast<double>(i) - static_cast<double>(n) / 2) / static_cast<double>(n);
  }
  return r;
}

inline std::size_t ifftshift_index(std::size_t i, std::size_t n) { return (i + n - n / 2) % n; }

}  // namespace detail

/// Kovesi's phase congruency (log-Gabor bank with noise compensation).
inline Tensor phase_congruency(const Tensor& img, const PhaseCongruencyOptions& opt = {}) {
  const std::size_t h = img.dim(0), w = img.dim(1), hw = h * w;
  std::vector<cplx> spectrum(hw);
  for (std::size_t i = 0; i < hw; ++i) spectrum[i] = img[i];
  fft2(spectrum, h, w, false);

  // Radius and angle laid out in unshifted FFT order.
  std::vector<double> radius(hw), sin_t(hw), cos_t(hw), lowpass(hw);
  const auto xr = detail::freq_range(w), yr = detail::freq_range(h);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t dst = detail::ifftshift_index(r, h) * w + detail::ifftshift_index(c, w);
      const double x = xr[c], y = yr[r], rad = std::sqrt(x * x + y * y), th = std::atan2(-y, x);
      radius[dst] = rad;
      sin_t[dst] = std::sin(th);
      cos_t[dst] = std::cos(th);
      lowpass[dst] = 1.0 / (1.0 + std::pow(rad / 0.45, 30));
    }
  radius[0] = 1.0;

  std::vector<std::vector<double>> log_gabor(opt.scales, std::vector<double>(hw));
  const double denom = 2.0 * std::pow(std::log(opt.sigma_on_f), 2);
  for (std::size_t s = 0; s < opt.scales; ++s) {
    const double fo = 1.0 / (opt.min_wavelength * std::pow(opt.mult, static_cast<double>(s)));
    for (std::size_t i = 0; i < hw; ++i) {
      const double l = std::log(radius[i] / fo);
      log_gabor[s][i] = std::exp(-l * l / denom) * lowpass[i];
    }
    log_gabor[s][0] = 0.0;
  }

  const double theta_sigma = std::numbers::pi / static_cast<double>(opt.orientations) / opt.dtheta_on_sigma;
  std::vector<double> energy_all(hw, 0.0), an_all(hw, 0.0);
  std::vector<std::vector<cplx>> eo(opt.scales, std::vector<cplx>(hw));
  std::vector<std::vector<double>> ifft_filter(opt.scales, std::vector<double>(hw));
  std::vector<double> filter(hw);

  for (std::size_t o = 0; o < opt.orientations; ++o) {
    const double angl = static_cast<double>(o) * std::numbers::pi / static_cast<double>(opt.orientations);
    std::vector<double> spread(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      const double ds = sin_t[i] * std::cos(angl) - cos_t[i] * std::sin(angl);
      const double dc = cos_t[i] * std::cos(angl) + sin_t[i] * std::sin(angl);
      const double dtheta = std::abs(std::atan2(ds, dc));
      spread[i] = std::exp(-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma));
    }
    std::vector<double> sum_e(hw, 0.0), sum_o(hw, 0.0), sum_an(hw, 0.0), energy(hw, 0.0);
    double em_n = 0.0;
    for (std::size_t s = 0; s < opt.scales; ++s) {
      for (std::size_t i = 0; i < hw; ++i) filter[i] = log_gabor[s][i] * spread[i];
      std::vector<cplx> f(filter.begin(), filter.end());
      fft2(f, h, w, true);
      for (std::size_t i = 0; i < hw; ++i) ifft_filter[s][i] = f[i].real() / std::sqrt(static_cast<double>(hw));
      auto& e = eo[s];
      for (std::size_t i = 0; i < hw; ++i) e[i] = spectrum[i] * filter[i];
      fft2(e, h, w, true);
      for (auto& v : e) v /= static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) {
        sum_an[i] += std::abs(e[i]);
        sum_e[i] += e[i].real();
        sum_o[i] += e[i].imag();
      }
      if (s == 0)
        for (double v : filter) em_n += v * v;
    }
    for (std::size_t i = 0; i < hw; ++i) {
      const double x_energy = std::sqrt(sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]) + opt.epsilon;
      const double mean_e = sum_e[i] / x_energy, mean_o = sum_o[i] / x_energy;
      for (std::size_t s = 0; s < opt.scales; ++s) {
        const double e = eo[s][i].real(), od = eo[s][i].imag();
        energy[i] += e * mean_e + od * mean_o - std::abs(e * mean_o - od * mean_e);
      }
    }
    // Noise threshold from the median response of the finest scale.
    std::vector<double> e2(hw);
    for (std::size_t i = 0; i < hw; ++i) e2[i] = std::norm(eo[0][i]);
    std::sort(e2.begin(), e2.end());
    const double median = hw % 2 ? e2[hw / 2] : 0.5 * (e2[hw / 2 - 1] + e2[hw / 2]);
    const double mean_e2n = -median / std::log(0.5);
    const double noise_power = em_n > 0 ? mean_e2n / em_n : 0.0;
    double sum_an2 = 0.0, sum_aiaj = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      for (std::size_t s = 0; s < opt.scales; ++s) sum_an2 += ifft_filter[s][i] * ifft_filter[s][i];
      for (std::size_t si = 0; si + 1 < opt.scales; ++si)
        for (std::size_t sj = si + 1; sj < opt.scales; ++sj) sum_aiaj += ifft_filter[si][i] * ifft_filter[sj][i];
    }
    const double est_noise_energy2 = 2 * noise_power * sum_an2 + 4 * noise_power * sum_aiaj;
    const double tau = std::sqrt(std::max(est_noise_energy2, 0.0) / 2);
    const double est_noise = tau * std::sqrt(std::numbers::pi / 2);
    const double est_sigma = std::sqrt((2 - std::numbers::pi / 2) * tau * tau);
    const double thr = (est_noise + opt.noise_k * est_sigma) / 1.7;
    for (std::size_t i = 0; i < hw; ++i) {
      energy_all[i] += std::max(energy[i] - thr, 0.0);
      an_all[i] += sum_an[i];
    }
  }
  Tensor pc({h, w});
  for (std::size_t i = 0; i < hw; ++i) pc[i] = an_all[i] > 1e-300 ? energy_all[i] / an_all[i] : 0.0;
  return pc;
}

/// Scharr gradient magnitude with zero padding.
inline Tensor gradient_magnitude(const Tensor& img) {
  const std::vector<double> dx{3, 0, -3, 10, 0, -10, 3, 0, -3}, dy{3, 10, 3, 0, 0, 0, -3, -10, -3};
  std::vector<double> kx(9), ky(9);
  for (std::size_t i = 0; i < 9; ++i) {
    kx[i] = dx[i] / 16.0;
    ky[i] = dy[i] / 16.0;
  }
  const Tensor gx = detail::correlate_same(img, kx, 3), gy = detail::correlate_same(img, ky, 3);
  Tensor out(img.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::hypot(gx[i], gy[i]);
  return out;
}

struct FsimOptions {
  double t1 = 0.85;
  double t2 = 160.0;
  double scale_to = 255.0;  // both images are mapped so the ref ROI peak equals this
  PhaseCongruencyOptions pc;
};

/// PC-weighted product of phase-congruency and gradient similarity over the
/// ROI. A pair with no phase congruency anywhere scores 1.
inline double fsim(const Tensor& ref, const Tensor& test, const RoiMask& roi, const FsimOptions& opt = {}) {
  detail::require_same(ref, test, "fsim");
  const double peak = detail::roi_peak(ref, roi);
  const double s = peak > 0 ? opt.scale_to / peak : 1.0;
  Tensor a = detail::masked(ref, roi), b = detail::masked(test, roi);
  a *= s;
  b *= s;
  const Tensor pc1 = phase_congruency(a, opt.pc), pc2 = phase_congruency(b, opt.pc);
  const Tensor g1 = gradient_magnitude(a), g2 = gradient_magnitude(b);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (roi[i] == 0) continue;
    const double pcs = (2 * pc1[i] * pc2[i] + opt.t1) / (pc1[i] * pc1[i] + pc2[i] * pc2[i] + opt.t1);
    const double gs = (2 * g1[i] * g2[i] + opt.t2) / (g1[i] * g1[i] + g2[i] * g2[i] + opt.t2);
    const double pcm = std::max(pc1[i], pc2[i]);
    num += gs * pcs * pcm;
    den += pcm;
  }
  return den > 0 ? num / den : 1.0;
}

struct Scores {
  double psnr = 0.0;
  double ssim = 0.0;
  double fsim = 0.0;
};

/// All three metrics with the ROI derived from the reference.
inline Scores score(const Tensor& ref, const Tensor& test, double threshold_frac = 0.1) {
  const RoiMask roi = roi_mask(ref, threshold_frac);
  return {psnr(ref, test, roi), ssim(ref, test, roi), fsim(ref, test, roi)};
}

}  // namespace nexop::metrics
