#pragma once

// Probability-map statistics: smoothing, normalization to a 2D distribution,
// marginal moments, per-repetition sampling rates and accumulated masks.
//
// Moments use grid-point units; u indexes columns and v indexes rows.

#include <cmath>
#include <vector>

#include "nexop/error.hpp"
#include "nexop/sampling.hpp"
#include "nexop/tensor.hpp"

namespace nexop::analysis {

/// k×k mean filter, zero-padded. The window around (r,c) spans offsets
/// −k/2 … k−1−k/2 (−5 … +4 for k = 10).
inline Tensor smooth_map(const Tensor& map, std::size_t k = 10) {
  if (map.rank() != 2) throw ConfigError("smooth_map needs a rank-2 map");
  if (k == 0) throw ConfigError("smoothing kernel must be non-empty");
  const long h = static_cast<long>(map.dim(0)), w = static_cast<long>(map.dim(1));
  const long lo = -static_cast<long>(k / 2), hi = lo + static_cast<long>(k) - 1;
  const double norm = 1.0 / static_cast<double>(k * k);
  Tensor out(map.shape());
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      double s = 0.0;
      for (long dr = lo; dr <= hi; ++dr) {
        const long rr = r + dr;
        if (rr < 0 || rr >= h) continue;
        for (long dc = lo; dc <= hi; ++dc) {
          const long cc = c + dc;
          if (cc >= 0 && cc < w) s += map.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
        }
      }
      out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = s * norm;
    }
  return out;
}

inline Tensor normalize_distribution(const Tensor& map) {
  const double total = map.sum();
  if (!(total > 0) || !std::isfinite(total)) throw NumericError("cannot normalize a zero-sum map");
  Tensor out = map;
  out *= 1.0 / total;
  return out;
}

struct MomentSummary {
  double mean_u = 0.0;
  double mean_v = 0.0;
  double sigma_u = 0.0;
  double sigma_v = 0.0;
};

/// Centers of mass and marginal standard deviations of a distribution π(v,u).
inline MomentSummary marginal_std(const Tensor& pi) {
  if (pi.rank() != 2) throw ConfigError("marginal_std needs a rank-2 distribution");
  const std::size_t h = pi.dim(0), w = pi.dim(1);
  std::vector<double> pu(w, 0.0), pv(h, 0.0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      pu[c] += pi.at(r, c);
      pv[r] += pi.at(r, c);
    }
  auto moments = [](const std::vector<double>& p, double& mean, double& sigma) {
    double m = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) m += static_cast<double>(i) * p[i];
    double var = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) var += (static_cast<double>(i) - m) * (static_cast<double>(i) - m) * p[i];
    mean = m;
    sigma = std::sqrt(std::max(var, 0.0));
  };
  MomentSummary s;
  moments(pu, s.mean_u, s.sigma_u);
  moments(pv, s.mean_v, s.sigma_v);
  return s;
}

/// Fraction of the D grid locations acquired in each repetition, not counting
/// ACS locations in repetitions flagged in acs_reps (repetition 1 by default).
/// Weight maps give the expected rates.
inline std::vector<double> per_nex_rates(const Tensor& masks, const sampling::Grid& grid,
                                         std::vector<bool> acs_reps = {}) {
  if (masks.rank() != 3 || masks.dim(1) != grid.height || masks.dim(2) != grid.width)
    throw ConfigError("per_nex_rates: masks must be [NEX,H,W] on the grid");
  const std::size_t nex = masks.dim(0), d = grid.locations();
  if (acs_reps.empty()) {
    acs_reps.assign(nex, false);
    if (nex > 0) acs_reps[0] = true;
  }
  std::vector<double> rates(nex, 0.0);
  for (std::size_t n = 0; n < nex; ++n) {
    double ones = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      if (acs_reps[n] && grid.in_acs(i)) continue;
      ones += masks[n * d + i];
    }
    rates[n] = ones / static_cast<double>(d);
  }
  return rates;
}

/// ACS flags of a plan, for per_nex_rates.
inline std::vector<bool> acs_flags(const sampling::MaskPlan& plan) {
  std::vector<bool> f;
  for (const auto& r : plan.reps) f.push_back(r.acs);
  return f;
}

/// Number of repetitions acquiring each location.
inline Tensor accumulate(const Tensor& masks) {
  if (masks.rank() != 3) throw ConfigError("accumulate needs a [NEX,H,W] stack");
  const std::size_t nex = masks.dim(0), h = masks.dim(1), w = masks.dim(2), d = h * w;
  Tensor out({h, w});
  for (std::size_t n = 0; n < nex; ++n)
    for (std::size_t i = 0; i < d; ++i) out[i] += masks[n * d + i];
  return out;
}

/// R = NEX·D / (B + N_ACS).
inline double acceleration(const sampling::BudgetSpec& spec) { return spec.acceleration(); }

/// Total acquisitions of a mask stack.
inline double total_samples(const Tensor& masks) { return masks.sum(); }

}  // namespace nexop::analysis
