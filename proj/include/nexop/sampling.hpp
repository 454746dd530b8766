#pragma once

// Learned and fixed multi-repetition k-space sampling.
//
// Learned plans map logits through sigmoid, a single global budget rescale and
// a two-class Gumbel-Softmax relaxation. The forward pass uses hard masks
// (z > 0.5) while gradients follow the relaxed z (straight-through).
//
// Logit flattening is repetition-major, row-major inside a repetition. For the
// joint plan the ACS locations of repetition 1 are skipped.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nexop/autodiff.hpp"
#include "nexop/error.hpp"
#include "nexop/random.hpp"
#include "nexop/tensor.hpp"

namespace nexop::sampling {

/// Fully sampled rectangle at the k-space center, acquired in repetition 1.
struct AcsRegion {
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Geometry of the multi-repetition k-space grid.
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t nex = 1;
  AcsRegion acs;

  std::size_t locations() const { return height * width; }
  std::size_t acs_count() const { return acs.height * acs.width; }
  std::size_t row0() const { return height / 2 - acs.height / 2; }
  std::size_t col0() const { return width / 2 - acs.width / 2; }

  bool in_acs(std::size_t r, std::size_t c) const {
    return r >= row0() && r < row0() + acs.height && c >= col0() && c < col0() + acs.width;
  }
  bool in_acs(std::size_t flat) const { return in_acs(flat / width, flat % width); }

  /// H×W indicator of the ACS rectangle.
  Tensor acs_mask() const {
    Tensor m({height, width});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = in_acs(i) ? 1.0 : 0.0;
    return m;
  }

  void validate() const {
    if (height == 0 || width == 0 || nex == 0) throw ConfigError("grid dimensions and NEX must be positive");
    if (acs.height > height || acs.width > width) throw ConfigError("ACS region larger than the k-space grid");
  }
};

/// Optimizable budget of a joint plan.
struct BudgetSpec {
  Grid grid;
  std::size_t budget = 0;  // B, free samples on top of the ACS

  std::size_t optimizable() const { return grid.nex * grid.locations() - grid.acs_count(); }

  /// R = NEX·D / (B + N_ACS).
  double acceleration() const {
    return static_cast<double>(grid.nex * grid.locations()) / static_cast<double>(budget + grid.acs_count());
  }

  void validate() const {
    grid.validate();
    if (optimizable() == 0) throw ConfigError("no optimizable locations: N_optim = NEX·D − N_ACS must be > 0");
    if (budget == 0) throw ConfigError("budget B must be positive");
    if (budget > optimizable())
      throw ConfigError("budget B = " + std::to_string(budget) + " exceeds N_optim = " + std::to_string(optimizable()));
  }
};

enum class Method { VD1, MultiNexVD, Loupe1, LoupeExt2, LoupeExt3, NexOP };

inline constexpr std::array<Method, 6> kAllMethods{Method::VD1,       Method::MultiNexVD, Method::Loupe1,
                                                   Method::LoupeExt2, Method::LoupeExt3,  Method::NexOP};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::VD1: return "VD-1";
    case Method::MultiNexVD: return "MultiNEX-VD";
    case Method::Loupe1: return "LOUPE-1";
    case Method::LoupeExt2: return "LOUPE-ext-2";
    case Method::LoupeExt3: return "LOUPE-ext-3";
    case Method::NexOP: return "NexOP";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown sampling method '" + std::string(s) +
                    "' (expected VD-1, MultiNEX-VD, LOUPE-1, LOUPE-ext-2, LOUPE-ext-3 or NexOP)");
}

// ---------------------------------------------------------------------------
// Probabilities and budget

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor logits_to_probs(const Tensor& logits) {
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(logits[i]);
  return p;
}

/// q_k = p_k · B / (Σp + ε).
inline Tensor rescale_to_budget(const Tensor& p, double budget, double eps) {
  if (!(budget > 0)) throw ConfigError("budget must be positive");
  const double total = p.sum();
  if (!(total > 0)) throw NumericError("degenerate probability field");
  Tensor q = p;
  q *= budget / (total + eps);
  return q;
}

/// Frozen noise for one relaxed Bernoulli draw per location.
struct SampleDraw {
  double tau = 1.0;
  double eps = 1e-6;
  Tensor eta;        // Gumbel noise of the "sample" class
  Tensor eta_prime;  // Gumbel noise of the "skip" class
};

/// Draws are a pure function of (seed, counter).
inline SampleDraw make_draw(std::size_t n, double tau, std::uint64_t seed, std::uint64_t counter, double eps = 1e-6) {
  if (!(tau > 0)) throw ConfigError("temperature must be positive");
  SampleDraw d{tau, eps, Tensor({n}), Tensor({n})};
  Rng rng(seed, counter);
  for (std::size_t i = 0; i < n; ++i) {
    d.eta[i] = rng.gumbel();
    d.eta_prime[i] = rng.gumbel();
  }
  return d;
}

/// Two-class Gumbel-Softmax surrogate z for weights q (plain evaluation).
inline Tensor gumbel_soft(const Tensor& q, const SampleDraw& d) {
  Tensor z(q.shape());
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double on = std::log(std::max(q[k], d.eps)) + d.eta[k];
    const double off = std::log(std::max(1.0 - q[k], d.eps)) + d.eta_prime[k];
    z[k] = sigmoid((on - off) / d.tau);
  }
  return z;
}

inline Tensor hard_threshold(const Tensor& z) {
  Tensor m(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) m[i] = z[i] > 0.5 ? 1.0 : 0.0;
  return m;
}

struct BinarySample {
  Tensor soft;
  Tensor hard;
};

inline BinarySample gumbel_binary_sample(const Tensor& q, const SampleDraw& d) {
  Tensor z = gumbel_soft(q, d);
  Tensor m = hard_threshold(z);
  return {std::move(z), std::move(m)};
}

// ---------------------------------------------------------------------------
// Variable-density Poisson-disc masks

/// Variable-density Poisson-disc pattern with exactly `target` ones among the
/// locations not flagged in `excluded`. A candidate p is accepted when no
/// accepted point lies closer than r(p) = 1 + γ·d(p)/d_max, d measured from
/// the k-space center; γ is bisected to hit the target and the residual
/// difference is settled by adding or dropping points in candidate order.
inline Tensor vd_poisson_mask(std::size_t height, std::size_t width, std::size_t target, std::uint64_t seed,
                              const Tensor* excluded = nullptr) {
  std::vector<std::size_t> avail;
  for (std::size_t i = 0; i < height * width; ++i)
    if (!excluded || (*excluded)[i] < 0.5) avail.push_back(i);
  if (target == 0 || target > avail.size())
    throw ConfigError("infeasible Poisson-disc target " + std::to_string(target) + " for " +
                      std::to_string(avail.size()) + " available locations");
  Tensor mask({height, width});
  if (target == avail.size()) {
    for (std::size_t i : avail) mask[i] = 1.0;
    return mask;
  }

  Rng rng(seed, 0x5644ull);
  for (std::size_t i = avail.size(); i > 1; --i) std::swap(avail[i - 1], avail[rng.below(i)]);

  const double cy = static_cast<double>(height / 2), cx = static_cast<double>(width / 2);
  std::vector<double> dist(height * width);
  double dmax = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    dist[i] = std::hypot(static_cast<double>(i / width) - cy, static_cast<double>(i % width) - cx);
    dmax = std::max(dmax, dist[i]);
  }
  if (dmax == 0.0) dmax = 1.0;

  std::vector<char> taken(height * width);
  std::vector<std::size_t> accepted;
  auto run = [&](double gamma) {
    std::fill(taken.begin(), taken.end(), 0);
    accepted.clear();
    for (std::size_t p : avail) {
      const double r = 1.0 + gamma * dist[p] / dmax;
      const double r2 = r * r;
      const auto py = static_cast<std::ptrdiff_t>(p / width), px = static_cast<std::ptrdiff_t>(p % width);
      const auto reach = static_cast<std::ptrdiff_t>(std::ceil(r));
      bool ok = true;
      if (static_cast<std::size_t>((2 * reach + 1) * (2 * reach + 1)) < accepted.size()) {
        for (std::ptrdiff_t dy = -reach; dy <= reach && ok; ++dy) {
          const std::ptrdiff_t y = py + dy;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(height)) continue;
          for (std::ptrdiff_t dx = -reach; dx <= reach; ++dx) {
            const std::ptrdiff_t x = px + dx;
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(width)) continue;
            if (taken[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)] &&
                static_cast<double>(dy * dy + dx * dx) < r2) {
              ok = false;
              break;
            }
          }
        }
      } else {
        for (std::size_t q : accepted) {
          const auto dy = static_cast<double>(static_cast<std::ptrdiff_t>(q / width) - py);
          const auto dx = static_cast<double>(static_cast<std::ptrdiff_t>(q % width) - px);
          if (dy * dy + dx * dx < r2) {
            ok = false;
            break;
          }
        }
      }
      if (ok) {
        taken[p] = 1;
        accepted.push_back(p);
      }
    }
    return accepted.size();
  };

  double lo = 0.0, hi = 1.0;
  while (run(hi) > target && hi < 1e6) hi *= 2.0;
  double best_gamma = hi;
  std::size_t best_err = static_cast<std::size_t>(-1);
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    const std::size_t n = run(mid);
    const std::size_t err = n > target ? n - target : target - n;
    if (err < best_err) {
      best_err = err;
      best_gamma = mid;
    }
    if (n == target) break;
    (n > target ? lo : hi) = mid;
  }
  run(best_gamma);

  if (accepted.size() > target) {
    // Drop from the end of the acceptance order, which is random.
    accepted.resize(target);
    std::fill(taken.begin(), taken.end(), 0);
    for (std::size_t p : accepted) taken[p] = 1;
  } else {
    for (std::size_t p : avail) {
      if (accepted.size() == target) break;
      if (!taken[p]) {
        taken[p] = 1;
        accepted.push_back(p);
      }
    }
  }
  for (std::size_t p : accepted) mask[p] = 1.0;
  return mask;
}

// ---------------------------------------------------------------------------
// Mask plans

enum class RepRole { Learned, Fixed, Shared, Absent };

inline std::string_view to_string(RepRole r) {
  switch (r) {
    case RepRole::Learned: return "learned";
    case RepRole::Fixed: return "fixed";
    case RepRole::Shared: return "shared";
    case RepRole::Absent: return "absent";
  }
  return "?";
}

struct RepetitionPlan {
  RepRole role = RepRole::Absent;
  std::size_t free_target = 0;  // samples outside the ACS (expected, for learned roles)
  bool acs = false;             // ACS acquired in this repetition
};

/// Per-repetition allocation for one sampling method at a given acceleration.
struct MaskPlan {
  Method method = Method::NexOP;
  Grid grid;
  double acceleration = 1.0;
  std::size_t total_target = 0;  // floor(NEX·D / R)
  std::vector<RepetitionPlan> reps;

  // Learned part: logits and the budget their rescaled weights must sum to.
  std::size_t logit_count = 0;
  double budget = 0.0;
  // scatter_src[k] -> scatter_dst[k] places logit entries into the NEX×H×W mask
  // stack; shared plans list each logit once per repetition.
  std::vector<std::size_t> scatter_src;
  std::vector<std::size_t> scatter_dst;

  // Constant part of the mask stack: ACS ones and fixed VD patterns.
  Tensor base;

  bool learned() const { return logit_count > 0; }

  /// Acquisitions counted across all repetitions, using the budget for learned fields.
  double expected_total() const {
    double t = 0.0;
    for (const auto& r : reps) t += static_cast<double>(r.free_target) + (r.acs ? grid.acs_count() : 0.0);
    return t;
  }
};

namespace detail {

inline void add_acs(Tensor& base, const Grid& g, std::size_t rep) {
  const std::size_t d = g.locations();
  for (std::size_t i = 0; i < d; ++i)
    if (g.in_acs(i)) base[rep * d + i] = 1.0;
}

inline void add_learned(MaskPlan& plan, std::size_t rep, bool skip_acs, std::size_t& next_logit) {
  const std::size_t d = plan.grid.locations();
  for (std::size_t i = 0; i < d; ++i) {
    if (skip_acs && plan.grid.in_acs(i)) continue;
    plan.scatter_src.push_back(next_logit++);
    plan.scatter_dst.push_back(rep * d + i);
  }
}

inline void add_shared(MaskPlan& plan, std::size_t reps) {
  const std::size_t d = plan.grid.locations();
  std::size_t k = 0;
  for (std::size_t i = 0; i < d; ++i) {
    if (plan.grid.in_acs(i)) continue;
    for (std::size_t r = 0; r < reps; ++r) {
      plan.scatter_src.push_back(k);
      plan.scatter_dst.push_back(r * d + i);
    }
    ++k;
  }
  plan.logit_count = k;
}

}  // namespace detail

/// Equal-budget allocation for each benchmark method. Fractional budgets round
/// down; leftover samples of an even split go to repetition 1. Repeated-mask
/// plans pay the ACS once per repetition that uses the mask.
inline MaskPlan baseline_mask_plan(Method method, double acceleration, const Grid& grid, std::uint64_t vd_seed = 7) {
  grid.validate();
  if (!(acceleration >= 1.0)) throw ConfigError("acceleration R must be >= 1");
  const std::size_t d = grid.locations(), nacs = grid.acs_count(), nex = grid.nex;
  MaskPlan plan;
  plan.method = method;
  plan.grid = grid;
  plan.acceleration = acceleration;
  plan.total_target = static_cast<std::size_t>(std::floor(static_cast<double>(nex * d) / acceleration + 1e-9));
  plan.reps.assign(nex, RepetitionPlan{});
  plan.base = Tensor({nex, grid.height, grid.width});
  if (plan.total_target < nacs)
    throw ConfigError("budget " + std::to_string(plan.total_target) + " is smaller than the ACS count " +
                      std::to_string(nacs));
  const std::size_t free_total = plan.total_target - nacs;
  const Tensor acs = grid.acs_mask();

  auto need_nex = [&](std::size_t k) {
    if (nex < k) throw ConfigError(std::string(to_string(method)) + " needs NEX >= " + std::to_string(k));
  };
  auto single_rep_budget = [&]() {
    if (free_total > d - nacs)
      throw ConfigError(std::string(to_string(method)) + ": budget " + std::to_string(plan.total_target) +
                        " does not fit in a single repetition of " + std::to_string(d) + " locations");
    if (free_total == 0) throw ConfigError("budget leaves no free samples beyond the ACS");
  };

  switch (method) {
    case Method::VD1: {
      single_rep_budget();
      plan.reps[0] = {RepRole::Fixed, free_total, true};
      Tensor vd = vd_poisson_mask(grid.height, grid.width, free_total, vd_seed, &acs);
      for (std::size_t i = 0; i < d; ++i) plan.base[i] = std::max(vd[i], acs[i]);
      break;
    }
    case Method::MultiNexVD: {
      if (free_total == 0) throw ConfigError("budget leaves no free samples beyond the ACS");
      const std::size_t each = free_total / nex;
      const std::size_t first = free_total - each * (nex - 1);
      if (first > d - nacs) throw ConfigError("MultiNEX-VD: repetition 1 budget exceeds its capacity");
      for (std::size_t r = 0; r < nex; ++r) {
        const std::size_t n = r == 0 ? first : each;
        plan.reps[r] = {RepRole::Fixed, n, r == 0};
        if (n == 0) continue;
        Tensor vd = vd_poisson_mask(grid.height, grid.width, n, vd_seed + r, r == 0 ? &acs : nullptr);
        for (std::size_t i = 0; i < d; ++i) plan.base[r * d + i] = r == 0 ? std::max(vd[i], acs[i]) : vd[i];
      }
      break;
    }
    case Method::Loupe1: {
      single_rep_budget();
      plan.reps[0] = {RepRole::Learned, free_total, true};
      std::size_t next = 0;
      detail::add_learned(plan, 0, true, next);
      plan.logit_count = next;
      plan.budget = static_cast<double>(free_total);
      detail::add_acs(plan.base, grid, 0);
      break;
    }
    case Method::LoupeExt2:
    case Method::LoupeExt3: {
      const std::size_t k = method == Method::LoupeExt2 ? 2 : 3;
      need_nex(k);
      const double per = std::floor(static_cast<double>(plan.total_target) / static_cast<double>(k) + 1e-9) -
                         static_cast<double>(nacs);
      if (per <= 0) throw ConfigError("budget too small for the repeated ACS of " + std::string(to_string(method)));
      const auto b = static_cast<std::size_t>(per);
      if (b > d - nacs) throw ConfigError("shared mask budget exceeds a single repetition");
      for (std::size_t r = 0; r < k; ++r) {
        plan.reps[r] = {RepRole::Shared, b, true};
        detail::add_acs(plan.base, grid, r);
      }
      detail::add_shared(plan, k);
      plan.budget = static_cast<double>(b);
      break;
    }
    case Method::NexOP: {
      BudgetSpec spec{grid, free_total};
      spec.validate();
      std::size_t next = 0;
      for (std::size_t r = 0; r < nex; ++r) {
        const std::size_t before = next;
        detail::add_learned(plan, r, r == 0, next);
        plan.reps[r] = {RepRole::Learned, 0, r == 0};
        // Expected allocation under uniform weights.
        plan.reps[r].free_target = (next - before) * free_total / spec.optimizable();
      }
      std::size_t assigned = 0;
      for (const auto& r : plan.reps) assigned += r.free_target;
      plan.reps[0].free_target += free_total - assigned;
      plan.logit_count = next;
      plan.budget = static_cast<double>(free_total);
      detail::add_acs(plan.base, grid, 0);
      break;
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Mask sets

/// Hard masks plus the relaxed surrogate they were thresholded from.
struct MaskSet {
  Tensor hard;  // [NEX,H,W] in {0,1}
  Tensor soft;  // [NEX,H,W] in [0,1]
};

/// Reshapes a relaxed draw z (one value per logit) into NEX masks and forces
/// the constant part of the plan (ACS, fixed patterns).
inline MaskSet assemble_masks(const Tensor& z, const MaskPlan& plan) {
  if (z.size() != plan.logit_count)
    throw ConfigError("assemble_masks: expected " + std::to_string(plan.logit_count) + " values, got " +
                      std::to_string(z.size()));
  MaskSet set{plan.base, plan.base};
  for (std::size_t k = 0; k < plan.scatter_src.size(); ++k) {
    const double v = z[plan.scatter_src[k]];
    set.soft[plan.scatter_dst[k]] += v;
    set.hard[plan.scatter_dst[k]] += v > 0.5 ? 1.0 : 0.0;
  }
  return set;
}

/// Rescaled weights of a learned plan.
inline Tensor plan_weights(const MaskPlan& plan, const Tensor& logits, double eps = 1e-6) {
  return rescale_to_budget(logits_to_probs(logits), plan.budget, eps);
}

/// Draws a mask stack for evaluation or reporting (no gradients).
inline MaskSet draw_masks(const MaskPlan& plan, const Tensor& logits, double tau, std::uint64_t seed,
                          std::uint64_t counter) {
  if (!plan.learned()) return {plan.base, plan.base};
  const Tensor q = plan_weights(plan, logits);
  return assemble_masks(gumbel_soft(q, make_draw(plan.logit_count, tau, seed, counter)), plan);
}

/// Per-repetition sampling weight maps [NEX,H,W] with the constant part set to
/// 1 where it is acquired.
inline Tensor weight_maps(const MaskPlan& plan, const Tensor& q) {
  Tensor maps = plan.base;
  for (std::size_t k = 0; k < plan.scatter_src.size(); ++k) maps[plan.scatter_dst[k]] += q[plan.scatter_src[k]];
  return maps;
}

enum class MaskMode { Hard, Soft };

struct DrawnMasks {
  ad::Var masks;  // [NEX,H,W]
  ad::Var q;      // rescaled weights (invalid for fixed plans)
  Tensor z;       // relaxed draw
};

/// Differentiable mask stack. Hard mode uses the straight-through estimator;
/// soft mode feeds z itself forward (used for gradient checking).
inline DrawnMasks sample_masks(ad::Tape& tape, const ad::Var& logits, const MaskPlan& plan, const SampleDraw& draw,
                               MaskMode mode = MaskMode::Hard) {
  DrawnMasks out;
  const Shape shape{plan.grid.nex, plan.grid.height, plan.grid.width};
  if (!plan.learned()) {
    out.masks = tape.constant(plan.base);
    return out;
  }
  if (logits.size() != plan.logit_count) throw ConfigError("logit count does not match the plan");
  const ad::Var p = ad::sigmoid(logits);
  const ad::Var total = ad::sum(p);
  // q = p · B / (Σp + ε), with the scale itself differentiable.
  const double scale_value = plan.budget / (total.value()[0] + draw.eps);
  const ad::Var scale_var = tape.record(Tensor::scalar(scale_value), {total},
                                        [total, b = plan.budget, eps = draw.eps](ad::Tape& t, std::size_t self) {
                                          const double s = t.value(total.id())[0] + eps;
                                          t.grad_accum(total.id())[0] += t.grad(self)[0] * (-b / (s * s));
                                        });
  const std::size_t n = plan.logit_count;
  const ad::Var q = tape.record(
      [&] {
        Tensor v = p.value();
        v *= scale_value;
        return v;
      }(),
      {p, scale_var}, [p, scale_var, n](ad::Tape& t, std::size_t self) {
        const auto& g = t.grad(self).vec();
        const auto& pv = t.value(p.id()).vec();
        const double s = t.value(scale_var.id())[0];
        if (t.requires_grad(p)) {
          auto& gp = t.grad_accum(p.id()).vec();
          for (std::size_t i = 0; i < n; ++i) gp[i] += g[i] * s;
        }
        if (t.requires_grad(scale_var)) {
          double acc = 0.0;
          for (std::size_t i = 0; i < n; ++i) acc += g[i] * pv[i];
          t.grad_accum(scale_var.id())[0] += acc;
        }
      });
  const ad::Var on = ad::log(ad::clamp_min(q, draw.eps));
  const ad::Var off = ad::log(ad::clamp_min(ad::add_scalar(ad::scale(q, -1.0), 1.0), draw.eps));
  const ad::Var logit = ad::scale(
      ad::sub(ad::add(on, tape.constant(draw.eta)), ad::add(off, tape.constant(draw.eta_prime))), 1.0 / draw.tau);
  const ad::Var z = ad::sigmoid(logit);
  const ad::Var m = mode == MaskMode::Hard ? ad::straight_through(z, hard_threshold(z.value())) : z;
  const ad::Var placed = ad::scatter(m, plan.scatter_src, plan.scatter_dst, shape);
  out.masks = ad::add(tape.constant(plan.base), placed);
  out.q = q;
  out.z = z.value();
  return out;
}

}  // namespace nexop::sampling
