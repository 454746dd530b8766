#pragma once

// Joint optimization of the sampling logits ψ and the reconstruction weights θ.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "nexop/analysis.hpp"
#include "nexop/autodiff.hpp"
#include "nexop/error.hpp"
#include "nexop/forward.hpp"
#include "nexop/io.hpp"
#include "nexop/metrics.hpp"
#include "nexop/phantom.hpp"
#include "nexop/random.hpp"
#include "nexop/recon.hpp"
#include "nexop/sampling.hpp"

namespace nexop::train {

struct TrainSchedule {
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  double lr_theta = 1e-3;
  double lr_psi = 1e-2;
  std::size_t lr_halving = 14;
  double tau0 = 1.0;
  double tau_decay = 0.95;
  double tau_floor = 0.1;
  double tau_test = 0.5;
  double clip_theta = 1.0;
  double clip_psi = 1.0;
  double psi_init_std = 0.1;
  std::uint64_t seed = 1;
  std::uint64_t eval_seed = 20240;
  bool debug_checks = false;

  void validate() const {
    if (epochs == 0 || batch_size == 0 || lr_halving == 0) throw ConfigError("epochs, batch size and halving period must be positive");
    if (!(lr_theta > 0) || !(lr_psi > 0)) throw ConfigError("learning rates must be > 0");
    if (!(tau0 > 0) || !(tau_floor > 0) || !(tau_test > 0)) throw ConfigError("temperatures must be > 0");
    if (!(tau_decay > 0) || tau_decay > 1) throw ConfigError("temperature decay must be in (0, 1]");
    if (!(clip_theta > 0) || !(clip_psi > 0)) throw ConfigError("clip norms must be > 0");
    if (psi_init_std < 0) throw ConfigError("psi_init_std must be >= 0");
  }
};

/// τ(epoch) = max(τ₀·decay^epoch, floor).
inline double temperature(const TrainSchedule& s, std::size_t epoch) {
  return std::max(s.tau0 * std::pow(s.tau_decay, static_cast<double>(epoch)), s.tau_floor);
}

inline double temperature(std::size_t epoch) { return temperature(TrainSchedule{}, epoch); }

/// Step decay: halved every `period` epochs.
inline double lr_at(std::size_t epoch, double lr0, std::size_t period = 14) {
  return lr0 * std::ldexp(1.0, -static_cast<int>(epoch / period));
}

/// Pixel-mean squared error between two real images.
inline double loss(const Tensor& x_hat, const Tensor& target) {
  if (x_hat.shape() != target.shape())
    throw ConfigError("loss: shape " + shape_string(x_hat.shape()) + " vs " + shape_string(target.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < x_hat.size(); ++i) s += (x_hat[i] - target[i]) * (x_hat[i] - target[i]);
  return s / static_cast<double>(x_hat.size());
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam over one parameter group, with global-norm clipping of the group.
class AdamGroup {
 public:
  AdamGroup(double clip, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : clip_(clip), b1_(beta1), b2_(beta2), eps_(eps) {}

  struct StepInfo {
    double norm = 0.0;
    double clipped_norm = 0.0;
  };

  StepInfo step(const std::vector<Tensor*>& params, std::vector<Tensor>& grads, double lr) {
    if (m_.empty())
      for (auto* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    StepInfo info;
    double sq = 0.0;
    for (const auto& g : grads) sq += squared_norm(g.data());
    info.norm = std::sqrt(sq);
    const double factor = info.norm > clip_ ? clip_ / info.norm : 1.0;
    for (auto& g : grads) g *= factor;
    info.clipped_norm = info.norm * factor;
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_)), c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k]->vec();
      auto& m = m_[k].vec();
      auto& v = v_[k].vec();
      const auto& g = grads[k].vec();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1_ * m[i] + (1 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1 - b2_) * g[i] * g[i];
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
    return info;
  }

  double clip() const { return clip_; }

 private:
  double clip_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Model

struct Model {
  sampling::MaskPlan plan;
  std::uint64_t vd_seed = 7;
  recon::ReconParams theta;
  Tensor psi;  // logits, plan.logit_count entries
};

inline Model init_model(const sampling::MaskPlan& plan, const recon::ReconConfig& cfg, std::uint64_t seed,
                        double psi_init_std = 0.1, std::uint64_t vd_seed = 7) {
  if (cfg.nex != plan.grid.nex) throw ConfigError("reconstruction NEX does not match the sampling grid");
  Model m{plan, vd_seed, recon::init_params(cfg, seed), Tensor({plan.logit_count})};
  Rng rng(seed, 0x707369ull);
  for (double& v : m.psi.vec()) v = psi_init_std * rng.normal();
  return m;
}

/// Undersampled measurements y = m ⊙ k for a fully sampled [NEX,2,H,W] stack.
inline Tensor undersample(const Tensor& kspace, const Tensor& masks) {
  Tensor y = kspace;
  forward::apply_masks(y, masks, 1);
  return y;
}

/// Hard evaluation masks for one example: fixed seed, counter = example index.
inline Tensor eval_masks(const Model& m, double tau, std::uint64_t seed, std::size_t index) {
  return sampling::draw_masks(m.plan, m.psi, tau, seed, index).hard;
}

/// Differentiable loss of one example under a recorded draw.
inline ad::Var example_loss(ad::Tape& tape, const Model& m, const recon::ParamVars& theta, const ad::Var& logits,
                            const phantom::Example& ex, const sampling::SampleDraw& draw, sampling::MaskMode mode,
                            sampling::DrawnMasks* drawn = nullptr, std::shared_ptr<recon::DcStats> stats = nullptr) {
  static const forward::SensitivitySet identity;
  const sampling::DrawnMasks dm = sampling::sample_masks(tape, logits, m.plan, draw, mode);
  const ad::Var y = ad::cscale(tape.constant(ex.data.kspace), dm.masks);
  recon::StepInputs in{y, dm.masks, &identity, std::move(stats)};
  const ad::Var out = recon::reconstruct(in, theta, m.theta.config);
  if (drawn) *drawn = dm;
  return ad::mse(out, tape.constant(ex.data.target));
}

/// Reconstruction of one example with given hard masks.
inline Tensor reconstruct_example(const Model& m, const phantom::Example& ex, const Tensor& masks,
                                  std::shared_ptr<recon::DcStats> stats = nullptr) {
  return recon::reconstruct(undersample(ex.data.kspace, masks), masks, forward::SensitivitySet{}, m.theta,
                            std::move(stats));
}

inline double validation_loss(const Model& m, const std::vector<phantom::Example>& set, double tau,
                              std::uint64_t seed) {
  if (set.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i)
    total += loss(reconstruct_example(m, set[i], eval_masks(m, tau, seed, set[i].info.index)), set[i].data.target);
  return total / static_cast<double>(set.size());
}

// ---------------------------------------------------------------------------
// Training loop

struct HistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double tau = 0.0;
  double lr_theta = 0.0;
  double lr_psi = 0.0;
  double sum_q = 0.0;
  std::vector<double> rates;  // expected per-repetition rates from q
};

struct StepEvent {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double sum_q = 0.0;
  double budget = 0.0;
  double theta_norm = 0.0;  // post-clip
  double psi_norm = 0.0;
};

struct TrainOptions {
  std::function<void(const StepEvent&)> on_step;
  std::function<void(const HistoryRow&)> on_epoch;
  std::size_t max_steps = 0;  // 0: no limit
};

struct TrainResult {
  Model model;  // best-validation parameters
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  bool diverged = false;
  std::string failure;
};

/// Expected per-repetition rates and Σq for the current logits.
inline std::pair<double, std::vector<double>> sampling_summary(const Model& m) {
  const auto flags = analysis::acs_flags(m.plan);
  if (!m.plan.learned()) return {0.0, analysis::per_nex_rates(m.plan.base, m.plan.grid, flags)};
  const Tensor q = sampling::plan_weights(m.plan, m.psi);
  return {q.sum(), analysis::per_nex_rates(sampling::weight_maps(m.plan, q), m.plan.grid, flags)};
}

inline bool all_finite(const std::vector<Tensor>& ts) {
  for (const auto& t : ts)
    if (!t.all_finite()) return false;
  return true;
}

/// Joint optimization with one mask draw per batch. History row 0 holds the
/// validation loss before any update; row e the state after epoch e.
inline TrainResult joint_train(const phantom::Dataset& data, Model model, const TrainSchedule& sched,
                               const TrainOptions& opts = {}) {
  sched.validate();
  if (data.train.empty()) throw ConfigError("training split is empty");
  const bool learn_psi = model.plan.learned();
  const double lambda_min = model.theta.config.lambda_min;
  AdamGroup theta_opt(sched.clip_theta), psi_opt(sched.clip_psi);

  TrainResult result;
  auto record = [&](std::size_t epoch, double train_loss, double tau, double lr_t, double lr_p) {
    HistoryRow row;
    row.epoch = epoch;
    row.train_loss = train_loss;
    row.val_loss = validation_loss(model, data.val, sched.tau_test, sched.eval_seed);
    row.tau = tau;
    row.lr_theta = lr_t;
    row.lr_psi = lr_p;
    std::tie(row.sum_q, row.rates) = sampling_summary(model);
    result.history.push_back(row);
    if (opts.on_epoch) opts.on_epoch(row);
    return row;
  };

  const HistoryRow first = record(0, std::nan(""), temperature(sched, 0), 0.0, 0.0);
  result.model = model;
  result.best_val = first.val_loss;
  if (!std::isfinite(first.val_loss)) {
    result.diverged = true;
    result.failure = "non-finite validation loss before training";
    return result;
  }

  std::vector<std::size_t> order(data.train.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < sched.epochs; ++epoch) {
    const double tau = temperature(sched, epoch);
    const double lr_t = lr_at(epoch, sched.lr_theta, sched.lr_halving);
    const double lr_p = lr_at(epoch, sched.lr_psi, sched.lr_halving);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(sched.seed, 0x5348554646ull + epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += sched.batch_size) {
      const std::size_t stop = std::min(order.size(), start + sched.batch_size);
      const sampling::SampleDraw draw = sampling::make_draw(model.plan.logit_count, tau, sched.seed, step);
      std::vector<Tensor> g_theta, g_psi;
      double batch_loss = 0.0;
      for (std::size_t b = start; b < stop; ++b) {
        ad::Tape tape;
        const recon::ParamVars theta = recon::make_vars(tape, model.theta, true);
        const ad::Var logits = learn_psi ? tape.variable(model.psi) : tape.constant(model.psi);
        const ad::Var l = example_loss(tape, model, theta, logits, data.train[order[b]], draw, sampling::MaskMode::Hard);
        tape.backward(l);
        batch_loss += l.value()[0];
        std::vector<Tensor> gt;
        for (const auto& v : theta.conv) gt.push_back(tape.gradient(v));
        gt.push_back(tape.gradient(theta.lambda));
        if (g_theta.empty()) {
          g_theta = std::move(gt);
        } else {
          for (std::size_t k = 0; k < gt.size(); ++k) g_theta[k] += gt[k];
        }
        if (learn_psi) {
          Tensor gp = tape.gradient(logits);
          if (g_psi.empty())
            g_psi.push_back(std::move(gp));
          else
            g_psi[0] += gp;
        }
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      batch_loss *= inv;
      for (auto& g : g_theta) g *= inv;
      for (auto& g : g_psi) g *= inv;
      if (!std::isfinite(batch_loss) || !all_finite(g_theta) || !all_finite(g_psi)) {
        result.diverged = true;
        result.failure = "non-finite loss or gradient at step " + std::to_string(step) + " (epoch " +
                         std::to_string(epoch + 1) + ")";
        return result;
      }

      StepEvent ev;
      ev.step = step;
      ev.epoch = epoch + 1;
      ev.loss = batch_loss;
      ev.theta_norm = theta_opt.step(model.theta.tensors(), g_theta, lr_t).clipped_norm;
      model.theta.lambda[0] = std::max(model.theta.lambda[0], lambda_min);
      if (learn_psi) {
        std::vector<Tensor*> p{&model.psi};
        ev.psi_norm = psi_opt.step(p, g_psi, lr_p).clipped_norm;
        ev.sum_q = sampling::plan_weights(model.plan, model.psi).sum();
        ev.budget = model.plan.budget;
      }
      if (sched.debug_checks) {
        if (ev.theta_norm > sched.clip_theta * (1 + 1e-12) || ev.psi_norm > sched.clip_psi * (1 + 1e-12))
          throw NumericError("post-clip gradient norm exceeds its bound");
        if (learn_psi && std::abs(ev.sum_q - ev.budget) > 1e-6 * ev.budget)
          throw NumericError("budget invariant violated: sum q = " + std::to_string(ev.sum_q));
        if (!learn_psi && !model.psi.empty()) throw NumericError("frozen plan carries logits");
      }
      if (opts.on_step) opts.on_step(ev);
      epoch_loss += batch_loss * static_cast<double>(stop - start);
      ++step;
      if (opts.max_steps && step >= opts.max_steps) break;
    }
    const HistoryRow row = record(epoch + 1, epoch_loss / static_cast<double>(order.size()), tau, lr_t, lr_p);
    if (!std::isfinite(row.val_loss)) {
      result.diverged = true;
      result.failure = "non-finite validation loss after epoch " + std::to_string(epoch + 1);
      return result;
    }
    if (row.val_loss < result.best_val) {
      result.best_val = row.val_loss;
      result.best_epoch = epoch + 1;
      result.model = model;
    }
    if (opts.max_steps && step >= opts.max_steps) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRow {
  std::size_t index = 0;
  double loss = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double fsim = 0.0;
  double zero_filled_psnr = 0.0;
  double samples = 0.0;  // acquired locations over all repetitions
};

inline std::vector<EvalRow> evaluate(const Model& m, const std::vector<phantom::Example>& set, double tau,
                                     std::uint64_t seed, double roi_frac = 0.1) {
  std::vector<EvalRow> rows;
  for (const auto& ex : set) {
    const Tensor masks = eval_masks(m, tau, seed, ex.info.index);
    const Tensor x_hat = reconstruct_example(m, ex, masks);
    const Tensor zf = recon::zero_filled(undersample(ex.data.kspace, masks), forward::SensitivitySet{});
    const metrics::RoiMask roi = metrics::roi_mask(ex.data.target, roi_frac);
    EvalRow r;
    r.index = ex.info.index;
    r.loss = loss(x_hat, ex.data.target);
    r.psnr = metrics::psnr(ex.data.target, x_hat, roi);
    r.ssim = metrics::ssim(ex.data.target, x_hat, roi);
    r.fsim = metrics::fsim(ex.data.target, x_hat, roi);
    r.zero_filled_psnr = metrics::psnr(ex.data.target, zf, roi);
    r.samples = masks.sum();
    rows.push_back(r);
  }
  return rows;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sample standard deviation.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    for (double x : v) s.std += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(s.std / static_cast<double>(v.size() - 1));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints: one NXT file per tensor plus checkpoint.json

inline nlohmann::json config_json(const recon::ReconConfig& c) {
  return {{"nex", c.nex},           {"hidden", c.hidden},         {"layers", c.layers},
          {"kernel", c.kernel},     {"steps", c.steps},           {"cg_iters", c.cg_iters},
          {"cg_tol", c.cg_tol},     {"lambda_init", c.lambda_init}, {"lambda_min", c.lambda_min},
          {"delta", c.delta},       {"shared_weights", c.shared_weights}, {"mask_channels", c.mask_channels}};
}

inline recon::ReconConfig config_from_json(const nlohmann::json& j) {
  recon::ReconConfig c;
  c.nex = j.at("nex");
  c.hidden = j.at("hidden");
  c.layers = j.at("layers");
  c.kernel = j.at("kernel");
  c.steps = j.at("steps");
  c.cg_iters = j.at("cg_iters");
  c.cg_tol = j.at("cg_tol");
  c.lambda_init = j.at("lambda_init");
  c.lambda_min = j.at("lambda_min");
  c.delta = j.at("delta");
  c.shared_weights = j.at("shared_weights");
  c.mask_channels = j.at("mask_channels");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& dir, const Model& m, const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  const auto names = m.theta.names();
  const auto tensors = m.theta.tensors();
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t k = 0; k < names.size(); ++k) {
    io::write_nxt(dir / (names[k] + ".nxt"), *tensors[k]);
    files.push_back(names[k] + ".nxt");
  }
  io::write_nxt(dir / "psi.nxt", m.psi);
  const auto& g = m.plan.grid;
  nlohmann::json j{{"format", "nexop-checkpoint-1"},
                   {"method", std::string(sampling::to_string(m.plan.method))},
                   {"acceleration", m.plan.acceleration},
                   {"height", g.height},
                   {"width", g.width},
                   {"nex", g.nex},
                   {"acs_height", g.acs.height},
                   {"acs_width", g.acs.width},
                   {"vd_seed", m.vd_seed},
                   {"recon", config_json(m.theta.config)},
                   {"tensors", files},
                   {"psi", "psi.nxt"},
                   {"extra", extra}};
  std::ofstream(dir / "checkpoint.json") << j.dump(2) << "\n";
}

inline Model load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw ConfigError("missing checkpoint: " + (dir / "checkpoint.json").string());
  nlohmann::json j;
  try {
    in >> j;
    if (j.at("format") != "nexop-checkpoint-1") throw FormatError("unsupported checkpoint format");
    sampling::Grid g{j.at("height"), j.at("width"), j.at("nex"), {j.at("acs_height"), j.at("acs_width")}};
    const std::uint64_t vd_seed = j.at("vd_seed");
    Model m;
    m.vd_seed = vd_seed;
    m.plan = sampling::baseline_mask_plan(sampling::parse_method(j.at("method").get<std::string>()),
                                          j.at("acceleration").get<double>(), g, vd_seed);
    m.theta = recon::init_params(config_from_json(j.at("recon")), 0);
    const auto names = m.theta.names();
    auto tensors = m.theta.tensors();
    for (std::size_t k = 0; k < names.size(); ++k) {
      Tensor t = io::read_nxt(dir / (names[k] + ".nxt")).to_tensor();
      if (t.shape() != tensors[k]->shape()) throw FormatError("checkpoint tensor " + names[k] + " has the wrong shape");
      *tensors[k] = std::move(t);
    }
    m.psi = io::read_nxt(dir / "psi.nxt").to_tensor();
    if (m.psi.size() != m.plan.logit_count) throw FormatError("checkpoint logits do not match the plan");
    m.psi = m.psi.reshaped({m.plan.logit_count});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

inline void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
  std::ofstream out(path);
  out << "epoch,train_loss,val_loss,tau,lr_theta,lr_psi,sum_q";
  const std::size_t nex = rows.empty() ? 0 : rows.front().rates.size();
  for (std::size_t n = 0; n < nex; ++n) out << ",rate_nex" << n + 1;
  out << "\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.epoch << ",";
    if (std::isfinite(r.train_loss)) out << r.train_loss;
    out << "," << r.val_loss << "," << r.tau << "," << r.lr_theta << "," << r.lr_psi << "," << r.sum_q;
    for (double v : r.rates) out << "," << v;
    out << "\n";
  }
}

}  // namespace nexop::train
