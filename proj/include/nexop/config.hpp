#pragma once

// Run configuration read from an INI file with sections [data], [plan],
// [recon], [schedule] and [eval]. Keys before the first section are global
// (seed, output). Unknown sections and keys are rejected.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>

#include "nexop/error.hpp"
#include "nexop/phantom.hpp"
#include "nexop/recon.hpp"
#include "nexop/sampling.hpp"
#include "nexop/train.hpp"

namespace nexop::config {

struct DataConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t nex = 3;
  double sigma = 0.15;
  std::size_t n_train = 64;
  std::size_t n_val = 12;
  std::size_t n_test = 16;
  std::size_t min_ellipses = 4;
  std::size_t max_ellipses = 8;
  double phase_scale = 0.6;
  double texture_amplitude = 0.08;
  std::string dir;  // empty: <output>/data
};

struct PlanConfig {
  sampling::Method method = sampling::Method::NexOP;
  double acceleration = 4.0;
  std::size_t budget = 0;  // optional B; overrides acceleration when set
  std::size_t acs_height = 8;
  std::size_t acs_width = 8;
  std::uint64_t vd_seed = 7;
};

struct EvalConfig {
  double tau_test = 0.5;
  std::uint64_t eval_seed = 20240;
  double roi_threshold = 0.1;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output = "runs/default";
  DataConfig data;
  PlanConfig plan;
  recon::ReconConfig recon;
  train::TrainSchedule schedule;
  EvalConfig eval;

  std::filesystem::path data_dir() const {
    return data.dir.empty() ? std::filesystem::path(output) / "data" : std::filesystem::path(data.dir);
  }

  sampling::Grid grid() const { return {data.height, data.width, data.nex, {plan.acs_height, plan.acs_width}}; }

  phantom::PhantomSpec phantom_spec() const {
    phantom::PhantomSpec s;
    s.height = data.height;
    s.width = data.width;
    s.min_ellipses = data.min_ellipses;
    s.max_ellipses = data.max_ellipses;
    s.phase_scale = data.phase_scale;
    s.texture_amplitude = data.texture_amplitude;
    return s;
  }

  phantom::DatasetManifest manifest() const {
    return phantom::make_manifest(phantom_spec(), data.nex, data.sigma, seed, data.n_train, data.n_val, data.n_test);
  }

  /// R from the plan, or from B via R = NEX·D / (B + N_ACS).
  double acceleration() const {
    if (plan.budget == 0) return plan.acceleration;
    return sampling::BudgetSpec{grid(), plan.budget}.acceleration();
  }

  sampling::MaskPlan mask_plan(sampling::Method m) const {
    return sampling::baseline_mask_plan(m, acceleration(), grid(), plan.vd_seed);
  }

  train::TrainSchedule train_schedule() const {
    train::TrainSchedule s = schedule;
    s.seed = seed;
    s.tau_test = eval.tau_test;
    s.eval_seed = eval.eval_seed;
    return s;
  }

  /// Checks every constraint before any compute.
  void validate() const {
    const sampling::Grid g = grid();
    g.validate();
    if (data.sigma < 0) throw ConfigError("data.sigma must be >= 0");
    if (data.n_train == 0) throw ConfigError("data.n_train must be positive");
    if (data.min_ellipses > data.max_ellipses) throw ConfigError("data.min_ellipses exceeds data.max_ellipses");
    const sampling::BudgetSpec spec{g, plan.budget};
    if (plan.budget > 0) {
      spec.validate();
    } else {
      if (!(plan.acceleration > 0) || !std::isfinite(plan.acceleration))
        throw ConfigError("plan.R must be a positive number");
      const double total = static_cast<double>(g.nex * g.locations()) / plan.acceleration;
      const double b = std::floor(total + 1e-9) - static_cast<double>(g.acs_count());
      if (b > static_cast<double>(spec.optimizable()))
        throw ConfigError("plan.R = " + std::to_string(plan.acceleration) + " implies budget B = " +
                          std::to_string(static_cast<long long>(b)) + " which exceeds N_optim = NEX·D − N_ACS = " +
                          std::to_string(spec.optimizable()));
      if (b <= 0) throw ConfigError("plan.R leaves no budget beyond the ACS (B <= 0)");
    }
    recon::ReconConfig rc = recon;
    rc.nex = data.nex;
    rc.validate();
    train_schedule().validate();
    if (!(eval.tau_test > 0)) throw ConfigError("eval.tau_test must be > 0");
    if (!(eval.roi_threshold > 0) || eval.roi_threshold >= 1) throw ConfigError("eval.roi_threshold must be in (0,1)");
    (void)mask_plan(plan.method);
  }

  recon::ReconConfig recon_config() const {
    recon::ReconConfig rc = recon;
    rc.nex = data.nex;
    return rc;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (!in || !in.eof() || v.empty()) throw ConfigError("invalid value '" + v + "' for " + key);
  if constexpr (std::is_unsigned_v<T>)
    if (v.find('-') != std::string::npos) throw ConfigError("negative value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("invalid boolean '" + v + "' for " + key);
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline std::map<std::string, Setter> setters() {
  std::map<std::string, Setter> s;
  auto sz = [](std::size_t& (*get)(RunConfig&)) {
    return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<std::size_t>(k, v); };
  };
  auto dbl = [](double& (*get)(RunConfig&)) {
    return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<double>(k, v); };
  };
  auto u64 = [](std::uint64_t& (*get)(RunConfig&)) {
    return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<std::uint64_t>(k, v); };
  };
  auto flag = [](bool& (*get)(RunConfig&)) {
    return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_bool(k, v); };
  };

  s["seed"] = u64([](RunConfig& c) -> std::uint64_t& { return c.seed; });
  s["output"] = [](RunConfig& c, const std::string&, const std::string& v) { c.output = v; };

  s["data.height"] = sz([](RunConfig& c) -> std::size_t& { return c.data.height; });
  s["data.width"] = sz([](RunConfig& c) -> std::size_t& { return c.data.width; });
  s["data.nex"] = sz([](RunConfig& c) -> std::size_t& { return c.data.nex; });
  s["data.sigma"] = dbl([](RunConfig& c) -> double& { return c.data.sigma; });
  s["data.n_train"] = sz([](RunConfig& c) -> std::size_t& { return c.data.n_train; });
  s["data.n_val"] = sz([](RunConfig& c) -> std::size_t& { return c.data.n_val; });
  s["data.n_test"] = sz([](RunConfig& c) -> std::size_t& { return c.data.n_test; });
  s["data.min_ellipses"] = sz([](RunConfig& c) -> std::size_t& { return c.data.min_ellipses; });
  s["data.max_ellipses"] = sz([](RunConfig& c) -> std::size_t& { return c.data.max_ellipses; });
  s["data.phase_scale"] = dbl([](RunConfig& c) -> double& { return c.data.phase_scale; });
  s["data.texture_amplitude"] = dbl([](RunConfig& c) -> double& { return c.data.texture_amplitude; });
  s["data.dir"] = [](RunConfig& c, const std::string&, const std::string& v) { c.data.dir = v; };

  s["plan.method"] = [](RunConfig& c, const std::string&, const std::string& v) {
    c.plan.method = sampling::parse_method(v);
  };
  s["plan.R"] = dbl([](RunConfig& c) -> double& { return c.plan.acceleration; });
  s["plan.budget"] = sz([](RunConfig& c) -> std::size_t& { return c.plan.budget; });
  s["plan.acs_height"] = sz([](RunConfig& c) -> std::size_t& { return c.plan.acs_height; });
  s["plan.acs_width"] = sz([](RunConfig& c) -> std::size_t& { return c.plan.acs_width; });
  s["plan.vd_seed"] = u64([](RunConfig& c) -> std::uint64_t& { return c.plan.vd_seed; });

  s["recon.hidden"] = sz([](RunConfig& c) -> std::size_t& { return c.recon.hidden; });
  s["recon.layers"] = sz([](RunConfig& c) -> std::size_t& { return c.recon.layers; });
  s["recon.steps"] = sz([](RunConfig& c) -> std::size_t& { return c.recon.steps; });
  s["recon.cg_iters"] = sz([](RunConfig& c) -> std::size_t& { return c.recon.cg_iters; });
  s["recon.cg_tol"] = dbl([](RunConfig& c) -> double& { return c.recon.cg_tol; });
  s["recon.lambda_init"] = dbl([](RunConfig& c) -> double& { return c.recon.lambda_init; });
  s["recon.lambda_min"] = dbl([](RunConfig& c) -> double& { return c.recon.lambda_min; });
  s["recon.shared_weights"] = flag([](RunConfig& c) -> bool& { return c.recon.shared_weights; });
  s["recon.mask_channels"] = flag([](RunConfig& c) -> bool& { return c.recon.mask_channels; });

  s["schedule.epochs"] = sz([](RunConfig& c) -> std::size_t& { return c.schedule.epochs; });
  s["schedule.batch_size"] = sz([](RunConfig& c) -> std::size_t& { return c.schedule.batch_size; });
  s["schedule.lr_theta"] = dbl([](RunConfig& c) -> double& { return c.schedule.lr_theta; });
  s["schedule.lr_psi"] = dbl([](RunConfig& c) -> double& { return c.schedule.lr_psi; });
  s["schedule.lr_halving"] = sz([](RunConfig& c) -> std::size_t& { return c.schedule.lr_halving; });
  s["schedule.tau0"] = dbl([](RunConfig& c) -> double& { return c.schedule.tau0; });
  s["schedule.tau_decay"] = dbl([](RunConfig& c) -> double& { return c.schedule.tau_decay; });
  s["schedule.tau_floor"] = dbl([](RunConfig& c) -> double& { return c.schedule.tau_floor; });
  s["schedule.clip_theta"] = dbl([](RunConfig& c) -> double& { return c.schedule.clip_theta; });
  s["schedule.clip_psi"] = dbl([](RunConfig& c) -> double& { return c.schedule.clip_psi; });
  s["schedule.psi_init_std"] = dbl([](RunConfig& c) -> double& { return c.schedule.psi_init_std; });
  s["schedule.debug_checks"] = flag([](RunConfig& c) -> bool& { return c.schedule.debug_checks; });

  s["eval.tau_test"] = dbl([](RunConfig& c) -> double& { return c.eval.tau_test; });
  s["eval.eval_seed"] = u64([](RunConfig& c) -> std::uint64_t& { return c.eval.eval_seed; });
  s["eval.roi_threshold"] = dbl([](RunConfig& c) -> double& { return c.eval.roi_threshold; });
  return s;
}

}  // namespace detail

/// Applies one "section.key" = value assignment (global keys have no section).
inline void set_value(RunConfig& c, const std::string& key, const std::string& value) {
  static const auto table = detail::setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second(c, key, value);
}

/// Applies "section.key=value" overrides.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like section.key=value");
  set_value(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline RunConfig parse_ini(std::istream& in, const std::string& name = "<config>") {
  static const std::set<std::string> sections{"data", "plan", "recon", "schedule", "eval"};
  RunConfig c;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    try {
      set_value(c, section.empty() ? key : section + "." + key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return c;
}

inline RunConfig load_ini(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_ini(in, path.string());
}

}  // namespace nexop::config
