// nexop command-line driver: gen-data, train, eval, draw-masks, analyze, compare.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nexop/nexop.hpp"

namespace fs = std::filesystem;
using namespace nexop;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "INI run configuration");
  cmd->add_option("--set", c.overrides, "Override a key, e.g. --set schedule.epochs=2")->take_all();
  cmd->add_option("-o,--output", c.output, "Output directory (overrides the config)");
  cmd->add_option("--seed", c.seed, "Global seed (overrides the config)");
}

config::RunConfig load(const Common& c) {
  config::RunConfig cfg = c.config.empty() ? config::RunConfig{} : config::load_ini(c.config);
  for (const auto& o : c.overrides) config::apply_override(cfg, o);
  if (!c.output.empty()) cfg.output = c.output;
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  if (cfg.acceleration() <= 1.0 + 1e-12) std::cerr << "warning: R = 1, no acceleration\n";
  return cfg;
}

phantom::Dataset load_data(const config::RunConfig& cfg) {
  const fs::path dir = cfg.data_dir();
  if (!fs::exists(dir / "manifest.json"))
    throw ConfigError("no dataset at " + dir.string() + " (run gen-data first)");
  phantom::Dataset d = phantom::read_dataset(dir);
  const auto& m = d.manifest;
  if (m.spec.height != cfg.data.height || m.spec.width != cfg.data.width || m.nex != cfg.data.nex)
    throw ConfigError("dataset at " + dir.string() + " does not match the configured grid or NEX");
  return d;
}

fs::path checkpoint_dir(const config::RunConfig& cfg, sampling::Method m) {
  return fs::path(cfg.output) / "checkpoints" / (std::string(sampling::to_string(m)) + "_seed" + std::to_string(cfg.seed));
}

struct Trained {
  train::Model model;
  bool diverged = false;
  std::string failure;
};

Trained run_training(const config::RunConfig& cfg, const phantom::Dataset& data, sampling::Method method,
                     const fs::path& out, bool verbose) {
  const auto plan = cfg.mask_plan(method);
  const auto sched = cfg.train_schedule();
  train::Model model = train::init_model(plan, cfg.recon_config(), cfg.seed, sched.psi_init_std, cfg.plan.vd_seed);
  train::TrainOptions opts;
  if (verbose)
    opts.on_epoch = [](const train::HistoryRow& r) {
      std::printf("epoch %3zu  train %.6g  val %.6g  tau %.4f  sum_q %.2f\n", r.epoch, r.train_loss, r.val_loss, r.tau,
                  r.sum_q);
      std::fflush(stdout);
    };
  const train::TrainResult res = train::joint_train(data, model, sched, opts);
  nlohmann::json extra{{"seed", cfg.seed},
                       {"best_epoch", res.best_epoch},
                       {"best_val_loss", res.best_val},
                       {"diverged", res.diverged}};
  train::save_checkpoint(out, res.model, extra);
  train::write_history_csv(out / "history.csv", res.history);
  return {res.model, res.diverged, res.failure};
}

void write_eval(const fs::path& prefix, const std::string& method, const std::vector<train::EvalRow>& rows) {
  fs::create_directories(prefix.parent_path().empty() ? fs::path(".") : prefix.parent_path());
  std::ofstream per(prefix.string() + "_per_image.csv");
  per << "method,index,psnr,ssim,fsim,loss,zero_filled_psnr,samples\n";
  per.precision(10);
  std::vector<double> p, s, f;
  for (const auto& r : rows) {
    per << method << "," << r.index << "," << r.psnr << "," << r.ssim << "," << r.fsim << "," << r.loss << ","
        << r.zero_filled_psnr << "," << r.samples << "\n";
    p.push_back(r.psnr);
    s.push_back(r.ssim);
    f.push_back(r.fsim);
  }
  std::ofstream sum(prefix.string() + "_summary.csv");
  sum.precision(10);
  const auto mp = train::mean_std(p), ms = train::mean_std(s), mf = train::mean_std(f);
  sum << "method,psnr_mean,psnr_std,ssim_mean,ssim_std,fsim_mean,fsim_std\n"
      << method << "," << mp.mean << "," << mp.std << "," << ms.mean << "," << ms.std << "," << mf.mean << ","
      << mf.std << "\n";
  std::printf("%s: PSNR %.3f ± %.3f  SSIM %.4f ± %.4f  FSIM %.4f ± %.4f (n=%zu)\n", method.c_str(), mp.mean, mp.std,
              ms.mean, ms.std, mf.mean, mf.std, rows.size());
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  const auto cfg = load(c);
  const auto data = phantom::generate_dataset(cfg.manifest());
  phantom::write_dataset(cfg.data_dir(), data);
  std::printf("wrote %zu/%zu/%zu examples to %s\n", data.train.size(), data.val.size(), data.test.size(),
              cfg.data_dir().string().c_str());
  return 0;
}

int cmd_train(const Common& c, const std::string& method_name, const std::string& out_dir) {
  auto cfg = load(c);
  if (!method_name.empty()) cfg.plan.method = sampling::parse_method(method_name);
  cfg.validate();
  const auto data = load_data(cfg);
  const fs::path out = out_dir.empty() ? checkpoint_dir(cfg, cfg.plan.method) : fs::path(out_dir);
  const Trained t = run_training(cfg, data, cfg.plan.method, out, true);
  if (t.diverged) {
    std::cerr << "error: training diverged: " << t.failure << "; last good checkpoint written to " << out << "\n";
    return 3;
  }
  std::printf("checkpoint written to %s\n", out.string().c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& split, const std::string& out) {
  const auto cfg = load(c);
  const auto data = load_data(cfg);
  const fs::path dir = ckpt.empty() ? checkpoint_dir(cfg, cfg.plan.method) : fs::path(ckpt);
  const train::Model m = train::load_checkpoint(dir);
  const auto rows = train::evaluate(m, data.split(split), cfg.eval.tau_test, cfg.eval.eval_seed, cfg.eval.roi_threshold);
  const fs::path prefix = out.empty() ? dir / ("eval_" + split) : fs::path(out);
  write_eval(prefix, std::string(sampling::to_string(m.plan.method)), rows);
  return 0;
}

int cmd_draw_masks(const Common& c, const std::string& ckpt, const std::string& method_name, std::optional<double> tau,
                   std::size_t counter, const std::string& out) {
  const auto cfg = load(c);
  train::Model m;
  if (!ckpt.empty()) {
    m = train::load_checkpoint(ckpt);
  } else {
    const auto method = method_name.empty() ? cfg.plan.method : sampling::parse_method(method_name);
    m = train::init_model(cfg.mask_plan(method), cfg.recon_config(), cfg.seed, cfg.schedule.psi_init_std,
                          cfg.plan.vd_seed);
  }
  const fs::path dir = out.empty() ? fs::path(cfg.output) / "masks" : fs::path(out);
  fs::create_directories(dir);
  const double t = tau.value_or(cfg.eval.tau_test);
  const Tensor masks = train::eval_masks(m, t, cfg.eval.eval_seed, counter);
  const auto& g = m.plan.grid;
  for (std::size_t n = 0; n < g.nex; ++n) {
    Tensor plane({g.height, g.width});
    std::copy_n(masks.vec().begin() + n * g.locations(), g.locations(), plane.vec().begin());
    io::write_pgm(dir / ("mask_nex" + std::to_string(n + 1) + ".pgm"), plane, 1.0);
  }
  io::write_nxt(dir / "masks.nxt", masks);
  const Tensor q = m.plan.learned() ? sampling::plan_weights(m.plan, m.psi) : Tensor({0});
  io::write_nxt(dir / "q.nxt", q);
  io::write_nxt(dir / "q_maps.nxt", m.plan.learned() ? sampling::weight_maps(m.plan, q) : m.plan.base);
  std::printf("%s: %g acquisitions (target %zu) written to %s\n", std::string(sampling::to_string(m.plan.method)).c_str(),
              masks.sum(), m.plan.total_target, dir.string().c_str());
  return 0;
}

struct AnalysisSource {
  std::string name;
  std::string method;
  double acceleration = 0.0;
  Tensor maps;   // [NEX,H,W] sampling weights
  Tensor masks;  // [NEX,H,W] one realization
  std::vector<bool> acs;
  sampling::Grid grid;
};

int cmd_analyze(const Common& c, const std::vector<std::string>& ckpts, const std::vector<std::string>& map_files,
                const std::string& contrast, std::size_t draws, const std::string& out) {
  const auto cfg = load(c);
  std::vector<AnalysisSource> sources;
  for (const auto& p : ckpts) {
    const train::Model m = train::load_checkpoint(p);
    AnalysisSource s;
    s.name = fs::path(p).filename().string();
    if (s.name.empty()) s.name = fs::path(p).parent_path().filename().string();
    s.method = std::string(sampling::to_string(m.plan.method));
    s.acceleration = m.plan.acceleration;
    s.grid = m.plan.grid;
    s.acs = analysis::acs_flags(m.plan);
    s.maps = m.plan.learned() ? sampling::weight_maps(m.plan, sampling::plan_weights(m.plan, m.psi)) : m.plan.base;
    s.masks = Tensor(s.maps.shape());
    for (std::size_t k = 0; k < std::max<std::size_t>(draws, 1); ++k) s.masks += train::eval_masks(m, cfg.eval.tau_test, cfg.eval.eval_seed, k);
    s.masks *= 1.0 / static_cast<double>(std::max<std::size_t>(draws, 1));
    sources.push_back(std::move(s));
  }
  for (const auto& p : map_files) {
    AnalysisSource s;
    s.name = fs::path(p).stem().string();
    s.method = "external";
    if (fs::path(p).extension() == ".pgm") {
      const Tensor img = io::read_pgm(p);
      s.maps = img.reshaped({1, img.dim(0), img.dim(1)});
    } else {
      s.maps = io::read_nxt(p).to_tensor();
      if (s.maps.rank() == 2) s.maps = s.maps.reshaped({1, s.maps.dim(0), s.maps.dim(1)});
    }
    if (s.maps.rank() != 3) throw ConfigError(p + ": expected an [NEX,H,W] or [H,W] map");
    s.masks = s.maps;
    s.grid = {s.maps.dim(1), s.maps.dim(2), s.maps.dim(0), {cfg.plan.acs_height, cfg.plan.acs_width}};
    s.grid.validate();
    s.acs.assign(s.grid.nex, false);
    s.acs[0] = true;
    s.acceleration = static_cast<double>(s.grid.nex * s.grid.locations()) / std::max(analysis::total_samples(s.maps), 1e-12);
    sources.push_back(std::move(s));
  }
  if (sources.empty()) throw ConfigError("analyze needs at least one --checkpoint or --maps input");

  const fs::path dir = out.empty() ? fs::path(cfg.output) / "analysis" : fs::path(out);
  fs::create_directories(dir);
  std::ofstream csv(dir / "analysis.csv");
  csv << "method,R,contrast,repetition,rate,sigma_u,sigma_v\n";
  csv.precision(10);
  std::ofstream trend(dir / "trend.csv");
  trend << "source,method,rates,monotone_decreasing\n";
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // method -> (decreasing, total)
  for (const auto& s : sources) {
    const auto rates = analysis::per_nex_rates(s.masks, s.grid, s.acs);
    std::string rate_list;
    bool decreasing = true;
    for (std::size_t n = 0; n < rates.size(); ++n) {
      Tensor q({s.grid.height, s.grid.width});
      std::copy_n(s.maps.vec().begin() + n * s.grid.locations(), s.grid.locations(), q.vec().begin());
      const Tensor smooth = analysis::smooth_map(q);
      analysis::MomentSummary mom;
      if (smooth.sum() > 0) mom = analysis::marginal_std(analysis::normalize_distribution(smooth));
      csv << s.method << "," << s.acceleration << "," << contrast << "," << n + 1 << "," << rates[n] << ","
          << mom.sigma_u << "," << mom.sigma_v << "\n";
      io::write_pgm(dir / (s.name + "_smoothed_nex" + std::to_string(n + 1) + ".pgm"), smooth,
                    std::max(smooth.max(), 1e-12));
      rate_list += (n ? ";" : "") + std::to_string(rates[n]);
      if (n > 0 && rates[n] > rates[n - 1]) decreasing = false;
    }
    const Tensor acc = analysis::accumulate(s.masks);
    io::write_pgm(dir / (s.name + "_accumulated.pgm"), acc, static_cast<double>(s.grid.nex));
    io::write_nxt(dir / (s.name + "_accumulated.nxt"), acc);
    trend << s.name << "," << s.method << "," << rate_list << "," << (decreasing ? "yes" : "no") << "\n";
    auto& t = tally[s.method];
    t.first += decreasing ? 1 : 0;
    t.second += 1;
    std::printf("%s (%s): per-NEX rates %s\n", s.name.c_str(), s.method.c_str(), rate_list.c_str());
  }
  for (const auto& [method, t] : tally)
    std::printf("%s: rates monotonically decreasing along NEX in %zu of %zu inputs\n", method.c_str(), t.first,
                t.second);
  std::printf("analysis written to %s\n", dir.string().c_str());
  return 0;
}

int cmd_compare(const Common& c, bool train_inline, std::vector<std::uint64_t> seeds, const std::string& out) {
  const auto base_cfg = load(c);
  const auto data = load_data(base_cfg);
  if (seeds.empty()) seeds.push_back(base_cfg.seed);
  const fs::path dir = out.empty() ? fs::path(base_cfg.output) / "compare" : fs::path(out);
  fs::create_directories(dir);

  std::ofstream per(dir / "compare_per_image.csv");
  per << "method,seed,index,psnr,ssim,fsim,samples\n";
  per.precision(10);
  std::ofstream csv(dir / "compare.csv");
  csv << "method,psnr_mean,psnr_std,ssim_mean,ssim_std,fsim_mean,fsim_std,expected_samples,target_samples\n";
  csv.precision(10);
  std::map<std::string, std::ofstream> bars;
  for (const std::string metric : {"psnr", "ssim", "fsim"}) {
    bars[metric].open(dir / ("bars_" + metric + ".dat"));
    bars[metric] << "# index method mean std\n";
  }
  int status = 0;
  std::size_t index = 0;
  for (sampling::Method method : sampling::kAllMethods) {
    std::vector<double> p, s, f;
    double expected = 0.0;
    std::size_t target = 0;
    for (std::uint64_t seed : seeds) {
      config::RunConfig cfg = base_cfg;
      cfg.seed = seed;
      const fs::path ck = checkpoint_dir(cfg, method);
      train::Model m;
      if (train_inline) {
        std::printf("training %s (seed %llu)\n", std::string(sampling::to_string(method)).c_str(),
                    static_cast<unsigned long long>(seed));
        std::fflush(stdout);
        const Trained t = run_training(cfg, data, method, ck, false);
        if (t.diverged) {
          std::cerr << "error: " << sampling::to_string(method) << " diverged: " << t.failure << "\n";
          status = 3;
        }
        m = t.model;
      } else {
        m = train::load_checkpoint(ck);
      }
      const auto rows = train::evaluate(m, data.test, cfg.eval.tau_test, cfg.eval.eval_seed, cfg.eval.roi_threshold);
      for (const auto& r : rows) {
        per << sampling::to_string(method) << "," << seed << "," << r.index << "," << r.psnr << "," << r.ssim << ","
            << r.fsim << "," << r.samples << "\n";
        p.push_back(r.psnr);
        s.push_back(r.ssim);
        f.push_back(r.fsim);
      }
      expected = m.plan.learned() ? sampling::weight_maps(m.plan, sampling::plan_weights(m.plan, m.psi)).sum()
                                  : m.plan.base.sum();
      target = m.plan.total_target;
    }
    const auto mp = train::mean_std(p), ms = train::mean_std(s), mf = train::mean_std(f);
    const std::string name(sampling::to_string(method));
    csv << name << "," << mp.mean << "," << mp.std << "," << ms.mean << "," << ms.std << "," << mf.mean << ","
        << mf.std << "," << expected << "," << target << "\n";
    bars["psnr"] << index << " " << name << " " << mp.mean << " " << mp.std << "\n";
    bars["ssim"] << index << " " << name << " " << ms.mean << " " << ms.std << "\n";
    bars["fsim"] << index << " " << name << " " << mf.mean << " " << mf.std << "\n";
    std::printf("%-12s PSNR %.3f ± %.3f  SSIM %.4f ± %.4f  FSIM %.4f ± %.4f  samples %.1f / %zu\n", name.c_str(),
                mp.mean, mp.std, ms.mean, ms.std, mf.mean, mf.std, expected, target);
    ++index;
  }
  std::printf("comparison written to %s\n", dir.string().c_str());
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint multi-repetition k-space sampling and reconstruction toolkit"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, draw_c, an_c, cmp_c;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-repetition phantom dataset");
  add_common(gen, gen_c);

  auto* tr = app.add_subcommand("train", "Jointly train sampling and reconstruction for one method");
  add_common(tr, train_c);
  std::string train_method, train_out;
  tr->add_option("-m,--method", train_method, "Sampling method (overrides plan.method)");
  tr->add_option("--checkpoint-dir", train_out, "Where to write the checkpoint");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint with PSNR/SSIM/FSIM");
  add_common(ev, eval_c);
  std::string eval_ckpt, eval_split = "test", eval_out;
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint directory");
  ev->add_option("--split", eval_split, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--prefix", eval_out, "Output CSV prefix");

  auto* dm = app.add_subcommand("draw-masks", "Draw and write a mask set and its sampling weights");
  add_common(dm, draw_c);
  std::string dm_ckpt, dm_method, dm_out;
  std::optional<double> dm_tau;
  std::size_t dm_counter = 0;
  dm->add_option("--checkpoint", dm_ckpt, "Checkpoint directory (otherwise an untrained plan)");
  dm->add_option("-m,--method", dm_method, "Sampling method when no checkpoint is given");
  dm->add_option("--tau", dm_tau, "Temperature (default eval.tau_test)");
  dm->add_option("--counter", dm_counter, "Draw counter");
  dm->add_option("--dir", dm_out, "Output directory");

  auto* an = app.add_subcommand("analyze", "Per-repetition rates, marginal spreads and accumulated masks");
  add_common(an, an_c);
  std::vector<std::string> an_ckpts, an_maps;
  std::string an_contrast = "synthetic", an_out;
  std::size_t an_draws = 1;
  an->add_option("--checkpoint", an_ckpts, "Checkpoint directories")->take_all();
  an->add_option("--maps", an_maps, "Weight maps or masks as NXT [NEX,H,W] or PGM")->take_all();
  an->add_option("--contrast", an_contrast, "Contrast label for the CSV");
  an->add_option("--draws", an_draws, "Mask draws averaged for rates and accumulation");
  an->add_option("--dir", an_out, "Output directory");

  auto* cmp = app.add_subcommand("compare", "Evaluate all six methods at equal budget");
  add_common(cmp, cmp_c);
  bool cmp_inline = false;
  std::vector<std::uint64_t> cmp_seeds;
  std::string cmp_out;
  cmp->add_flag("--train-inline", cmp_inline, "Train each method before evaluating");
  cmp->add_option("--seeds", cmp_seeds, "Seeds to aggregate over")->take_all();
  cmp->add_option("--dir", cmp_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_c);
    if (*tr) return cmd_train(train_c, train_method, train_out);
    if (*ev) return cmd_eval(eval_c, eval_ckpt, eval_split, eval_out);
    if (*dm) return cmd_draw_masks(draw_c, dm_ckpt, dm_method, dm_tau, dm_counter, dm_out);
    if (*an) return cmd_analyze(an_c, an_ckpts, an_maps, an_contrast, an_draws, an_out);
    if (*cmp) return cmd_compare(cmp_c, cmp_inline, cmp_seeds, cmp_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
