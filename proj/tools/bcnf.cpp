// bcnf command-line driver.
//
// Exit codes: 0 ok, 1 configuration or I/O error, 2 numerical fault.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bcnf/experiment.hpp"

namespace fs = std::filesystem;
using namespace bcnf;

namespace {

struct Common {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::size_t run = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON)");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--seed", c.seed, "Root seed (overrides the config)");
  cmd->add_flag("--force", c.force, "Overwrite existing outputs");
  cmd->add_option("--run", c.run, "Run index used for seed derivation");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void guard(const fs::path& file, bool force) {
  require(force || !fs::exists(file),
          "'" + file.string() + "' exists; use --force to overwrite");
}

const PosteriorSetting& find_setting(const ExperimentConfig& cfg, const std::string& name,
                                     Method method, PosteriorSetting& fallback) {
  for (const auto& s : cfg.settings)
    if ((name.empty() || s.name == name) && s.method == method) return s;
  require(name.empty(), "no setting named '" + name + "' with that method in the config");
  fallback.name = method == Method::vib ? "vib" : "adammcmc";
  fallback.method = method;
  return fallback;
}

std::vector<QuantileGrid> grids_for(const ExperimentConfig& cfg,
                                    const std::vector<BinEnsembleStats>& stats) {
  ExperimentConfig c = cfg;
  c.grids.clear();
  for (const auto& s : stats) c.grids.push_back(s.n_per_dim);
  return build_grids(c);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian continuous normalizing flows on the gamma ring"};
  app.require_subcommand(1);

  Common sample_opt;
  std::size_t sample_n = 0;
  auto* sample = app.add_subcommand("sample-data", "Draw a ring sample set (x,y CSV)");
  add_common(sample, sample_opt);
  sample->add_option("--n", sample_n, "Number of points (default: data.n_train)");

  Common train_opt;
  std::string train_data;
  auto* train = app.add_subcommand("train", "Train the vector field with conditional flow matching");
  add_common(train, train_opt);
  train->add_option("--data", train_data, "Training samples CSV")->required();

  Common post_opt;
  std::string post_method, post_data, post_init, post_setting;
  auto* post = app.add_subcommand("posterior", "Sample a posterior ensemble (vib or mcmc)");
  add_common(post, post_opt);
  post->add_option("method", post_method, "vib | mcmc")
      ->required()
      ->check(CLI::IsMember({"vib", "mcmc"}));
  post->add_option("--data", post_data, "Training samples CSV")->required();
  post->add_option("--init", post_init,
                   "Parameter checkpoint stem (required for mcmc; vib defaults to a fresh init)");
  post->add_option("--setting", post_setting, "Setting name from the config");

  Common gen_opt;
  std::string gen_params, gen_ensemble;
  std::size_t gen_n = 1000;
  auto* gen = app.add_subcommand("generate", "Generate samples from a checkpoint or ensemble");
  add_common(gen, gen_opt);
  gen->add_option("--n", gen_n, "Points per parameter vector");
  auto* gp = gen->add_option("--params", gen_params, "Parameter checkpoint stem");
  auto* ge = gen->add_option("--ensemble", gen_ensemble, "Ensemble checkpoint stem");
  gp->excludes(ge);

  Common cal_opt;
  std::vector<std::string> cal_ensembles, cal_stats;
  std::size_t cal_grid = 5;
  auto* cal = app.add_subcommand("calibrate", "Bin statistics and coverage over independent runs");
  add_common(cal, cal_opt);
  cal->add_option("--ensembles", cal_ensembles, "Ensemble checkpoint stems, one per run");
  cal->add_option("--stats", cal_stats, "Existing bin statistics CSVs, one per run");
  cal->add_option("--grid", cal_grid, "Bins per dimension (with --ensembles)");

  Common amp_opt;
  std::vector<std::string> amp_stats;
  auto* amp = app.add_subcommand("amplify", "Amplification curve and power-law fit for one run");
  add_common(amp, amp_opt);
  amp->add_option("--stats", amp_stats, "Bin statistics CSVs, one per grid")->required();

  Common clo_opt;
  std::vector<std::string> clo_stats;
  auto* clo = app.add_subcommand("closure", "JS closure check for one run");
  add_common(clo, clo_opt);
  clo->add_option("--stats", clo_stats, "Bin statistics CSVs, one per grid")->required();

  Common pipe_opt;
  auto* pipe = app.add_subcommand("pipeline", "Run the full staged experiment");
  add_common(pipe, pipe_opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*sample) {
      const auto cfg = load(sample_opt);
      const fs::path file = fs::path(sample_opt.out) / "samples.csv";
      guard(file, sample_opt.force);
      const auto set = sample_ring(cfg.ring, sample_n ? sample_n : cfg.n_train,
                                   run_seeds(cfg, sample_opt.run).data);
      io::write_samples(file, set.points);
      std::cout << file.string() << "\n";
    } else if (*train) {
      const auto cfg = load(train_opt);
      const fs::path out = train_opt.out;
      guard(io::bin_path(out / "cfm"), train_opt.force);
      const auto seeds = run_seeds(cfg, train_opt.run);
      CfmConfig cc = cfg.cfm;
      cc.seed = seeds.cfm;
      const VectorField field(cfg.net);
      const auto res = train_cfm(field, io::read_samples(train_data), cc,
                                 init_params(cfg.net, seeds.init));
      io::write_loss_history(out / "cfm_loss.csv", res.history);
      io::save_params(out / "cfm", cfg.net, res.theta,
                      {{"stage", "cfm"}, {"config", config_json(cfg)}});
      std::cout << "final loss " << res.history.back().loss << "\n";
    } else if (*post) {
      const auto cfg = load(post_opt);
      const fs::path out = post_opt.out;
      guard(io::bin_path(out / "ensemble"), post_opt.force);
      PosteriorSetting fallback;
      const Method method = post_method == "vib" ? Method::vib : Method::adammcmc;
      const auto& setting = find_setting(cfg, post_setting, method, fallback);
      require(method == Method::vib || !post_init.empty(), "posterior mcmc needs --init");
      const VectorField field(cfg.net);
      const auto data = io::read_samples(post_data);
      const ParamVector init = post_init.empty() ? init_params(cfg.net, run_seeds(cfg, post_opt.run).init)
                                                 : io::load_params(post_init, &cfg.net);
      auto res = run_posterior(cfg, setting, field, data, init, init, post_opt.run);
      io::json side{{"setting", setting.name}, {"config", config_json(cfg)}};
      if (res.vib) {
        io::write_vib_history(out / "vib_loss.csv", res.vib->history);
        io::save_posterior(out / "posterior", cfg.net, res.vib->q);
      }
      if (res.chain) {
        side["acceptance_history"] = res.chain->acceptance_history;
        std::cout << "acceptance " << res.chain->acceptance_history.back() << "\n";
      }
      io::save_ensemble(out / "ensemble", cfg.net, res.ensemble, side);
      std::cout << "members " << res.ensemble.size() << "\n";
    } else if (*gen) {
      const auto cfg = load(gen_opt);
      require(!gen_params.empty() || !gen_ensemble.empty(), "generate needs --params or --ensemble");
      const VectorField field(cfg.net);
      PosteriorEnsemble ens;
      if (!gen_params.empty()) ens.members.push_back(io::load_params(gen_params, &cfg.net));
      else ens = io::load_ensemble(gen_ensemble, &cfg.net);
      for (std::size_t i = 0; i < ens.size(); ++i) {
        const fs::path file = fs::path(gen_opt.out) /
                              (ens.size() == 1 ? "generated.csv"
                                               : "generated_" + std::to_string(i) + ".csv");
        guard(file, gen_opt.force);
        const auto set = generate(field, ens.members[i], gen_n,
                                  member_generation_seed(derive_seed(cfg.seed, "generate", gen_opt.run), i, false),
                                  cfg.generation_solver());
        io::write_samples(file, set.points);
      }
    } else if (*cal) {
      const auto cfg = load(cal_opt);
      const fs::path out = cal_opt.out;
      std::vector<BinEnsembleStats> runs;
      require(cal_ensembles.empty() != cal_stats.empty(), "calibrate needs --ensembles or --stats");
      if (!cal_ensembles.empty()) {
        ExperimentConfig c = cfg;
        c.grids = {cal_grid};
        const auto grids = build_grids(c);
        io::write_json(out / ("grid_n" + std::to_string(cal_grid) + ".json"), io::grid_json(grids[0]));
        const VectorField field(cfg.net);
        for (std::size_t r = 0; r < cal_ensembles.size(); ++r) {
          const auto ens = io::load_ensemble(cal_ensembles[r], &cfg.net);
          const fs::path file = out / ("binstats_run" + std::to_string(r) + ".csv");
          guard(file, cal_opt.force);
          runs.push_back(ensemble_stats(field, grids[0], ens, cfg.generation.size_for(grids[0].n_bins()),
                                        derive_seed(cfg.seed, "generate", r), cfg.generation_solver()));
          io::write_bin_stats(file, runs.back());
        }
      } else {
        for (const auto& f : cal_stats) runs.push_back(io::read_bin_stats(f));
      }
      const auto curve = coverage(runs, nominal_grid());
      const fs::path file = out / ("coverage_n" + std::to_string(runs[0].n_per_dim) + ".csv");
      guard(file, cal_opt.force);
      io::write_coverage(file, curve);
      const auto d = deviation(curve);
      std::cout << "MD " << d.md << "  MAD " << d.mad << "  MAD_r " << d.mad_r << "  MAD_phi "
                << d.mad_phi << "\n";
    } else if (*amp) {
      const auto cfg = load(amp_opt);
      std::vector<BinEnsembleStats> stats;
      for (const auto& f : amp_stats) stats.push_back(io::read_bin_stats(f));
      const auto curve = amplification_curve(stats, static_cast<double>(cfg.n_train));
      const fs::path file = fs::path(amp_opt.out) / "amplification.csv";
      guard(file, amp_opt.force);
      io::write_amplification(file, curve);
      if (curve.size() >= 2) {
        const auto fit = fit_amplification(curve, cfg.fit_window);
        std::cout << "a' " << fit.a_prime << "  b " << fit.b << "  residual " << fit.residual << "\n";
      }
    } else if (*clo) {
      const auto cfg = load(clo_opt);
      std::vector<BinEnsembleStats> stats;
      for (const auto& f : clo_stats) stats.push_back(io::read_bin_stats(f));
      const auto grids = grids_for(cfg, stats);
      std::vector<io::ClosureRow> rows;
      for (std::size_t g = 0; g < stats.size(); ++g) {
        const auto rep = amplification_report(stats[g], static_cast<double>(cfg.n_train));
        rows.push_back({rep.n_q, closure_check(stats[g], rep.n_hat, grids[g], cfg.ring,
                                               derive_seed(derive_seed(cfg.seed, "closure", clo_opt.run), "grid", g),
                                               cfg.closure_truth_draws)});
      }
      const fs::path file = fs::path(clo_opt.out) / "closure.csv";
      guard(file, clo_opt.force);
      io::write_closure(file, rows);
    } else if (*pipe) {
      require(!pipe_opt.config.empty(), "pipeline needs --config");
      const auto cfg = load(pipe_opt);
      const auto art = run_pipeline(cfg, pipe_opt.out, {pipe_opt.force, &std::cerr});
      std::cout << "config " << art.config_hash << ", " << art.files.size() << " report files in "
                << art.out_dir.string() << "\n";
    }
  } catch (const NumericalFault& e) {
    std::cerr << "numerical fault: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
