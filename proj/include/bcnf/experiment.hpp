#pragma once

// Experiment configuration, the staged pipeline and report emission.
//
// Output layout under out_dir:
//   manifest.json                         config echo, hash, completed stages
//   grids/grid_n<n>.json
//   runs/<r>/train.csv, cfm.{bin,json}, cfm_loss.csv
//   runs/<r>/<setting>/ensemble.{bin,json}, posterior.{bin,json} (vib),
//                      vib_loss.csv | acceptance.csv, binstats_n<n>.csv
//   reports/<setting>/coverage_n<n>.csv, amplification_run<r>.csv,
//                     closure_run<r>.csv
//   summary.json
//
// Child seeds: derive_seed(root, "<component>", run).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "bcnf/amplification.hpp"
#include "bcnf/binning.hpp"
#include "bcnf/cfm.hpp"
#include "bcnf/error.hpp"
#include "bcnf/flow.hpp"
#include "bcnf/io.hpp"
#include "bcnf/mcmc.hpp"
#include "bcnf/net.hpp"
#include "bcnf/ring.hpp"
#include "bcnf/rng.hpp"
#include "bcnf/vib.hpp"

namespace bcnf {

inline constexpr const char* kVersion = "1.0.0";

enum class Method { vib, adammcmc };

struct PosteriorSetting {
  std::string name;
  Method method = Method::adammcmc;
  VibConfig vib;
  std::size_t n_draws = 50;
  McmcConfig mcmc;
};

struct GenerationPolicy {
  bool per_bin = false;        // set size = per_bin_points * n_Q
  std::size_t per_bin_points = 1000;
  std::size_t set_size = 100000;  // used when per_bin is false
  std::size_t max_set_size = 0;   // cap, 0 = none

  std::size_t size_for(std::size_t n_bins) const {
    std::size_t n = per_bin ? per_bin_points * n_bins : set_size;
    if (max_set_size > 0) n = std::min(n, max_set_size);
    return n;
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  RingSpec ring;
  std::size_t n_train = 10000;
  std::size_t runs = 5;
  std::size_t reference_size = 1000000;
  NetConfig net;
  CfmConfig cfm;
  std::size_t generation_steps = 100;
  std::size_t likelihood_steps = 100;
  std::size_t chunk = 256;
  std::vector<PosteriorSetting> settings;
  std::vector<std::size_t> grids{2, 5, 10, 32, 100};
  GenerationPolicy generation;
  std::size_t closure_truth_draws = 5;
  std::size_t fit_window = 8;
  std::size_t workers = 0;

  SolverConfig generation_solver() const { return {generation_steps, chunk}; }
  SolverConfig likelihood_solver() const { return {likelihood_steps, chunk}; }

  void validate() const {
    ring.validate();
    net.validate();
    require(net.input_dim == 2, "config: net.input_dim must be 2");
    cfm.validate();
    require(n_train >= 1, "config: data.n_train must be >= 1");
    require(runs >= 1, "config: data.runs must be >= 1");
    require(grids.empty() || runs >= 2, "config: coverage needs data.runs >= 2");
    require(generation_steps >= 1 && likelihood_steps >= 1 && chunk >= 1,
            "config: solver steps and chunk must be >= 1");
    std::set<std::string> names;
    for (const auto& s : settings) {
      require(!s.name.empty(), "config: setting without a name");
      require(s.name.find_first_of("/\\ ") == std::string::npos,
              "config: setting name '" + s.name + "' must not contain '/', '\\' or spaces");
      require(names.insert(s.name).second, "config: duplicate setting name '" + s.name + "'");
      if (s.method == Method::vib) {
        s.vib.validate();
        require(s.n_draws >= 2, "config: setting '" + s.name + "' needs n_draws >= 2");
      } else {
        s.mcmc.validate();
        require(s.mcmc.n_samples >= 2, "config: setting '" + s.name + "' needs n_samples >= 2");
      }
    }
    for (std::size_t n : grids) {
      require(n >= 1, "config: grid sizes must be >= 1");
      require(reference_size >= 100 * n, "config: data.reference_size too small for grid " +
                                             std::to_string(n));
    }
    require(generation.per_bin ? generation.per_bin_points >= 1 : generation.set_size >= 1,
            "config: empty generation budget");
    require(closure_truth_draws >= 1, "config: closure.truth_draws must be >= 1");
    require(fit_window >= 2, "config: amplification.fit_window must be >= 2");
  }
};

// -- JSON <-> config ----------------------------------------------------------

namespace detail {

using json = io::json;

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  require(j.is_object(), "config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    require(ok, "config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& target, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + where + "." + key + "' has the wrong type");
  }
}

inline json vib_json(const VibConfig& c) {
  return {{"k", c.k},
          {"prior_std", c.prior_std},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batches_per_epoch", c.batches_per_epoch},
          {"batch_size", c.batch_size},
          {"sigma_min", c.sigma_min},
          {"kl_scale", c.kl_scale},
          {"freeze_rho", c.freeze_rho},
          {"stop_window", c.stop_window},
          {"stop_tolerance", c.stop_tolerance}};
}

inline json mcmc_json(const McmcConfig& c) {
  return {{"sigma", c.sigma},
          {"sigma_delta", c.sigma_delta},
          {"lambda", c.lambda},
          {"learning_rate", c.learning_rate},
          {"thin_gap", c.thin_gap},
          {"n_samples", c.n_samples},
          {"burn_in", c.burn_in},
          {"batch_size", c.batch_size}};
}

}  // namespace detail

inline ExperimentConfig parse_config(const io::json& j) {
  using detail::check_keys;
  using detail::read_opt;
  ExperimentConfig c;
  check_keys(j, {"seed", "data", "net", "cfm", "solver", "settings", "grids", "generation",
                 "closure", "amplification", "workers"},
             "");
  read_opt(j, "seed", c.seed, "");
  read_opt(j, "workers", c.workers, "");
  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, {"inner_radius", "gamma_shape", "gamma_rate", "n_train", "runs",
                   "reference_size"},
               "data");
    read_opt(d, "inner_radius", c.ring.inner_radius, "data");
    read_opt(d, "gamma_shape", c.ring.gamma_shape, "data");
    read_opt(d, "gamma_rate", c.ring.gamma_rate, "data");
    read_opt(d, "n_train", c.n_train, "data");
    read_opt(d, "runs", c.runs, "data");
    read_opt(d, "reference_size", c.reference_size, "data");
  }
  if (j.contains("net")) {
    const auto& n = j["net"];
    check_keys(n, {"hidden_layers", "hidden_width", "input_dim"}, "net");
    read_opt(n, "hidden_layers", c.net.hidden_layers, "net");
    read_opt(n, "hidden_width", c.net.hidden_width, "net");
    read_opt(n, "input_dim", c.net.input_dim, "net");
  }
  if (j.contains("cfm")) {
    const auto& f = j["cfm"];
    check_keys(f, {"sigma_min", "learning_rate", "epochs", "batches_per_epoch", "batch_size"}, "cfm");
    read_opt(f, "sigma_min", c.cfm.sigma_min, "cfm");
    read_opt(f, "learning_rate", c.cfm.learning_rate, "cfm");
    read_opt(f, "epochs", c.cfm.epochs, "cfm");
    read_opt(f, "batches_per_epoch", c.cfm.batches_per_epoch, "cfm");
    read_opt(f, "batch_size", c.cfm.batch_size, "cfm");
  }
  if (j.contains("solver")) {
    const auto& s = j["solver"];
    check_keys(s, {"generation_steps", "likelihood_steps", "chunk"}, "solver");
    read_opt(s, "generation_steps", c.generation_steps, "solver");
    read_opt(s, "likelihood_steps", c.likelihood_steps, "solver");
    read_opt(s, "chunk", c.chunk, "solver");
  }
  if (j.contains("settings")) {
    require(j["settings"].is_array(), "config: 'settings' must be an array");
    for (const auto& s : j["settings"]) {
      check_keys(s, {"name", "method", "vib", "adammcmc", "n_draws"}, "settings");
      PosteriorSetting p;
      std::string method;
      read_opt(s, "name", p.name, "settings");
      read_opt(s, "method", method, "settings");
      const std::string where = "settings." + p.name;
      if (method == "vib") {
        p.method = Method::vib;
        require(!s.contains("adammcmc"), "config: '" + where + "' is vib but has an adammcmc block");
        read_opt(s, "n_draws", p.n_draws, where);
        if (s.contains("vib")) {
          const auto& v = s["vib"];
          check_keys(v, {"k", "prior_std", "learning_rate", "epochs", "batches_per_epoch",
                         "batch_size", "sigma_min", "kl_scale", "freeze_rho", "stop_window",
                         "stop_tolerance"},
                     where + ".vib");
          const std::string w = where + ".vib";
          read_opt(v, "k", p.vib.k, w);
          read_opt(v, "prior_std", p.vib.prior_std, w);
          read_opt(v, "learning_rate", p.vib.learning_rate, w);
          read_opt(v, "epochs", p.vib.epochs, w);
          read_opt(v, "batches_per_epoch", p.vib.batches_per_epoch, w);
          read_opt(v, "batch_size", p.vib.batch_size, w);
          read_opt(v, "sigma_min", p.vib.sigma_min, w);
          read_opt(v, "kl_scale", p.vib.kl_scale, w);
          read_opt(v, "freeze_rho", p.vib.freeze_rho, w);
          read_opt(v, "stop_window", p.vib.stop_window, w);
          read_opt(v, "stop_tolerance", p.vib.stop_tolerance, w);
        }
      } else if (method == "adammcmc") {
        p.method = Method::adammcmc;
        require(!s.contains("vib") && !s.contains("n_draws"),
                "config: '" + where + "' is adammcmc but has vib options");
        if (s.contains("adammcmc")) {
          const auto& m = s["adammcmc"];
          check_keys(m, {"sigma", "sigma_delta", "lambda", "learning_rate", "thin_gap",
                         "n_samples", "burn_in", "batch_size"},
                     where + ".adammcmc");
          const std::string w = where + ".adammcmc";
          read_opt(m, "sigma", p.mcmc.sigma, w);
          read_opt(m, "sigma_delta", p.mcmc.sigma_delta, w);
          read_opt(m, "lambda", p.mcmc.lambda, w);
          read_opt(m, "learning_rate", p.mcmc.learning_rate, w);
          read_opt(m, "thin_gap", p.mcmc.thin_gap, w);
          read_opt(m, "n_samples", p.mcmc.n_samples, w);
          read_opt(m, "burn_in", p.mcmc.burn_in, w);
          read_opt(m, "batch_size", p.mcmc.batch_size, w);
        }
      } else {
        throw ConfigError("config: '" + where + ".method' must be 'vib' or 'adammcmc'");
      }
      c.settings.push_back(std::move(p));
    }
  }
  read_opt(j, "grids", c.grids, "");
  if (j.contains("generation")) {
    const auto& g = j["generation"];
    check_keys(g, {"policy", "per_bin", "set_size", "max_set_size"}, "generation");
    std::string policy = c.generation.per_bin ? "per_bin" : "fixed";
    read_opt(g, "policy", policy, "generation");
    require(policy == "per_bin" || policy == "fixed",
            "config: 'generation.policy' must be 'per_bin' or 'fixed'");
    c.generation.per_bin = policy == "per_bin";
    read_opt(g, "per_bin", c.generation.per_bin_points, "generation");
    read_opt(g, "set_size", c.generation.set_size, "generation");
    read_opt(g, "max_set_size", c.generation.max_set_size, "generation");
  }
  if (j.contains("closure")) {
    check_keys(j["closure"], {"truth_draws"}, "closure");
    read_opt(j["closure"], "truth_draws", c.closure_truth_draws, "closure");
  }
  if (j.contains("amplification")) {
    check_keys(j["amplification"], {"fit_window"}, "amplification");
    read_opt(j["amplification"], "fit_window", c.fit_window, "amplification");
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(io::read_json(path));
}

/// Fully populated config, defaults included.
inline io::json config_json(const ExperimentConfig& c) {
  io::json settings = io::json::array();
  for (const auto& s : c.settings) {
    io::json e{{"name", s.name}, {"method", s.method == Method::vib ? "vib" : "adammcmc"}};
    if (s.method == Method::vib) {
      e["vib"] = detail::vib_json(s.vib);
      e["n_draws"] = s.n_draws;
    } else {
      e["adammcmc"] = detail::mcmc_json(s.mcmc);
    }
    settings.push_back(std::move(e));
  }
  return {{"seed", c.seed},
          {"data",
           {{"inner_radius", c.ring.inner_radius},
            {"gamma_shape", c.ring.gamma_shape},
            {"gamma_rate", c.ring.gamma_rate},
            {"n_train", c.n_train},
            {"runs", c.runs},
            {"reference_size", c.reference_size}}},
          {"net",
           {{"hidden_layers", c.net.hidden_layers},
            {"hidden_width", c.net.hidden_width},
            {"input_dim", c.net.input_dim}}},
          {"cfm",
           {{"sigma_min", c.cfm.sigma_min},
            {"learning_rate", c.cfm.learning_rate},
            {"epochs", c.cfm.epochs},
            {"batches_per_epoch", c.cfm.batches_per_epoch},
            {"batch_size", c.cfm.batch_size}}},
          {"solver",
           {{"generation_steps", c.generation_steps},
            {"likelihood_steps", c.likelihood_steps},
            {"chunk", c.chunk}}},
          {"settings", settings},
          {"grids", c.grids},
          {"generation",
           {{"policy", c.generation.per_bin ? "per_bin" : "fixed"},
            {"per_bin", c.generation.per_bin_points},
            {"set_size", c.generation.set_size},
            {"max_set_size", c.generation.max_set_size}}},
          {"closure", {{"truth_draws", c.closure_truth_draws}}},
          {"amplification", {{"fit_window", c.fit_window}}},
          {"workers", c.workers}};
}

inline std::string config_hash(const ExperimentConfig& c) {
  return io::hex64(fnv1a(config_json(c).dump()));
}

// -- seeds and paths ------------------------------------------------------------

struct RunSeeds {
  std::uint64_t data, init, cfm;
};

inline RunSeeds run_seeds(const ExperimentConfig& c, std::size_t run) {
  return {derive_seed(c.seed, "training-data", run), derive_seed(c.seed, "init", run),
          derive_seed(c.seed, "cfm", run)};
}

inline std::uint64_t setting_seed(const ExperimentConfig& c, const std::string& component,
                                  const std::string& setting, std::size_t run) {
  return derive_seed(c.seed, component + "/" + setting, run);
}

struct Layout {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path summary() const { return root / "summary.json"; }
  std::filesystem::path grid(std::size_t n) const {
    return root / "grids" / ("grid_n" + std::to_string(n) + ".json");
  }
  std::filesystem::path run(std::size_t r) const { return root / "runs" / std::to_string(r); }
  std::filesystem::path setting(std::size_t r, const std::string& s) const { return run(r) / s; }
  std::filesystem::path bin_stats(std::size_t r, const std::string& s, std::size_t n) const {
    return setting(r, s) / ("binstats_n" + std::to_string(n) + ".csv");
  }
  std::filesystem::path report(const std::string& s) const { return root / "reports" / s; }
  std::filesystem::path coverage(const std::string& s, std::size_t n) const {
    return report(s) / ("coverage_n" + std::to_string(n) + ".csv");
  }
  std::filesystem::path amplification(const std::string& s, std::size_t r) const {
    return report(s) / ("amplification_run" + std::to_string(r) + ".csv");
  }
  std::filesystem::path closure(const std::string& s, std::size_t r) const {
    return report(s) / ("closure_run" + std::to_string(r) + ".csv");
  }
};

// -- stages ---------------------------------------------------------------------

inline std::vector<QuantileGrid> build_grids(const ExperimentConfig& c) {
  std::vector<QuantileGrid> out;
  if (c.grids.empty()) return out;
  const auto reference = sample_ring(c.ring, c.reference_size, derive_seed(c.seed, "grid-reference"));
  for (std::size_t n : c.grids) out.push_back(build_grid(reference, n));
  return out;
}

struct PosteriorOutcome {
  PosteriorEnsemble ensemble;
  std::optional<VibResult> vib;
  std::optional<ChainResult> chain;
};

/// VIB trains from `init`; AdamMCMC starts its chain at `pretrained`.
inline PosteriorOutcome run_posterior(const ExperimentConfig& c, const PosteriorSetting& s,
                                      const VectorField& field, const SampleSet& data,
                                      const ParamVector& init, const ParamVector& pretrained,
                                      std::size_t run) {
  PosteriorOutcome out;
  if (s.method == Method::vib) {
    VibConfig vc = s.vib;
    vc.seed = setting_seed(c, "vib", s.name, run);
    out.vib = train_vib(field, data, vc, VarPosterior::around(init));
    out.ensemble = draw_ensemble(out.vib->q, s.n_draws, setting_seed(c, "vib-draws", s.name, run));
  } else {
    McmcConfig mc = s.mcmc;
    mc.seed = setting_seed(c, "mcmc", s.name, run);
    CnfNllTarget target(field, data.points, c.likelihood_solver(), mc.batch_size);
    out.chain = run_chain(target, pretrained, mc);
    out.ensemble = out.chain->ensemble;
  }
  return out;
}

// -- manifest -------------------------------------------------------------------

struct PipelineOptions {
  bool force = false;
  std::ostream* log = nullptr;
};

class Manifest {
 public:
  Manifest(const ExperimentConfig& c, Layout layout, bool force)
      : layout_(std::move(layout)), hash_(config_hash(c)) {
    namespace fs = std::filesystem;
    doc_ = {{"version", kVersion},
            {"config_hash", hash_},
            {"architecture_hash", io::architecture_hash(c.net)},
            {"param_count", param_count(c.net)},
            {"status", "running"},
            {"completed", io::json::array()},
            {"config", config_json(c)}};
    if (fs::exists(layout_.manifest()) && !force) {
      const auto old = io::read_json(layout_.manifest());
      const std::string old_hash = old.value("config_hash", "");
      require(old_hash == hash_, "'" + layout_.root.string() +
                                     "' holds a run with a different config (hash " + old_hash +
                                     "); use --force to overwrite");
      require(old.value("status", "") != "complete",
              "'" + layout_.root.string() +
                  "' already holds a complete run of this config; use --force to overwrite");
      for (const auto& s : old.at("completed")) done_.insert(s.get<std::string>());
      doc_["completed"] = old.at("completed");
    }
    write();
  }

  bool done(const std::string& stage) const { return done_.count(stage) > 0; }

  void complete(const std::string& stage) {
    if (done_.insert(stage).second) doc_["completed"].push_back(stage);
    write();
  }

  void finish() {
    doc_["status"] = "complete";
    doc_.erase("error");
    write();
  }

  void fail(const std::string& what) {
    doc_["status"] = "failed";
    doc_["error"] = what;
    write();
  }

  const std::string& hash() const { return hash_; }

 private:
  void write() const { io::write_json(layout_.manifest(), doc_); }

  Layout layout_;
  std::string hash_;
  io::json doc_;
  std::set<std::string> done_;
};

// -- reports --------------------------------------------------------------------

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x / static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

}  // namespace detail

/// Recomputes every report from the bin statistics on disk and writes the
/// report CSVs plus summary.json. Returns the written files.
inline std::vector<std::filesystem::path> emit_reports(const ExperimentConfig& c,
                                                       const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  const Layout L{out_dir};
  std::vector<fs::path> files;
  io::json summary{{"version", kVersion},
                   {"config_hash", config_hash(c)},
                   {"n_train", c.n_train},
                   {"runs", c.runs},
                   {"grids", c.grids},
                   {"settings", io::json::array()}};
  io::json gaps = io::json::array();
  std::vector<QuantileGrid> grids;
  for (std::size_t n : c.grids) {
    if (fs::exists(L.grid(n))) grids.push_back(io::grid_from_json(io::read_json(L.grid(n))));
    else gaps.push_back("grid n_per_dim=" + std::to_string(n) + ": missing " + L.grid(n).string());
  }
  const bool grids_complete = grids.size() == c.grids.size();

  for (const auto& s : c.settings) {
    io::json entry{{"name", s.name}, {"method", s.method == Method::vib ? "vib" : "adammcmc"}};
    if (c.grids.empty()) {
      summary["settings"].push_back(entry);
      continue;
    }
    // stats[r][g], empty when missing.
    std::vector<std::vector<std::optional<BinEnsembleStats>>> stats(c.runs);
    for (std::size_t r = 0; r < c.runs; ++r)
      for (std::size_t n : c.grids) {
        const auto p = L.bin_stats(r, s.name, n);
        if (fs::exists(p)) {
          stats[r].push_back(io::read_bin_stats(p));
        } else {
          stats[r].emplace_back();
          gaps.push_back(s.name + " run " + std::to_string(r) + " n_per_dim=" + std::to_string(n) +
                         ": missing bin statistics");
        }
      }

    io::json calibration = io::json::array();
    for (std::size_t g = 0; g < c.grids.size(); ++g) {
      std::vector<BinEnsembleStats> runs;
      for (std::size_t r = 0; r < c.runs; ++r)
        if (stats[r][g]) runs.push_back(*stats[r][g]);
      if (runs.size() < 2 || runs.size() != c.runs) continue;
      const auto curve = coverage(runs, nominal_grid());
      io::write_coverage(L.coverage(s.name, c.grids[g]), curve);
      files.push_back(L.coverage(s.name, c.grids[g]));
      const auto d = deviation(curve);
      calibration.push_back({{"n_per_dim", c.grids[g]},
                             {"n_q", c.grids[g] * c.grids[g]},
                             {"md", d.md},
                             {"mad", d.mad},
                             {"mad_r", d.mad_r},
                             {"mad_phi", d.mad_phi}});
    }
    entry["calibration"] = calibration;

    std::vector<double> fit_a, fit_b;
    std::vector<std::vector<double>> amp(c.grids.size()), js_pred(c.grids.size()),
        js_eq(c.grids.size());
    for (std::size_t r = 0; r < c.runs; ++r) {
      bool complete = grids_complete;
      for (const auto& st : stats[r]) complete = complete && st.has_value();
      if (!complete) continue;
      std::vector<BinEnsembleStats> per_grid;
      for (const auto& st : stats[r]) per_grid.push_back(*st);
      const auto curve = amplification_curve(per_grid, static_cast<double>(c.n_train));
      io::write_amplification(L.amplification(s.name, r), curve);
      files.push_back(L.amplification(s.name, r));
      std::vector<io::ClosureRow> closure_rows;
      for (std::size_t g = 0; g < curve.size(); ++g) {
        amp[g].push_back(curve[g].amplification);
        if (curve[g].n_hat < 1.0) {
          gaps.push_back(s.name + " run " + std::to_string(r) + " n_per_dim=" +
                         std::to_string(c.grids[g]) + ": n_hat < 1, closure skipped");
          continue;
        }
        const auto cl = closure_check(per_grid[g], curve[g].n_hat, grids[g], c.ring,
                                      derive_seed(setting_seed(c, "closure", s.name, r), "grid", g),
                                      c.closure_truth_draws);
        closure_rows.push_back({curve[g].n_q, cl});
        js_pred[g].push_back(cl.js_mean_pred);
        js_eq[g].push_back(cl.js_equivalent);
      }
      io::write_closure(L.closure(s.name, r), closure_rows);
      files.push_back(L.closure(s.name, r));
      bool positive = curve.size() >= 2;
      for (const auto& rep : curve) positive = positive && rep.amplification > 0.0;
      if (positive) {
        const auto fit = fit_amplification(curve, c.fit_window);
        fit_a.push_back(fit.a_prime);
        fit_b.push_back(fit.b);
      }
    }
    io::json amp_rows = io::json::array();
    io::json closure_rows = io::json::array();
    for (std::size_t g = 0; g < c.grids.size(); ++g) {
      const auto [am, as] = detail::mean_std(amp[g]);
      amp_rows.push_back({{"n_q", c.grids[g] * c.grids[g]},
                          {"amplification_mean", am},
                          {"amplification_std", as},
                          {"runs", amp[g].size()}});
      const auto [pm, ps] = detail::mean_std(js_pred[g]);
      const auto [em, es] = detail::mean_std(js_eq[g]);
      closure_rows.push_back({{"n_q", c.grids[g] * c.grids[g]},
                              {"js_mean_pred_mean", pm},
                              {"js_mean_pred_std", ps},
                              {"js_equivalent_mean", em},
                              {"js_equivalent_std", es},
                              {"runs", js_pred[g].size()}});
    }
    io::json fit = nullptr;
    if (!fit_b.empty()) {
      const auto [am, as] = detail::mean_std(fit_a);
      const auto [bm, bs] = detail::mean_std(fit_b);
      fit = {{"a_prime", am}, {"a_prime_std", as}, {"b", bm}, {"b_std", bs},
             {"window", c.fit_window}, {"runs", fit_b.size()}};
    } else {
      gaps.push_back(s.name + ": power-law fit needs >= 2 grids with positive amplification");
    }
    entry["amplification"] = {{"per_grid", amp_rows}, {"fit", fit}};
    entry["closure"] = closure_rows;
    summary["settings"].push_back(entry);
  }
  summary["gaps"] = gaps;
  io::write_json(L.summary(), summary);
  files.push_back(L.summary());
  return files;
}

// -- pipeline ---------------------------------------------------------------------

struct RunArtifacts {
  std::filesystem::path out_dir;
  std::string config_hash;
  std::vector<std::filesystem::path> files;
};

inline RunArtifacts run_pipeline(const ExperimentConfig& c, const std::filesystem::path& out_dir,
                                 const PipelineOptions& opt = {}) {
  namespace fs = std::filesystem;
  c.validate();
  const Layout L{out_dir};
  fs::create_directories(out_dir);
  Manifest manifest(c, L, opt.force);
  auto log = [&](const std::string& msg) {
    if (opt.log) *opt.log << "[" << msg << "]" << std::endl;
  };
  const VectorField field(c.net);
  try {
    std::vector<QuantileGrid> grids;
    if (manifest.done("grids")) {
      for (std::size_t n : c.grids) grids.push_back(io::grid_from_json(io::read_json(L.grid(n))));
    } else {
      log("grids");
      grids = build_grids(c);
      for (const auto& g : grids) io::write_json(L.grid(g.n_per_dim), io::grid_json(g));
      manifest.complete("grids");
    }
    std::vector<std::size_t> set_sizes;
    for (const auto& g : grids) set_sizes.push_back(c.generation.size_for(g.n_bins()));

    for (std::size_t r = 0; r < c.runs; ++r) {
      const auto seeds = run_seeds(c, r);
      const std::string run_tag = "run" + std::to_string(r);
      const fs::path train_csv = L.run(r) / "train.csv";
      SampleSet data;
      if (manifest.done(run_tag + "/data")) {
        data = io::read_samples(train_csv);
      } else {
        log(run_tag + "/data");
        data = sample_ring(c.ring, c.n_train, seeds.data);
        io::write_samples(train_csv, data.points);
        manifest.complete(run_tag + "/data");
      }
      const ParamVector init = init_params(c.net, seeds.init);
      ParamVector pretrained;
      const bool needs_cfm = std::any_of(c.settings.begin(), c.settings.end(), [](const auto& s) {
        return s.method == Method::adammcmc;
      });
      if (needs_cfm) {
        if (manifest.done(run_tag + "/cfm")) {
          pretrained = io::load_params(L.run(r) / "cfm", &c.net);
        } else {
          log(run_tag + "/cfm");
          CfmConfig cc = c.cfm;
          cc.seed = seeds.cfm;
          auto res = train_cfm(field, data, cc, init);
          io::write_loss_history(L.run(r) / "cfm_loss.csv", res.history);
          io::save_params(L.run(r) / "cfm", c.net, res.theta,
                          {{"stage", "cfm"}, {"run", r}, {"config_hash", manifest.hash()}});
          pretrained = std::move(res.theta);
          manifest.complete(run_tag + "/cfm");
        }
      }
      for (const auto& s : c.settings) {
        const std::string tag = run_tag + "/" + s.name;
        const fs::path dir = L.setting(r, s.name);
        PosteriorEnsemble ensemble;
        if (manifest.done(tag + "/posterior")) {
          ensemble = io::load_ensemble(dir / "ensemble", &c.net);
        } else {
          log(tag + "/posterior");
          auto post = run_posterior(c, s, field, data, init, pretrained, r);
          io::json side{{"setting", s.name}, {"run", r}, {"config_hash", manifest.hash()}};
          if (post.vib) {
            io::write_vib_history(dir / "vib_loss.csv", post.vib->history);
            io::save_posterior(dir / "posterior", c.net, post.vib->q,
                               {{"vib", detail::vib_json(s.vib)},
                                {"stopped_at", post.vib->stopped_at ? io::json(*post.vib->stopped_at)
                                                                    : io::json(nullptr)}});
            side["vib"] = detail::vib_json(s.vib);
          }
          if (post.chain) {
            io::CsvTable t{{"epoch", "acceptance"}, {}};
            for (std::size_t e = 0; e < post.chain->acceptance_history.size(); ++e)
              t.rows.push_back({static_cast<double>(e + 1), post.chain->acceptance_history[e]});
            io::write_csv(dir / "acceptance.csv", t);
            side["adammcmc"] = detail::mcmc_json(s.mcmc);
            side["acceptance_history"] = post.chain->acceptance_history;
            side["nonfinite_proposals"] = post.chain->final_state.nonfinite_count;
          }
          io::save_ensemble(dir / "ensemble", c.net, post.ensemble, side);
          ensemble = std::move(post.ensemble);
          manifest.complete(tag + "/posterior");
        }
        if (!grids.empty() && !manifest.done(tag + "/stats")) {
          log(tag + "/stats");
          const auto stats = ensemble_stats(field, grids, ensemble, set_sizes,
                                            setting_seed(c, "generate", s.name, r),
                                            c.generation_solver(), false, c.workers);
          for (std::size_t g = 0; g < grids.size(); ++g)
            io::write_bin_stats(L.bin_stats(r, s.name, grids[g].n_per_dim), stats[g]);
          manifest.complete(tag + "/stats");
        }
      }
    }
    log("reports");
    RunArtifacts art{out_dir, manifest.hash(), emit_reports(c, out_dir)};
    manifest.finish();
    return art;
  } catch (const std::exception& e) {
    manifest.fail(e.what());
    throw;
  }
}

}  // namespace bcnf
