#pragma once

// Mean-field Gaussian weight posterior trained on
//   E_q[L_cfm] + k * kl_scale * KL(q || N(0, prior_std^2 I)),
// with std = softplus(rho) and single-sample reparameterized gradients.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bcnf/adam.hpp"
#include "bcnf/cfm.hpp"
#include "bcnf/ensemble.hpp"
#include "bcnf/error.hpp"
#include "bcnf/net.hpp"
#include "bcnf/rng.hpp"

namespace bcnf {

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double softplus_inverse(double y) { return y + std::log(-std::expm1(-y)); }
inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

struct VarPosterior {
  ParamVector mean;
  ParamVector rho;

  std::size_t size() const { return mean.size(); }

  double stddev(std::size_t i) const { return softplus(rho[i]); }

  void validate() const {
    require(mean.size() == rho.size(), "vib: mean/rho length mismatch");
    for (std::size_t i = 0; i < rho.size(); ++i)
      require(std::isfinite(mean[i]) && softplus(rho[i]) > 0.0,
              "vib: invalid variational parameter " + std::to_string(i));
  }

  /// Mean from `theta`, every std equal to `init_std`.
  static VarPosterior around(ParamVector theta, double init_std = 1e-3) {
    VarPosterior q;
    q.rho.assign(theta.size(), softplus_inverse(init_std));
    q.mean = std::move(theta);
    return q;
  }
};

struct VibConfig {
  double k = 10.0;
  double prior_std = 1.0;
  double learning_rate = 1e-3;
  std::size_t epochs = 20000;
  std::size_t batches_per_epoch = 10;
  std::size_t batch_size = 1000;
  double sigma_min = 1e-4;
  // Multiplies the KL term in addition to k; 0 selects 1 / (training set size).
  double kl_scale = 0.0;
  bool freeze_rho = false;
  // Early stop once the KL term changes by less than stop_tolerance
  // (relative) over stop_window steps. stop_window = 0 disables it.
  std::size_t stop_window = 1000;
  double stop_tolerance = 1e-3;
  std::uint64_t seed = 0;

  void validate() const {
    require(k > 0.0, "vib: k must be > 0");
    require(prior_std > 0.0, "vib: prior_std must be > 0");
    require(learning_rate > 0.0, "vib: learning_rate must be > 0");
    require(kl_scale >= 0.0, "vib: kl_scale must be >= 0");
    require(batch_size >= 1 && batches_per_epoch >= 1, "vib: empty batches");
    require(sigma_min >= 0.0 && sigma_min < 1.0, "vib: sigma_min must be in [0, 1)");
  }
};

/// mean + softplus(rho) * eps, eps ~ N(0, I) from `seed`.
inline ParamVector draw_params(const VarPosterior& q, std::uint64_t seed) {
  CounterRng rng(seed);
  ParamVector theta(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) theta[i] = q.mean[i] + q.stddev(i) * rng.normal();
  return theta;
}

/// Closed-form KL(q || N(0, prior_std^2 I)), summed over parameters.
inline double kl_to_prior(const VarPosterior& q, double prior_std) {
  const double prior_var = prior_std * prior_std;
  double kl = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double s = q.stddev(i);
    kl += std::log(prior_std / s) + (s * s + q.mean[i] * q.mean[i]) / (2.0 * prior_var) - 0.5;
  }
  return kl;
}

struct VibGradient {
  double cfm_loss = 0.0;
  double kl = 0.0;
  double objective = 0.0;
  ParamVector grad_mean;
  ParamVector grad_rho;
};

/// Objective and gradient for fixed noise `eps` and a fixed CFM batch.
inline VibGradient vib_objective(const VectorField& field, const VarPosterior& q,
                                 std::span<const double> eps, const CfmBatch& batch,
                                 double sigma_min, double kl_weight, double prior_std,
                                 std::size_t step = 0) {
  const std::size_t n = q.size();
  ParamVector theta(n);
  for (std::size_t i = 0; i < n; ++i) theta[i] = q.mean[i] + q.stddev(i) * eps[i];
  auto lg = cfm_loss_and_grad(field, theta, batch, sigma_min, step);
  VibGradient out;
  out.cfm_loss = lg.loss;
  out.kl = kl_to_prior(q, prior_std);
  out.objective = lg.loss + kl_weight * out.kl;
  out.grad_mean.resize(n);
  out.grad_rho.resize(n);
  const double prior_var = prior_std * prior_std;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = q.stddev(i);
    const double ds = sigmoid(q.rho[i]);
    out.grad_mean[i] = lg.grad[i] + kl_weight * q.mean[i] / prior_var;
    out.grad_rho[i] = lg.grad[i] * eps[i] * ds + kl_weight * (-1.0 / s + s / prior_var) * ds;
  }
  return out;
}

struct VibRecord {
  std::size_t step = 0;
  double cfm_loss = 0.0;
  double kl = 0.0;
};

struct VibResult {
  VarPosterior q;
  std::vector<VibRecord> history;
  std::optional<std::size_t> stopped_at;  // step at which the KL plateau was detected
};

inline VibResult train_vib(const VectorField& field, const SampleSet& data, const VibConfig& cfg,
                           VarPosterior init) {
  cfg.validate();
  init.validate();
  field.check_size(init.mean);
  require(data.size() >= cfg.batch_size, "vib: training set smaller than batch_size");
  const double kl_weight =
      cfg.k * (cfg.kl_scale > 0.0 ? cfg.kl_scale : 1.0 / static_cast<double>(data.size()));
  const std::size_t n = init.size();
  VibResult result;
  result.q = std::move(init);
  AdamState adam_mean(n);
  AdamState adam_rho(n);
  CounterRng rng(cfg.seed);
  CounterRng noise(derive_seed(cfg.seed, "vib-weight-noise"));
  ParamVector eps(n);
  const std::size_t steps = cfg.epochs * cfg.batches_per_epoch;
  result.history.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    for (auto& e : eps) e = noise.normal();
    const CfmBatch batch = sample_cfm_batch(data.points, cfg.batch_size, rng);
    VibGradient g;
    try {
      g = vib_objective(field, result.q, eps, batch, cfg.sigma_min, kl_weight, cfg.prior_std, step);
    } catch (const NumericalFault&) {
      throw NumericalFault("vib: training diverged", step);
    }
    adam_step(adam_mean, result.q.mean, g.grad_mean, cfg.learning_rate);
    if (!cfg.freeze_rho) adam_step(adam_rho, result.q.rho, g.grad_rho, cfg.learning_rate);
    result.history.push_back({step, g.cfm_loss, g.kl});
    const std::size_t w = cfg.stop_window;
    if (w > 0 && step >= w) {
      const double before = result.history[step - w].kl;
      if (std::abs(g.kl - before) <= cfg.stop_tolerance * std::abs(before)) {
        result.stopped_at = step;
        break;
      }
    }
  }
  return result;
}

inline PosteriorEnsemble draw_ensemble(const VarPosterior& q, std::size_t n_draws,
                                       std::uint64_t seed) {
  require(n_draws >= 1, "vib: n_draws must be >= 1");
  PosteriorEnsemble ens;
  ens.provenance = Provenance::vib;
  for (std::size_t i = 0; i < n_draws; ++i)
    ens.members.push_back(draw_params(q, derive_seed(seed, "vib-draw", i)));
  return ens;
}

}  // namespace bcnf
