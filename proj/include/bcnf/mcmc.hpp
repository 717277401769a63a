#pragma once

// AdamMCMC: Metropolis-Hastings over network weights with proposals
//   theta~ = Adam(theta, grad NLL(theta)),
//   tau ~ N(theta~, sigma^2 I + sigma_delta * delta delta^T),  delta = theta~ - theta,
// accepted with probability
//   min(1, exp(-lambda NLL(tau)) q(theta | tau) / (exp(-lambda NLL(theta)) q(tau | theta))).
//
// The reverse density q(theta | tau) is centred on an Adam step taken from
// tau with a copy of the optimizer moments held before the current step.
// The moments always advance with the gradient at the current state, also
// when the proposal is rejected.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <tuple>
#include <vector>

#include "bcnf/adam.hpp"
#include "bcnf/ensemble.hpp"
#include "bcnf/error.hpp"
#include "bcnf/flow.hpp"
#include "bcnf/net.hpp"
#include "bcnf/rng.hpp"

namespace bcnf {

struct McmcConfig {
  double sigma = 0.1;
  double sigma_delta = 50.0;
  double lambda = 1.0;
  double learning_rate = 1e-3;
  std::size_t thin_gap = 100;  // epochs between saved samples
  std::size_t n_samples = 10;
  std::size_t burn_in = 0;     // epochs
  std::size_t batch_size = 0;  // NLL batch; 0 = full training set
  std::uint64_t seed = 0;

  void validate() const {
    require(sigma > 0.0, "mcmc: sigma must be > 0");
    require(sigma_delta >= 0.0, "mcmc: sigma_delta must be >= 0");
    require(lambda > 0.0, "mcmc: lambda must be > 0");
    require(learning_rate > 0.0, "mcmc: learning_rate must be > 0");
    require(thin_gap >= 1, "mcmc: thin_gap must be >= 1");
  }
};

struct NllEvaluation {
  double nll = 0.0;
  ParamVector grad;
};

/// Negative log-likelihood surface sampled by the chain.
class NllTarget {
 public:
  virtual ~NllTarget() = default;
  virtual NllEvaluation evaluate(std::span<const double> theta) = 0;
  /// MH steps per epoch.
  virtual std::size_t steps_per_epoch() const { return 1; }
  /// Selects the batch for the next step. Returns true if the NLL surface
  /// changed (cached values at the current state become stale).
  virtual bool next_batch(CounterRng&) { return false; }
};

/// CNF likelihood of a training set, optionally mini-batched with the sum
/// rescaled to the full set size.
class CnfNllTarget : public NllTarget {
 public:
  CnfNllTarget(const VectorField& field, Matrix data, SolverConfig solver,
               std::size_t batch_size = 0)
      : field_(field), data_(std::move(data)), solver_(solver), batch_size_(batch_size) {
    if (batch_size_ >= static_cast<std::size_t>(data_.cols())) batch_size_ = 0;
    batch_ = batch_size_ == 0 ? data_ : Matrix(data_.rows(), static_cast<Eigen::Index>(batch_size_));
  }

  NllEvaluation evaluate(std::span<const double> theta) override {
    auto r = nll_and_grad(field_, theta, batch_, solver_);
    const double scale = static_cast<double>(data_.cols()) / static_cast<double>(batch_.cols());
    if (scale != 1.0) {
      r.nll *= scale;
      for (auto& g : r.grad) g *= scale;
    }
    return {r.nll, std::move(r.grad)};
  }

  std::size_t steps_per_epoch() const override {
    if (batch_size_ == 0) return 1;
    return (static_cast<std::size_t>(data_.cols()) + batch_size_ - 1) / batch_size_;
  }

  bool next_batch(CounterRng& rng) override {
    if (batch_size_ == 0) return false;
    for (Eigen::Index i = 0; i < batch_.cols(); ++i)
      batch_.col(i) = data_.col(static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(data_.cols()))));
    return true;
  }

 private:
  const VectorField& field_;
  Matrix data_;
  SolverConfig solver_;
  std::size_t batch_size_;
  Matrix batch_;
};

struct ChainState {
  ParamVector theta;
  AdamState adam;
  double nll = 0.0;
  ParamVector grad;
  std::size_t accepted_count = 0;
  std::size_t step_count = 0;
  std::size_t nonfinite_count = 0;
};

struct Proposal {
  ParamVector tau;
  ParamVector theta_tilde;
  ParamVector delta;
  AdamState adam;  // moments after the forward Adam step
};

/// Adam step from theta with a copy of `adam`; returns the step target.
inline std::pair<ParamVector, AdamState> adam_target(std::span<const double> theta,
                                                     std::span<const double> grad,
                                                     AdamState adam, double learning_rate) {
  ParamVector out(theta.begin(), theta.end());
  adam_step(adam, out, grad, learning_rate);
  return {std::move(out), std::move(adam)};
}

/// Draws tau = theta~ + sigma eps + sqrt(sigma_delta) eta delta.
inline Proposal propose(std::span<const double> theta, std::span<const double> grad,
                        const AdamState& adam, const McmcConfig& cfg, CounterRng& rng) {
  Proposal p;
  std::tie(p.theta_tilde, p.adam) = adam_target(theta, grad, adam, cfg.learning_rate);
  const std::size_t n = theta.size();
  p.delta.resize(n);
  for (std::size_t i = 0; i < n; ++i) p.delta[i] = p.theta_tilde[i] - theta[i];
  p.tau.resize(n);
  const double eta = std::sqrt(cfg.sigma_delta) * rng.normal();
  for (std::size_t i = 0; i < n; ++i)
    p.tau[i] = p.theta_tilde[i] + cfg.sigma * rng.normal() + eta * p.delta[i];
  return p;
}

/// log N(x; mean, sigma^2 I + sigma_delta delta delta^T) via Sherman-Morrison
/// and the matrix determinant lemma.
inline double log_q(std::span<const double> x, std::span<const double> mean,
                    std::span<const double> delta, double sigma, double sigma_delta) {
  if (!(sigma > 0.0)) throw NumericalFault("log_q: degenerate proposal density (sigma = 0)", 0);
  const std::size_t n = x.size();
  const double var = sigma * sigma;
  const double c = sigma_delta / var;
  double rr = 0.0, dr = 0.0, dd = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = x[i] - mean[i];
    rr += r * r;
    dr += delta[i] * r;
    dd += delta[i] * delta[i];
  }
  const double denom = 1.0 + c * dd;
  const double quad = (rr - c * dr * dr / denom) / var;
  const double logdet = static_cast<double>(n) * std::log(var) + std::log1p(c * dd);
  return -0.5 * (quad + logdet + static_cast<double>(n) * std::log(2.0 * std::numbers::pi));
}

inline double log_q(std::span<const double> x, std::span<const double> mean,
                    std::span<const double> delta, const McmcConfig& cfg) {
  return log_q(x, mean, delta, cfg.sigma, cfg.sigma_delta);
}

inline ChainState init_chain(NllTarget& target, ParamVector theta0) {
  ChainState s;
  auto e = target.evaluate(theta0);
  if (!std::isfinite(e.nll)) throw NumericalFault("mcmc: non-finite NLL at the initial state", 0);
  s.theta = std::move(theta0);
  s.adam = AdamState(s.theta.size());
  s.nll = e.nll;
  s.grad = std::move(e.grad);
  return s;
}

struct StepOutcome {
  bool accepted = false;
  double log_alpha = 0.0;
};

inline StepOutcome mh_step(ChainState& state, NllTarget& target, const McmcConfig& cfg,
                           CounterRng& rng) {
  if (target.next_batch(rng)) {
    auto e = target.evaluate(state.theta);
    state.nll = e.nll;
    state.grad = std::move(e.grad);
  }
  Proposal p = propose(state.theta, state.grad, state.adam, cfg, rng);
  StepOutcome out;
  ++state.step_count;
  NllEvaluation at_tau;
  bool finite = true;
  try {
    at_tau = target.evaluate(p.tau);
  } catch (const NumericalFault&) {
    finite = false;
  }
  if (finite) {
    const auto [reverse_mean, unused] =
        adam_target(p.tau, at_tau.grad, state.adam, cfg.learning_rate);
    ParamVector reverse_delta(p.tau.size());
    for (std::size_t i = 0; i < p.tau.size(); ++i) reverse_delta[i] = reverse_mean[i] - p.tau[i];
    out.log_alpha = -cfg.lambda * at_tau.nll + cfg.lambda * state.nll +
                    log_q(state.theta, reverse_mean, reverse_delta, cfg) -
                    log_q(p.tau, p.theta_tilde, p.delta, cfg);
    finite = std::isfinite(out.log_alpha);
  }
  state.adam = std::move(p.adam);
  if (!finite) {
    ++state.nonfinite_count;
    out.log_alpha = -std::numeric_limits<double>::infinity();
    return out;
  }
  if (std::log(rng.uniform_open0()) < out.log_alpha) {
    out.accepted = true;
    ++state.accepted_count;
    state.theta = std::move(p.tau);
    state.nll = at_tau.nll;
    state.grad = std::move(at_tau.grad);
  }
  return out;
}

struct ChainResult {
  PosteriorEnsemble ensemble;
  std::vector<double> acceptance_history;  // running acceptance rate per epoch
  ChainState final_state;
};

/// burn_in + n_samples * thin_gap epochs; keeps the state after every
/// thin_gap-th epoch past burn-in.
inline ChainResult run_chain(NllTarget& target, ParamVector theta0, const McmcConfig& cfg) {
  cfg.validate();
  ChainResult result;
  result.ensemble.provenance = Provenance::mcmc;
  ChainState state = init_chain(target, std::move(theta0));
  CounterRng rng(cfg.seed);
  const std::size_t per_epoch = target.steps_per_epoch();
  const std::size_t epochs = cfg.burn_in + cfg.n_samples * cfg.thin_gap;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    for (std::size_t k = 0; k < per_epoch; ++k) mh_step(state, target, cfg, rng);
    result.acceptance_history.push_back(static_cast<double>(state.accepted_count) /
                                        static_cast<double>(state.step_count));
    if (epoch > cfg.burn_in && (epoch - cfg.burn_in) % cfg.thin_gap == 0)
      result.ensemble.members.push_back(state.theta);
  }
  result.final_state = std::move(state);
  return result;
}

}  // namespace bcnf
