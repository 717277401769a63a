#pragma once

// Conditional flow matching on the optimal-transport path:
//   x_t = (1 - (1 - sigma_min) t) x0 + t x1,   u = x1 - (1 - sigma_min) x0,
//   loss = mean || u - v_t(x_t) ||^2.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bcnf/adam.hpp"
#include "bcnf/error.hpp"
#include "bcnf/net.hpp"
#include "bcnf/ring.hpp"
#include "bcnf/rng.hpp"

namespace bcnf {

struct CfmConfig {
  double sigma_min = 1e-4;
  double learning_rate = 1e-3;
  std::size_t epochs = 2500;
  std::size_t batches_per_epoch = 10;
  std::size_t batch_size = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    require(sigma_min >= 0.0 && sigma_min < 1.0, "cfm: sigma_min must be in [0, 1)");
    require(learning_rate > 0.0, "cfm: learning_rate must be > 0");
    require(batch_size >= 1, "cfm: batch_size must be >= 1");
    require(batches_per_epoch >= 1, "cfm: batches_per_epoch must be >= 1");
  }
};

/// One draw of the CFM expectation: data points x1, latent x0 and times t.
struct CfmBatch {
  Matrix x1;
  Matrix x0;
  RowVector t;
};

/// Draws t ~ U(0,1) and x0 ~ N(0, I) for the given data points.
inline CfmBatch make_cfm_batch(Matrix x1, CounterRng& rng) {
  CfmBatch batch;
  const Eigen::Index n = x1.cols();
  batch.t.resize(n);
  batch.x0.resize(x1.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    batch.t(i) = rng.uniform();
    for (Eigen::Index k = 0; k < x1.rows(); ++k) batch.x0(k, i) = rng.normal();
  }
  batch.x1 = std::move(x1);
  return batch;
}

/// Batch sampled uniformly with replacement from `data`.
inline CfmBatch sample_cfm_batch(const Matrix& data, std::size_t batch_size, CounterRng& rng) {
  Matrix x1(data.rows(), static_cast<Eigen::Index>(batch_size));
  for (Eigen::Index i = 0; i < x1.cols(); ++i)
    x1.col(i) = data.col(static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(data.cols()))));
  return make_cfm_batch(std::move(x1), rng);
}

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

inline LossAndGrad cfm_loss_and_grad(const VectorField& field, std::span<const double> theta,
                                     const CfmBatch& batch, double sigma_min,
                                     std::size_t batch_index = 0) {
  require(batch.x1.cols() > 0, "cfm: empty batch");
  const double n = static_cast<double>(batch.x1.cols());
  const RowVector sigma_t = (1.0 - (1.0 - sigma_min) * batch.t.array()).matrix();
  const Matrix xt = batch.x0.array().rowwise() * sigma_t.array() +
                    batch.x1.array().rowwise() * batch.t.array();
  const Matrix target = batch.x1 - (1.0 - sigma_min) * batch.x0;
  const auto tape = field.record(theta, xt, batch.t, false);
  const Matrix residual = tape.output() - target;
  LossAndGrad out;
  out.loss = residual.squaredNorm() / n;
  if (!std::isfinite(out.loss)) throw NumericalFault("cfm: non-finite loss", batch_index);
  Pullback pb;
  field.pullback(theta, tape, (2.0 / n) * residual, RowVector(), pb);
  out.grad = std::move(pb.params);
  return out;
}

/// Draws (t, x0) from `seed` for the given x1 points.
inline LossAndGrad cfm_loss_and_grad(const VectorField& field, std::span<const double> theta,
                                     const Matrix& x1, std::uint64_t seed, double sigma_min) {
  CounterRng rng(seed);
  return cfm_loss_and_grad(field, theta, make_cfm_batch(x1, rng), sigma_min);
}

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
};

struct CfmResult {
  ParamVector theta;
  std::vector<LossRecord> history;
};

/// epochs * batches_per_epoch Adam steps; each step draws a fresh batch.
inline CfmResult train_cfm(const VectorField& field, const SampleSet& data, const CfmConfig& cfg,
                           ParamVector init) {
  cfg.validate();
  field.check_size(init);
  require(data.size() >= cfg.batch_size, "cfm: training set smaller than batch_size");
  CfmResult result;
  result.theta = std::move(init);
  AdamState adam(result.theta.size());
  CounterRng rng(cfg.seed);
  const std::size_t steps = cfg.epochs * cfg.batches_per_epoch;
  result.history.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    const CfmBatch batch = sample_cfm_batch(data.points, cfg.batch_size, rng);
    LossAndGrad lg;
    try {
      lg = cfm_loss_and_grad(field, result.theta, batch, cfg.sigma_min, step);
    } catch (const NumericalFault&) {
      throw NumericalFault("cfm: training diverged", step);
    }
    adam_step(adam, result.theta, lg.grad, cfg.learning_rate);
    result.history.push_back({step, lg.loss});
  }
  return result;
}

}  // namespace bcnf
