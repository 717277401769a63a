#pragma once

// Equivalent uncorrelated statistics from the ensemble coefficient of
// variation, t_j = mean_j^2 / std_j^2, and the derived amplification
// sum_j t_j / N_train.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "bcnf/binning.hpp"
#include "bcnf/error.hpp"
#include "bcnf/ring.hpp"

namespace bcnf {

struct EquivalentStats {
  std::vector<double> t_hat;
  std::vector<bool> flagged;  // zero spread or empty bin; excluded from n_hat
  std::size_t n_flagged = 0;
  double n_hat = 0.0;
};

/// The ratio is scale-free, so relative frequencies give the same t_j as
/// absolute counts.
inline EquivalentStats equivalent_stats(const BinEnsembleStats& stats) {
  require(stats.members() >= 2, "equivalent_stats: need at least 2 ensemble members");
  EquivalentStats out;
  out.t_hat.assign(stats.n_bins(), 0.0);
  out.flagged.assign(stats.n_bins(), false);
  for (std::size_t j = 0; j < stats.n_bins(); ++j) {
    const double mu = stats.mean[j];
    const double sd = stats.stddev[j];
    if (mu == 0.0 || sd == 0.0) {
      out.flagged[j] = true;
      ++out.n_flagged;
      continue;
    }
    out.t_hat[j] = (mu * mu) / (sd * sd);
    out.n_hat += out.t_hat[j];
  }
  return out;
}

struct AmplificationReport {
  std::size_t n_q = 0;
  std::vector<double> t_hat;
  double n_hat = 0.0;
  double amplification = 0.0;
  double mean_per_bin = 0.0;
  std::size_t n_flagged = 0;
};

inline AmplificationReport amplification_report(const BinEnsembleStats& stats, double n_train) {
  require(n_train > 0.0, "amplification: training size must be > 0");
  auto eq = equivalent_stats(stats);
  AmplificationReport r;
  r.n_q = stats.n_bins();
  r.n_hat = eq.n_hat;
  r.amplification = eq.n_hat / n_train;
  r.mean_per_bin = eq.n_hat / static_cast<double>(r.n_q);
  r.n_flagged = eq.n_flagged;
  r.t_hat = std::move(eq.t_hat);
  return r;
}

inline std::vector<AmplificationReport> amplification_curve(
    std::span<const BinEnsembleStats> per_grid, double n_train) {
  std::vector<AmplificationReport> out;
  out.reserve(per_grid.size());
  for (const auto& s : per_grid) out.push_back(amplification_report(s, n_train));
  return out;
}

struct PowerLawFit {
  double a_prime = 0.0;
  double b = 0.0;
  double residual = 0.0;  // RMS of log-space residuals
};

/// Least squares of log y on log x; y = a' x^b.
inline PowerLawFit fit_powerlaw(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "fit_powerlaw: size mismatch");
  require(x.size() >= 2, "fit_powerlaw: need at least 2 points");
  const double n = static_cast<double>(x.size());
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(x[i] > 0.0 && y[i] > 0.0, "fit_powerlaw: values must be positive");
    sx += std::log(x[i]);
    sy += std::log(y[i]);
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(y[i]) - my);
  }
  require(sxx > 0.0, "fit_powerlaw: x values must not all be equal");
  PowerLawFit fit;
  fit.b = sxy / sxx;
  const double a = my - fit.b * mx;
  fit.a_prime = std::exp(a);
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = std::log(y[i]) - (a + fit.b * std::log(x[i]));
    ss += r * r;
  }
  fit.residual = std::sqrt(ss / n);
  return fit;
}

/// Fits the last `window` points (all if fewer).
inline PowerLawFit fit_amplification(std::span<const AmplificationReport> curve,
                                     std::size_t window = 8) {
  const std::size_t begin = curve.size() > window ? curve.size() - window : 0;
  std::vector<double> x, y;
  for (std::size_t i = begin; i < curve.size(); ++i) {
    x.push_back(static_cast<double>(curve[i].n_q));
    y.push_back(curve[i].amplification);
  }
  return fit_powerlaw(x, y);
}

/// Jensen-Shannon divergence in nats with 0 log 0 = 0; bounded by log 2.
inline double js_divergence(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), "js_divergence: length mismatch");
  double sp = 0.0, sq = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    require(p[j] >= 0.0 && q[j] >= 0.0, "js_divergence: negative entry");
    sp += p[j];
    sq += q[j];
  }
  require(std::abs(sp - 1.0) <= 1e-9 && std::abs(sq - 1.0) <= 1e-9,
          "js_divergence: inputs must be normalized");
  double d = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double m = 0.5 * (p[j] + q[j]);
    if (p[j] > 0.0) d += p[j] * std::log(p[j] / m);
    if (q[j] > 0.0) d += q[j] * std::log(q[j] / m);
  }
  return std::clamp(0.5 * d, 0.0, std::numbers::ln2);
}

inline std::vector<double> normalized(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  require(s > 0.0, "normalized: zero total");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= s;
  return out;
}

struct ClosureResult {
  double js_mean_pred = 0.0;
  double js_equivalent = 0.0;      // mean over truth draws
  double js_equivalent_std = 0.0;  // sample std over truth draws (0 for a single draw)
};

/// Mean-prediction divergence from the uniform truth frequencies against the
/// divergence of fresh truth draws of size round(n_hat).
inline ClosureResult closure_check(const BinEnsembleStats& stats, double n_hat,
                                   const QuantileGrid& grid, const RingSpec& spec,
                                   std::uint64_t truth_seed, std::size_t truth_draws = 1) {
  require(n_hat >= 1.0, "closure: n_hat must be >= 1");
  require(grid.n_bins() == stats.n_bins(), "closure: grid does not match the statistics");
  require(truth_draws >= 1, "closure: need at least one truth draw");
  const std::vector<double> uniform(stats.n_bins(), 1.0 / static_cast<double>(stats.n_bins()));
  ClosureResult r;
  r.js_mean_pred = js_divergence(normalized(stats.mean), uniform);
  const auto size = static_cast<std::size_t>(std::llround(n_hat));
  std::vector<double> values;
  for (std::size_t k = 0; k < truth_draws; ++k) {
    const auto truth = sample_ring(spec, size, derive_seed(truth_seed, "closure-truth", k));
    values.push_back(js_divergence(count_bins(grid, truth.points), uniform));
  }
  double mean = 0.0;
  for (double v : values) mean += v / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  r.js_equivalent = mean;
  r.js_equivalent_std =
      values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
  return r;
}

}  // namespace bcnf
