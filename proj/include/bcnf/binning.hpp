#pragma once

// Polar equal-probability bins, per-bin ensemble statistics, empirical-CDF
// intervals and coverage.
//
// Bin index: j = j_r * n_per_dim + j_phi. Radial bins are bounded by the
// interior edges only: radii below the first interior edge fall into the
// innermost bin, radii beyond the last one into the outermost bin. A point
// exactly on an edge belongs to the upper bin.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "bcnf/ensemble.hpp"
#include "bcnf/error.hpp"
#include "bcnf/flow.hpp"
#include "bcnf/net.hpp"
#include "bcnf/parallel.hpp"
#include "bcnf/ring.hpp"
#include "bcnf/rng.hpp"

namespace bcnf {

struct QuantileGrid {
  std::vector<double> radial_edges;   // n_per_dim + 1 entries; first and last are nominal
  std::vector<double> angular_edges;  // n_per_dim + 1 entries, linear in [0, 2 pi]
  std::size_t n_per_dim = 0;

  std::size_t n_bins() const { return n_per_dim * n_per_dim; }

  std::size_t radial_bin(double r) const {
    const auto first = radial_edges.begin() + 1;
    const auto last = radial_edges.end() - 1;
    return static_cast<std::size_t>(std::upper_bound(first, last, r) - first);
  }

  std::size_t angular_bin(double phi) const {
    const auto j = static_cast<std::size_t>(phi / (2.0 * std::numbers::pi) *
                                            static_cast<double>(n_per_dim));
    return std::min(j, n_per_dim - 1);
  }

  std::size_t bin(double x, double y) const {
    const auto [r, phi] = to_polar(x, y);
    return radial_bin(r) * n_per_dim + angular_bin(phi);
  }
};

inline std::vector<double> linear_angular_edges(std::size_t n) {
  std::vector<double> edges(n + 1);
  for (std::size_t k = 0; k <= n; ++k)
    edges[k] = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
  return edges;
}

/// Radial edges at the k / n_per_dim empirical quantiles of the reference
/// radii; the outer entries are 0 and the largest reference radius.
inline QuantileGrid build_grid(const SampleSet& reference, std::size_t n_per_dim) {
  require(n_per_dim >= 1, "grid: n_per_dim must be >= 1");
  require(reference.size() >= 100 * n_per_dim,
          "grid: reference set of " + std::to_string(reference.size()) +
              " points is too small for " + std::to_string(n_per_dim) + " radial bins");
  std::vector<double> radii(reference.size());
  for (std::size_t i = 0; i < radii.size(); ++i)
    radii[i] = reference.points.col(static_cast<Eigen::Index>(i)).norm();
  QuantileGrid grid;
  grid.n_per_dim = n_per_dim;
  grid.radial_edges.assign(n_per_dim + 1, 0.0);
  for (std::size_t k = 1; k < n_per_dim; ++k) {
    const std::size_t idx = k * radii.size() / n_per_dim;
    std::nth_element(radii.begin(), radii.begin() + static_cast<std::ptrdiff_t>(idx), radii.end());
    grid.radial_edges[k] = radii[idx];
  }
  grid.radial_edges[n_per_dim] = *std::max_element(radii.begin(), radii.end());
  std::sort(grid.radial_edges.begin() + 1, grid.radial_edges.end() - 1);
  for (std::size_t k = 1; k < n_per_dim; ++k)
    require(grid.radial_edges[k] > grid.radial_edges[k - 1], "grid: radial edges not increasing");
  grid.angular_edges = linear_angular_edges(n_per_dim);
  return grid;
}

inline std::vector<std::size_t> bin_indices(const QuantileGrid& grid, const Matrix& points) {
  std::vector<std::size_t> out(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index i = 0; i < points.cols(); ++i)
    out[static_cast<std::size_t>(i)] = grid.bin(points(0, i), points(1, i));
  return out;
}

inline std::vector<double> count_bins(const QuantileGrid& grid, const Matrix& points) {
  require(points.cols() > 0, "count_bins: empty sample set");
  std::vector<double> freq(grid.n_bins(), 0.0);
  for (std::size_t j : bin_indices(grid, points)) freq[j] += 1.0;
  const double n = static_cast<double>(points.cols());
  for (double& f : freq) f /= n;
  return freq;
}

/// Relative frequencies g_j^(i) for every member i and bin j.
struct BinEnsembleStats {
  Matrix counts;  // members x bins
  std::vector<double> mean;
  std::vector<double> stddev;  // population std over members
  std::size_t set_size = 0;
  std::size_t n_per_dim = 0;

  std::size_t members() const { return static_cast<std::size_t>(counts.rows()); }
  std::size_t n_bins() const { return static_cast<std::size_t>(counts.cols()); }
};

inline BinEnsembleStats make_bin_stats(Matrix frequencies, std::size_t set_size,
                                       std::size_t n_per_dim) {
  require(frequencies.rows() >= 1, "bin stats: no ensemble members");
  require(static_cast<std::size_t>(frequencies.cols()) == n_per_dim * n_per_dim,
          "bin stats: frequency matrix does not match the grid");
  BinEnsembleStats s;
  s.set_size = set_size;
  s.n_per_dim = n_per_dim;
  const auto m = static_cast<double>(frequencies.rows());
  s.mean.resize(static_cast<std::size_t>(frequencies.cols()));
  s.stddev.resize(s.mean.size());
  for (Eigen::Index j = 0; j < frequencies.cols(); ++j) {
    const double mu = frequencies.col(j).sum() / m;
    const double var = (frequencies.col(j).array() - mu).square().sum() / m;
    s.mean[static_cast<std::size_t>(j)] = mu;
    s.stddev[static_cast<std::size_t>(j)] = std::sqrt(var);
  }
  s.counts = std::move(frequencies);
  return s;
}

/// Seed of the generated set of ensemble member i.
inline std::uint64_t member_generation_seed(std::uint64_t seed, std::size_t member,
                                            bool shared) {
  return derive_seed(seed, "generate", shared ? 0 : member);
}

/// Generates max(set_sizes) points per member once and bins the first
/// set_sizes[g] of them on grids[g].
inline std::vector<BinEnsembleStats> ensemble_stats(
    const VectorField& field, std::span<const QuantileGrid> grids,
    const PosteriorEnsemble& ensemble, std::span<const std::size_t> set_sizes,
    std::uint64_t seed, const SolverConfig& solver, bool shared_generation_seed = false,
    std::size_t workers = 0) {
  require(ensemble.size() >= 1, "ensemble_stats: empty ensemble");
  require(grids.size() == set_sizes.size(), "ensemble_stats: one set size per grid required");
  const std::size_t m = ensemble.size();
  std::vector<Matrix> freq(grids.size());
  for (std::size_t g = 0; g < grids.size(); ++g)
    freq[g] = Matrix::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(grids[g].n_bins()));
  const std::size_t n_max =
      set_sizes.empty() ? 0 : *std::max_element(set_sizes.begin(), set_sizes.end());
  if (n_max == 0) return {};
  parallel_for(
      m,
      [&](std::size_t i) {
        const SampleSet gen = generate(field, ensemble.members[i], n_max,
                                       member_generation_seed(seed, i, shared_generation_seed),
                                       solver);
        for (std::size_t g = 0; g < grids.size(); ++g) {
          const auto f = count_bins(grids[g], gen.points.leftCols(static_cast<Eigen::Index>(set_sizes[g])));
          for (std::size_t j = 0; j < f.size(); ++j)
            freq[g](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f[j];
        }
      },
      workers);
  std::vector<BinEnsembleStats> out;
  for (std::size_t g = 0; g < grids.size(); ++g)
    out.push_back(make_bin_stats(std::move(freq[g]), set_sizes[g], grids[g].n_per_dim));
  return out;
}

inline BinEnsembleStats ensemble_stats(const VectorField& field, const QuantileGrid& grid,
                                       const PosteriorEnsemble& ensemble, std::size_t set_size,
                                       std::uint64_t seed, const SolverConfig& solver,
                                       bool shared_generation_seed = false) {
  const std::size_t sizes[] = {set_size};
  return std::move(ensemble_stats(field, std::span(&grid, 1), ensemble, sizes, seed, solver,
                                  shared_generation_seed)
                       .front());
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double v) const { return lo <= v && v <= hi; }
};

/// Inverse of the piecewise-linear empirical CDF with knots at plotting
/// positions (i - 0.5) / n, clamped to [min, max] outside the knots.
inline double empirical_quantile(std::span<const double> sorted, double p) {
  const double n = static_cast<double>(sorted.size());
  const double pos = p * n + 0.5;  // 1-based fractional index
  if (pos <= 1.0) return sorted.front();
  if (pos >= n) return sorted.back();
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(i);
  return sorted[i - 1] + frac * (sorted[i] - sorted[i - 1]);
}

inline Interval confidence_interval(std::span<const double> values, double c) {
  require(values.size() >= 2, "confidence_interval: need at least 2 values");
  require(c >= 0.0 && c <= 1.0, "confidence_interval: c must be in [0, 1]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return {empirical_quantile(sorted, 0.5 - 0.5 * c), empirical_quantile(sorted, 0.5 + 0.5 * c)};
}

inline std::vector<double> nominal_grid(std::size_t n = 50) {
  std::vector<double> c(n);
  for (std::size_t i = 0; i < n; ++i)
    c[i] = n == 1 ? 1.0 : static_cast<double>(i) / static_cast<double>(n - 1);
  return c;
}

struct CoverageCurve {
  std::vector<double> nominal;
  Matrix per_bin;        // nominal x bins, c_hat_j(c)
  std::vector<double> mean;
  Matrix marginal_r;     // nominal x n_per_dim, averaged over j_phi
  Matrix marginal_phi;   // nominal x n_per_dim, averaged over j_r
  std::size_t runs = 0;
  std::size_t n_per_dim = 0;
};

/// Fraction of runs whose interval contains the truth value 1 / n_Q.
inline CoverageCurve coverage(std::span<const BinEnsembleStats> runs,
                              std::span<const double> nominal) {
  require(runs.size() >= 2, "coverage: need at least 2 runs");
  const std::size_t n = runs.front().n_per_dim;
  const std::size_t n_bins = n * n;
  for (const auto& r : runs)
    require(r.n_per_dim == n && r.n_bins() == n_bins, "coverage: runs use different grids");
  const double truth = 1.0 / static_cast<double>(n_bins);
  CoverageCurve curve;
  curve.nominal.assign(nominal.begin(), nominal.end());
  curve.runs = runs.size();
  curve.n_per_dim = n;
  const auto nc = static_cast<Eigen::Index>(nominal.size());
  curve.per_bin = Matrix::Zero(nc, static_cast<Eigen::Index>(n_bins));

  std::vector<double> sorted;
  for (const auto& r : runs) {
    for (std::size_t j = 0; j < n_bins; ++j) {
      const auto col = r.counts.col(static_cast<Eigen::Index>(j));
      sorted.assign(col.data(), col.data() + col.size());
      require(sorted.size() >= 2, "coverage: need at least 2 ensemble members");
      std::sort(sorted.begin(), sorted.end());
      for (Eigen::Index ci = 0; ci < nc; ++ci) {
        const double c = nominal[static_cast<std::size_t>(ci)];
        const Interval iv{empirical_quantile(sorted, 0.5 - 0.5 * c),
                          empirical_quantile(sorted, 0.5 + 0.5 * c)};
        if (iv.contains(truth)) curve.per_bin(ci, static_cast<Eigen::Index>(j)) += 1.0;
      }
    }
  }
  curve.per_bin /= static_cast<double>(runs.size());
  curve.mean.resize(nominal.size());
  curve.marginal_r = Matrix::Zero(nc, static_cast<Eigen::Index>(n));
  curve.marginal_phi = Matrix::Zero(nc, static_cast<Eigen::Index>(n));
  for (Eigen::Index ci = 0; ci < nc; ++ci) {
    curve.mean[static_cast<std::size_t>(ci)] = curve.per_bin.row(ci).mean();
    for (std::size_t jr = 0; jr < n; ++jr)
      for (std::size_t jp = 0; jp < n; ++jp) {
        const double v = curve.per_bin(ci, static_cast<Eigen::Index>(jr * n + jp));
        curve.marginal_r(ci, static_cast<Eigen::Index>(jr)) += v / static_cast<double>(n);
        curve.marginal_phi(ci, static_cast<Eigen::Index>(jp)) += v / static_cast<double>(n);
      }
  }
  return curve;
}

struct Deviation {
  double md = 0.0;
  double mad = 0.0;
  double mad_r = 0.0;
  double mad_phi = 0.0;
};

namespace detail {

inline double marginal_mad(const Matrix& marginal, std::span<const double> nominal) {
  double total = 0.0;
  for (Eigen::Index j = 0; j < marginal.cols(); ++j) {
    double inner = 0.0;
    for (Eigen::Index ci = 0; ci < marginal.rows(); ++ci)
      inner += std::abs(marginal(ci, j) - nominal[static_cast<std::size_t>(ci)]);
    total += inner / static_cast<double>(marginal.rows());
  }
  return total / static_cast<double>(marginal.cols());
}

}  // namespace detail

inline Deviation deviation(const CoverageCurve& curve) {
  Deviation d;
  const double n = static_cast<double>(curve.nominal.size());
  for (std::size_t i = 0; i < curve.nominal.size(); ++i) {
    d.md += (curve.mean[i] - curve.nominal[i]) / n;
    d.mad += std::abs(curve.mean[i] - curve.nominal[i]) / n;
  }
  d.mad_r = detail::marginal_mad(curve.marginal_r, curve.nominal);
  d.mad_phi = detail::marginal_mad(curve.marginal_phi, curve.nominal);
  return d;
}

}  // namespace bcnf
