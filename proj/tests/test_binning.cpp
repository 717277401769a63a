#include <cmath>
#include <numbers>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "bcnf/binning.hpp"
#include "ensemble_oracles.hpp"

using namespace bcnf;

namespace {

const RingSpec kRing{};

const QuantileGrid& grid_for(std::size_t n) {
  static std::vector<std::pair<std::size_t, QuantileGrid>> cache;
  for (const auto& [k, g] : cache)
    if (k == n) return g;
  static const SampleSet reference = sample_ring(kRing, 1000000, 99);
  cache.emplace_back(n, build_grid(reference, n));
  return cache.back().second;
}

}  // namespace

TEST(BuildGrid, EqualProbabilityBins) {
  const auto reference = sample_ring(kRing, 10000000, 1);
  const auto grid = build_grid(reference, 5);
  const auto fresh = sample_ring(kRing, 1000000, 2);
  for (double f : count_bins(grid, fresh.points)) EXPECT_NEAR(f, 0.04, 0.001);
}

TEST(BuildGrid, MedianEdge) {
  const auto& grid = grid_for(4);
  // Binomial error of the sample median of 1e6 radii is about 1e-3.
  EXPECT_NEAR(grid.radial_edges[2], 4.8391, 4e-3);
  EXPECT_NEAR(grid.radial_edges[2], radial_quantile(kRing, 0.5), 4e-3);
}

TEST(BuildGrid, LinearAngularEdges) {
  const auto& grid = grid_for(4);
  const double pi = std::numbers::pi;
  const std::vector<double> expected{0.0, pi / 2, pi, 3 * pi / 2, 2 * pi};
  ASSERT_EQ(grid.angular_edges.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(grid.angular_edges[k], expected[k]);
  EXPECT_EQ(grid.n_bins(), 16u);
  for (std::size_t k = 1; k < grid.radial_edges.size(); ++k)
    EXPECT_GT(grid.radial_edges[k], grid.radial_edges[k - 1]);
}

TEST(BuildGrid, SmallReferenceRejected) {
  const auto reference = sample_ring(kRing, 499, 3);
  EXPECT_THROW(build_grid(reference, 5), ConfigError);
  EXPECT_NO_THROW(build_grid(sample_ring(kRing, 500, 3), 5));
}

TEST(CountBins, SumsToOneAndTruthIsUniform) {
  const auto& grid = grid_for(6);
  const auto truth = sample_ring(kRing, 1000000, 4);
  const auto f = count_bins(grid, truth.points);
  double sum = 0.0;
  const double p = 1.0 / 36.0, sd = std::sqrt(p * (1 - p) / 1e6);
  for (double v : f) {
    sum += v;
    // The grid edges carry their own sampling error of a similar size.
    EXPECT_NEAR(v, p, 4.0 * std::sqrt(2.0) * sd);
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(CountBins, EdgeConventions) {
  QuantileGrid g;
  g.n_per_dim = 2;
  g.radial_edges = {0.0, 5.0, 9.0};
  g.angular_edges = linear_angular_edges(2);
  EXPECT_EQ(g.bin(5.0, 0.0), 2u);              // on the edge: upper bin
  EXPECT_EQ(g.bin(4.999999, 0.0), 0u);
  EXPECT_EQ(g.bin(50.0, 0.0), 2u);             // beyond the last edge: outermost bin
  EXPECT_EQ(g.bin(0.1, 0.0), 0u);
  EXPECT_EQ(g.bin(-6.0, -1e-12), 3u);          // just below 2 pi
  EXPECT_EQ(g.bin(-6.0, 0.0), 3u);             // phi = pi: upper angular bin
  EXPECT_EQ(g.bin(0.0, 6.0), 2u);
  EXPECT_THROW(count_bins(g, Matrix(2, 0)), ConfigError);
}

TEST(EnsembleStats, SharedSeedIdenticalMembersHaveZeroSpread) {
  NetConfig cfg{2, 8};
  VectorField f(cfg);
  PosteriorEnsemble ens;
  const auto theta = init_params(cfg, 5);
  ens.members.assign(4, theta);
  const auto& grid = grid_for(3);
  const auto shared = ensemble_stats(f, grid, ens, 300, 6, SolverConfig{10, 64}, true);
  for (double s : shared.stddev) EXPECT_EQ(s, 0.0);
  const auto own = ensemble_stats(f, grid, ens, 300, 6, SolverConfig{10, 64}, false);
  double total = 0.0;
  for (double s : own.stddev) total += s;
  EXPECT_GT(total, 0.0);
  for (Eigen::Index i = 0; i < own.counts.rows(); ++i) EXPECT_NEAR(own.counts.row(i).sum(), 1.0, 1e-12);
}

TEST(EnsembleStats, MultiGridPrefixMatchesSingleGrid) {
  NetConfig cfg{2, 8};
  VectorField f(cfg);
  PosteriorEnsemble ens;
  for (std::uint64_t k = 0; k < 3; ++k) ens.members.push_back(init_params(cfg, 10 + k));
  const std::vector<QuantileGrid> grids{grid_for(2), grid_for(3)};
  const std::vector<std::size_t> sizes{400, 900};
  const SolverConfig solver{10, 128};
  const auto multi = ensemble_stats(f, grids, ens, sizes, 7, solver);
  for (std::size_t g = 0; g < 2; ++g) {
    const auto single = ensemble_stats(f, grids[g], ens, sizes[g], 7, solver);
    EXPECT_TRUE((single.counts.array() == multi[g].counts.array()).all()) << g;
  }
}

TEST(EnsembleStats, IndependentDrawSpreadIsBinomial) {
  const auto& grid = grid_for(3);
  const std::size_t s = 2000;
  const auto st = oracle::independent_draws(grid, kRing, s, 50, 8);
  const double p = 1.0 / 9.0, expected = std::sqrt(p * (1 - p) / static_cast<double>(s));
  double mean_sd = 0.0;
  for (double v : st.stddev) {
    EXPECT_NEAR(v, expected, 0.35 * expected);
    mean_sd += v / 9.0;
  }
  EXPECT_NEAR(mean_sd, expected, 0.2 * expected);
}

TEST(ConfidenceInterval, Examples) {
  std::vector<double> v;
  for (int i = 1; i <= 50; ++i) v.push_back(i);
  const auto half = confidence_interval(v, 0.5);
  EXPECT_NEAR(half.lo, 13.0, 1e-12);
  EXPECT_NEAR(half.hi, 38.0, 1e-12);
  const auto zero = confidence_interval(v, 0.0);
  EXPECT_DOUBLE_EQ(zero.lo, 25.5);
  EXPECT_DOUBLE_EQ(zero.hi, 25.5);
  const auto full = confidence_interval(v, 1.0);
  EXPECT_EQ(full.lo, 1.0);
  EXPECT_EQ(full.hi, 50.0);
  EXPECT_THROW(confidence_interval(std::vector<double>{1.0}, 0.5), ConfigError);
  EXPECT_THROW(confidence_interval(v, 1.5), ConfigError);
}

TEST(ConfidenceInterval, MonotoneInC) {
  CounterRng rng(9);
  std::vector<double> v(37);
  for (auto& x : v) x = rng.normal();
  Interval prev = confidence_interval(v, 0.0);
  for (double c : nominal_grid(200)) {
    const auto iv = confidence_interval(v, c);
    EXPECT_LE(iv.lo, prev.lo);
    EXPECT_GE(iv.hi, prev.hi);
    prev = iv;
  }
}

TEST(Coverage, AlwaysContainingGivesOne) {
  const std::size_t n = 3;
  std::vector<BinEnsembleStats> runs;
  for (int r = 0; r < 4; ++r)
    runs.push_back(make_bin_stats(Matrix::Constant(5, 9, 1.0 / 9.0), 100, n));
  const auto curve = coverage(runs, nominal_grid());
  EXPECT_TRUE((curve.per_bin.array() == 1.0).all());
  for (double m : curve.mean) EXPECT_EQ(m, 1.0);
}

TEST(Coverage, FiveRunsGiveSixValues) {
  const auto& grid = grid_for(3);
  std::vector<BinEnsembleStats> runs;
  for (std::uint64_t r = 0; r < 5; ++r) runs.push_back(oracle::bootstrap_draws(grid, kRing, 500, 20, 10 + r));
  const auto curve = coverage(runs, nominal_grid());
  const std::set<double> allowed{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::set<double> seen;
  for (Eigen::Index i = 0; i < curve.per_bin.size(); ++i) {
    const double v = curve.per_bin(i);
    bool ok = false;
    for (double a : allowed) ok = ok || std::abs(v - a) < 1e-12;
    EXPECT_TRUE(ok) << v;
    seen.insert(std::round(v * 5.0) / 5.0);
  }
  EXPECT_GT(seen.size(), 2u);
}

TEST(Coverage, MismatchedGridsRejected) {
  std::vector<BinEnsembleStats> runs{make_bin_stats(Matrix::Constant(3, 4, 0.25), 10, 2),
                                     make_bin_stats(Matrix::Constant(3, 9, 1.0 / 9), 10, 3)};
  EXPECT_THROW(coverage(runs, nominal_grid()), ConfigError);
  EXPECT_THROW(coverage(std::span(runs).first(1), nominal_grid()), ConfigError);
}

TEST(Coverage, CalibratedOracleNearDiagonal) {
  const auto& grid = grid_for(4);
  std::vector<BinEnsembleStats> runs;
  for (std::uint64_t r = 0; r < 40; ++r) runs.push_back(oracle::bootstrap_draws(grid, kRing, 2000, 40, 100 + r));
  const auto curve = coverage(runs, nominal_grid());
  // 40 runs x 16 bins: loose band; the acceptance suite runs the tight version.
  for (std::size_t i = 0; i < curve.nominal.size(); ++i)
    EXPECT_NEAR(curve.mean[i], curve.nominal[i], 0.08) << curve.nominal[i];
  const auto d = deviation(curve);
  EXPECT_LT(d.mad, 0.04);
}

TEST(Coverage, MarginalMeansCommute) {
  const auto& grid = grid_for(3);
  std::vector<BinEnsembleStats> runs;
  for (std::uint64_t r = 0; r < 6; ++r) runs.push_back(oracle::bootstrap_draws(grid, kRing, 300, 10, 200 + r));
  const auto curve = coverage(runs, nominal_grid());
  for (std::size_t i = 0; i < curve.nominal.size(); ++i) {
    const auto ci = static_cast<Eigen::Index>(i);
    EXPECT_NEAR(curve.marginal_r.row(ci).mean(), curve.mean[i], 1e-14);
    EXPECT_NEAR(curve.marginal_phi.row(ci).mean(), curve.mean[i], 1e-14);
  }
}

TEST(Deviation, Examples) {
  CoverageCurve diag;
  diag.nominal = nominal_grid();
  diag.mean = diag.nominal;
  diag.marginal_r = Matrix(50, 3);
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 50; ++i) diag.marginal_r(i, j) = diag.nominal[static_cast<std::size_t>(i)];
  diag.marginal_phi = diag.marginal_r;
  const auto d0 = deviation(diag);
  EXPECT_EQ(d0.md, 0.0);
  EXPECT_EQ(d0.mad, 0.0);
  EXPECT_EQ(d0.mad_r, 0.0);
  EXPECT_EQ(d0.mad_phi, 0.0);

  CoverageCurve one = diag;
  one.mean.assign(50, 1.0);
  one.marginal_r.setOnes();
  one.marginal_phi.setOnes();
  const auto d1 = deviation(one);
  EXPECT_NEAR(d1.md, 0.5, 1e-14);
  EXPECT_NEAR(d1.mad, 0.5, 1e-14);
}

TEST(Deviation, JensenOrdering) {
  const auto& grid = grid_for(3);
  for (std::uint64_t rep = 0; rep < 5; ++rep) {
    std::vector<BinEnsembleStats> runs;
    for (std::uint64_t r = 0; r < 5; ++r)
      runs.push_back(oracle::bootstrap_draws(grid, kRing, 200, 8, 300 + 10 * rep + r));
    const auto d = deviation(coverage(runs, nominal_grid()));
    EXPECT_GE(d.mad + 1e-15, std::abs(d.md));
    EXPECT_GE(d.mad_r + 1e-15, d.mad);
    EXPECT_GE(d.mad_phi + 1e-15, d.mad);
  }
}
