#pragma once

// Gamma ring toy distribution: phi ~ U(0, 2 pi), r - r0 ~ Gamma(2, beta).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "bcnf/error.hpp"
#include "bcnf/net.hpp"
#include "bcnf/rng.hpp"

namespace bcnf {

struct RingSpec {
  double inner_radius = 4.0;
  double gamma_shape = 2.0;
  double gamma_rate = 2.0;

  void validate() const {
    require(inner_radius > 0.0, "ring: inner_radius must be > 0");
    require(gamma_rate > 0.0, "ring: gamma_rate must be > 0");
    // The sampler and the closed-form CDF are specialized to shape 2.
    require(gamma_shape == 2.0, "ring: only gamma_shape = 2 is supported");
  }
};

/// Points stored as a 2 x n matrix (one column per point).
struct SampleSet {
  Matrix points;
  std::uint64_t seed = 0;

  std::size_t size() const { return static_cast<std::size_t>(points.cols()); }
};

inline SampleSet sample_ring(const RingSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  require(n >= 1, "sample_ring: n must be >= 1");
  CounterRng rng(seed);
  SampleSet out;
  out.seed = seed;
  out.points.resize(2, static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < out.points.cols(); ++i) {
    const double phi = 2.0 * std::numbers::pi * rng.uniform();
    const double r = spec.inner_radius + rng.exponential(spec.gamma_rate) +
                     rng.exponential(spec.gamma_rate);
    out.points(0, i) = r * std::cos(phi);
    out.points(1, i) = r * std::sin(phi);
  }
  return out;
}

/// P(R <= r) for the shape-2 ring; 0 below the inner radius.
inline double radial_cdf(const RingSpec& spec, double r) {
  if (r <= spec.inner_radius) return 0.0;
  const double u = spec.gamma_rate * (r - spec.inner_radius);
  return -std::expm1(-u) - u * std::exp(-u);
}

/// Inverse of radial_cdf by bisection, p in [0, 1).
inline double radial_quantile(const RingSpec& spec, double p) {
  require(p >= 0.0 && p < 1.0, "radial_quantile: p must be in [0, 1)");
  double lo = spec.inner_radius;
  double hi = spec.inner_radius + 1.0;
  while (radial_cdf(spec, hi) < p) hi = spec.inner_radius + 2.0 * (hi - spec.inner_radius);
  for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (radial_cdf(spec, mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// (r, phi) with phi counterclockwise from +x in [0, 2 pi).
inline std::pair<double, double> to_polar(double x, double y) {
  if (x == 0.0 && y == 0.0) throw NumericalFault("to_polar: point at the origin", 0);
  double phi = std::atan2(y, x);
  if (phi < 0.0) phi += 2.0 * std::numbers::pi;
  if (phi >= 2.0 * std::numbers::pi) phi = 0.0;
  return {std::hypot(x, y), phi};
}

inline std::pair<double, double> to_cartesian(double r, double phi) {
  return {r * std::cos(phi), r * std::sin(phi)};
}

}  // namespace bcnf
