#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "bcnf/rng.hpp"

using namespace bcnf;

TEST(Rng, OutputIsAFunctionOfKeyAndCounter) {
  CounterRng rng(12345);
  for (std::uint64_t i = 1; i <= 100; ++i) {
    const std::uint64_t expected = splitmix64_mix(12345 + i * 0x9E3779B97F4A7C15ULL);
    EXPECT_EQ(rng(), expected);
    EXPECT_EQ(rng.counter(), i);
  }
}

TEST(Rng, EqualSeedsGiveEqualStreams) {
  CounterRng a(7), b(7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.normal(), b.normal());
}

TEST(Rng, DerivedSeedsAreDistinct) {
  std::set<std::uint64_t> seen;
  for (const char* purpose : {"training-data", "init", "cfm", "generate"})
    for (std::uint64_t run = 0; run < 50; ++run) seen.insert(derive_seed(42, purpose, run));
  EXPECT_EQ(seen.size(), 200u);
  EXPECT_NE(derive_seed(1, "x"), derive_seed(2, "x"));
  EXPECT_EQ(derive_seed(9, "abc", 3), derive_seed(9, "abc", 3));
}

TEST(Rng, UniformMomentsAndRange) {
  CounterRng rng(1);
  const int n = 1000000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sum2 += u * u;
  }
  EXPECT_NEAR(sum / n, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_NEAR(sum2 / n - std::pow(sum / n, 2), 1.0 / 12.0, 1e-3);
}

TEST(Rng, NormalMoments) {
  CounterRng rng(2);
  const int n = 1000000;
  double s1 = 0.0, s2 = 0.0, s4 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s1 += z;
    s2 += z * z;
    s4 += z * z * z * z;
  }
  EXPECT_NEAR(s1 / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 4.0 * std::sqrt(2.0 / n));
  EXPECT_NEAR(s4 / n, 3.0, 4.0 * std::sqrt(96.0 / n));
}

TEST(Rng, ExponentialMean) {
  CounterRng rng(3);
  const int n = 1000000;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = rng.exponential(2.0);
    ASSERT_GE(e, 0.0);
    s += e;
  }
  EXPECT_NEAR(s / n, 0.5, 4.0 * 0.5 / std::sqrt(n));
}

TEST(Rng, IndexIsUniform) {
  CounterRng rng(4);
  const int k = 10, n = 200000;
  std::vector<int> counts(k, 0);
  for (int i = 0; i < n; ++i) ++counts[rng.index(k)];
  double chi2 = 0.0;
  for (int c : counts) chi2 += std::pow(c - n / k, 2) / (n / k);
  EXPECT_LT(chi2, 27.88);  // df = 9, p = 1e-3
}
