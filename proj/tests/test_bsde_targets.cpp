#include <gtest/gtest.h>

#include "support.hpp"

using namespace amgru;
using amgru::testing::geometric_call;

TEST(StoppingIndex, MonotoneMeansPickLastCandidate) {
  const std::vector<double> mean_f{0, 1, 2, 3, 4, 5};
  for (std::size_t n = 0; n + 1 < 5; ++n) EXPECT_EQ(cross_sectional_index(mean_f, n), 4u);
}

TEST(StoppingIndex, TiesGoToLatest) {
  const std::vector<double> flat(11, 2.5);
  for (std::size_t n = 0; n + 1 < 10; ++n) EXPECT_EQ(cross_sectional_index(flat, n), 9u);
}

TEST(StoppingIndex, InteriorPeak) {
  const std::vector<double> mean_f{0, 3, 7, 2, 7.5, 1, 9};
  EXPECT_EQ(cross_sectional_index(mean_f, 0), 4u);
  EXPECT_EQ(cross_sectional_index(mean_f, 1), 4u);
  EXPECT_EQ(cross_sectional_index(mean_f, 3), 4u);
  EXPECT_EQ(cross_sectional_index(mean_f, 4), 5u);
  EXPECT_EQ(cross_sectional_index(mean_f, 5), 6u);
}

TEST(StoppingIndex, LastStepMapsToMaturity) {
  const std::vector<double> mean_f{0, 1, 0.5};
  EXPECT_EQ(cross_sectional_index(mean_f, 1), 2u);
  EXPECT_THROW(cross_sectional_index(mean_f, 2), Error);
}

TEST(StoppingIndex, DeterministicRisingPaths) {
  const auto p = MarketParams::homogeneous(1, 0.05, 0.0, 0.0, 0.0, 95.0);
  const OptionSpec spec = geometric_call(100, 2.0, 20);
  const PathSet paths = simulate_paths(p, spec, 3, 1);
  for (std::size_t n = 0; n + 1 < 20; ++n) EXPECT_EQ(stopping_index(paths, spec, n), 19u);
  EXPECT_EQ(stopping_index(paths, spec, 19), 20u);
  EXPECT_EQ(stopping_index(paths, spec, 3, StoppingMode::European), 20u);
  const auto all = stopping_indices(paths, spec, StoppingMode::CrossSectionalArgmax);
  ASSERT_EQ(all.size(), 20u);
  EXPECT_EQ(all[0], 19u);
  EXPECT_EQ(all[19], 20u);
}

TEST(PerPathStopper, RecordsLatestObservedExercise) {
  PerPathStopper st(3, 10);
  EXPECT_EQ(st.index(0), 10u);
  st.observe(0, 7, 2.0, 1.0);
  st.observe(0, 5, 0.5, 1.0);
  EXPECT_EQ(st.index(0), 7u);
  st.observe(0, 4, 1.0, 1.0);
  EXPECT_EQ(st.index(0), 4u);
  st.observe(1, 3, 0.0, -1.0);
  EXPECT_EQ(st.index(1), 10u);
}

TEST(ContinuationTargets, ZeroRateConstantPayoff) {
  const auto p = MarketParams::homogeneous(2, 0.0, 0.0, 0.0, 0.5, 105.0);
  const OptionSpec spec = geometric_call(100, 1.0, 10);
  const PathSet paths = simulate_paths(p, spec, 6, 1);
  for (std::size_t n : {0u, 4u, 9u}) {
    const Targets t = continuation_targets(paths, spec, p, n, 10);
    for (std::size_t m = 0; m < 6; ++m) EXPECT_NEAR(t.c(m, 0), 5.0, 1e-12);
  }
}

TEST(ContinuationTargets, DeterministicDeltaRatio) {
  const auto p = MarketParams::homogeneous(1, 0.05, 0.0, 0.0, 0.0, 110.0);
  const OptionSpec spec = geometric_call(100, 1.0, 20);
  const PathSet paths = simulate_paths(p, spec, 2, 1);
  const double dt = spec.dt();
  for (std::size_t n : {0u, 5u, 12u})
    for (std::size_t k : {n + 1, n + 4, std::size_t{19}}) {
      const Targets t = continuation_targets(paths, spec, p, n, k);
      const double expected =
          std::exp(-p.r * dt * static_cast<double>(k - n)) * 1.0 *
          std::pow(1.0 + p.r * dt, static_cast<double>(k - n));
      EXPECT_NEAR(t.dc(0, 0), expected, 1e-13);
      EXPECT_NEAR(t.c(0, 0),
                  std::exp(-p.r * dt * static_cast<double>(k - n)) * (paths.price(0, k, 0) - 100.0),
                  1e-12);
    }
}

TEST(ContinuationTargets, DiscountMonotonicity) {
  // delta = r keeps prices flat, so the payoff draw is the same at every k.
  const auto p = MarketParams::homogeneous(1, 0.05, 0.05, 0.0, 0.0, 120.0);
  const OptionSpec spec = geometric_call(100, 1.0, 30);
  const PathSet paths = simulate_paths(p, spec, 1, 1);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < 30; ++k) {
    const double c = continuation_targets(paths, spec, p, 0, k).c(0, 0);
    EXPECT_LT(c, prev);
    EXPECT_GE(c, 0.0);
    prev = c;
  }
}

TEST(ContinuationTargets, PathwiseRatioUnderZeroVol) {
  const auto p = MarketParams::homogeneous(2, 0.04, 0.01, 0.0, 0.3, 100.0);
  const OptionSpec spec = geometric_call(100, 1.0, 25);
  const PathSet paths = simulate_paths(p, spec, 1, 1);
  const double g = 1.0 + (p.r - p.dividends[0]) * spec.dt();
  for (std::size_t n = 0; n < 25; ++n)
    for (std::size_t k = n; k <= 25; ++k)
      for (std::size_t j = 0; j < 2; ++j) {
        const double ratio = paths.price(0, k, j) / paths.price(0, n, j);
        EXPECT_NEAR(ratio, std::pow(g, static_cast<double>(k - n)), 1e-14);
      }
}

TEST(ContinuationTargets, MaturityMatchesSmoothedPayoff) {
  const auto p = MarketParams::homogeneous(2, 0.02, 0.0, 0.3, 0.5, 100.0);
  for (PayoffKind kind : {PayoffKind::GeometricAverageCall, PayoffKind::MaxCall}) {
    const OptionSpec spec = amgru::testing::with_kind(geometric_call(100, 1.0, 8), kind);
    const PathSet paths = simulate_paths(p, spec, 50, 3);
    const TargetSet ts = build_targets(paths, spec, p, StoppingMode::CrossSectionalArgmax);
    std::vector<double> g(2);
    for (std::size_t m = 0; m < 50; ++m) {
      const auto s = paths.state(m, 8);
      EXPECT_EQ(ts.c(m, 8), smoothed_payoff(spec, s));
      smoothed_payoff_grad(spec, s, g);
      EXPECT_EQ(ts.dc[8](m, 0), g[0]);
      EXPECT_EQ(ts.dc[8](m, 1), g[1]);
    }
    for (std::size_t n = 0; n < 8; ++n) EXPECT_GT(ts.n_tilde[n], n);
  }
}

TEST(ContinuationTargets, DivisionByZero) {
  PathSet paths(1, 2, 1, 0);
  paths.price(0, 0, 0) = 0.0;
  paths.price(0, 1, 0) = 1.0;
  paths.price(0, 2, 0) = 2.0;
  const auto p = MarketParams::homogeneous(1, 0.0, 0.0, 0.2, 0.0, 1.0);
  try {
    continuation_targets(paths, geometric_call(1, 1.0, 2), p, 0, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DivisionByZero);
  }
}

TEST(ContinuationTargets, EuropeanForcedMatchesReducedBlackScholes) {
  const auto p = MarketParams::homogeneous(2, 0.0, 0.0, 0.25, 0.75, 100.0);
  const OptionSpec spec = geometric_call(100, 2.0, 50);
  const PathSet paths = simulate_paths(p, spec, 200000, 17);
  const Targets t = continuation_targets(paths, spec, p, 0, 50);
  double s1 = 0, s2 = 0;
  for (double v : t.c.values()) s1 += v, s2 += v * v;
  const double n = static_cast<double>(paths.paths());
  const double mean = s1 / n, se = std::sqrt((s2 / n - mean * mean) / n);
  const OneDimParams e = equivalent_1d_params(p);
  const double bs = bs_european_call(100.0, 100.0, p.r, p.r - e.mu, e.sigma, 2.0).price;
  EXPECT_LT(std::abs(mean - bs), 3.0 * se) << mean << " vs " << bs << " se " << se;
}

TEST(Loss, ZeroAtExactMatch) {
  std::mt19937_64 rng(1);
  const Tensor c = amgru::testing::random_tensor(rng, 7, 1);
  const Tensor dc = amgru::testing::random_tensor(rng, 7, 3);
  const auto p = MarketParams::homogeneous(3, 0.0, 0.0, 0.2, 0.4, 1.0);
  EXPECT_EQ(loss_value(c, dc, c, dc, sigma_tilde(p), 0.01), 0.0);
}

TEST(Loss, DirectFormula) {
  const Tensor sig(1, 1, {0.2});
  EXPECT_NEAR(loss_value(Tensor(1, 1, {1.0}), Tensor(1, 1, {0.5}), Tensor(1, 1, {3.0}),
                         Tensor(1, 1, {1.5}), sig, 0.01),
              4.0004, 1e-14);
}

TEST(Loss, QuadraticHomogeneity) {
  std::mt19937_64 rng(2);
  const std::size_t m = 9, d = 2;
  const Tensor y = amgru::testing::random_tensor(rng, m, 1), c = amgru::testing::random_tensor(rng, m, 1);
  const Tensor dy = amgru::testing::random_tensor(rng, m, d), dc = amgru::testing::random_tensor(rng, m, d);
  const Tensor sig = sigma_tilde(MarketParams::homogeneous(d, 0.0, 0.0, 0.3, 0.6, 1.0));
  const double base = loss_value(y, dy, c, dc, sig, 0.04);
  for (double lambda : {0.5, 2.0, 7.0}) {
    Tensor c2 = c, dc2 = dc;
    for (std::size_t i = 0; i < m; ++i) {
      c2[i] = y[i] + lambda * (c[i] - y[i]);
      for (std::size_t j = 0; j < d; ++j) dc2(i, j) = dy(i, j) + lambda * (dc(i, j) - dy(i, j));
    }
    EXPECT_NEAR(loss_value(y, dy, c2, dc2, sig, 0.04), lambda * lambda * base, 1e-12 * lambda * lambda);
  }
}

TEST(Loss, SigmaTildeIsScaledCholesky) {
  auto p = MarketParams::homogeneous(2, 0.0, 0.0, 0.25, 0.75, 100.0);
  p.sigma[1] = 0.4;
  const Tensor s = sigma_tilde(p);
  EXPECT_DOUBLE_EQ(s(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(s(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(s(1, 0), 0.4 * 0.75);
  EXPECT_DOUBLE_EQ(s(1, 1), 0.4 * std::sqrt(1 - 0.75 * 0.75));
}

TEST(Loss, ShapeMismatch) {
  const Tensor sig(2, 2, {1, 0, 0, 1});
  EXPECT_THROW(loss_value(Tensor(3, 1), Tensor(3, 2), Tensor(2, 1), Tensor(3, 2), sig, 0.1), Error);
  EXPECT_THROW(loss_value(Tensor(3, 1), Tensor(3, 2), Tensor(3, 1), Tensor(3, 1), sig, 0.1), Error);
}
