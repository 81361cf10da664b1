#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace amgru;
using amgru::testing::geometric_call;
using amgru::testing::with_kind;

namespace {

OptionSpec put_spec(double strike, double maturity, std::size_t steps = 50) {
  return with_kind(geometric_call(strike, maturity, steps), PayoffKind::GeometricAveragePut);
}

}  // namespace

TEST(BlackScholes, ReferenceValue) {
  const PriceDelta r = bs_european_call(100, 100, 0.05, 0.0, 0.2, 1.0);
  EXPECT_NEAR(r.price, 10.4506, 5e-5);
  EXPECT_NEAR(r.delta, 0.6368, 5e-5);
}

TEST(BlackScholes, MatchesExactLognormalMonteCarlo) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  const double s0 = 100, k = 100, r = 0.05, sigma = 0.2, t = 1.0;
  const std::size_t n = 1000000;
  double s1 = 0, s2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double st = s0 * std::exp((r - 0.5 * sigma * sigma) * t + sigma * std::sqrt(t) * z(rng));
    const double v = std::exp(-r * t) * std::max(st - k, 0.0);
    s1 += v, s2 += v * v;
  }
  const double mean = s1 / n, se = std::sqrt((s2 / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean - bs_european_call(s0, k, r, 0.0, sigma, t).price), 3 * se);
}

TEST(BlackScholes, Asymptotics) {
  const PriceDelta itm = bs_european_call(1000, 100, 0.05, 0.0, 0.2, 1.0);
  EXPECT_NEAR(itm.price, 1000 - 100 * std::exp(-0.05), 1e-8);
  EXPECT_NEAR(itm.delta, 1.0, 1e-12);
  EXPECT_NEAR(bs_european_call(90, 100, 0.05, 0.0, 1e-6, 1.0).price, 0.0, 1e-12);
  EXPECT_THROW(bs_european_call(90, 100, 0.05, 0.0, 0.0, 1.0), Error);
}

TEST(BlackScholes, PutCallParity) {
  for (double s : {70.0, 100.0, 130.0}) {
    const PriceDelta c = bs_european(true, s, 100, 0.03, 0.01, 0.3, 2.0);
    const PriceDelta p = bs_european(false, s, 100, 0.03, 0.01, 0.3, 2.0);
    EXPECT_NEAR(c.price - p.price, s * std::exp(-0.02) - 100 * std::exp(-0.06), 1e-10);
    EXPECT_NEAR(c.delta - p.delta, std::exp(-0.02), 1e-12);
  }
}

TEST(Binomial, DegenerateOneStep) {
  const Market1d mk{110.0, 0.0, 0.0, 0.0};
  EXPECT_EQ(binomial_american(mk, geometric_call(100, 1.0, 1), 1), 10.0);
  EXPECT_EQ(binomial_american(Market1d{90.0, 0.0, 0.0, 0.0}, put_spec(100, 1.0), 1), 10.0);
}

TEST(Binomial, EuropeanConvergesToBlackScholes) {
  const Market1d mk{100.0, 0.05, 0.0, 0.2};
  const OptionSpec spec = geometric_call(100, 1.0, 50);
  const double bs = bs_european_call(100, 100, 0.05, 0.0, 0.2, 1.0).price;
  for (std::size_t steps : {100u, 400u, 1600u, 6400u}) {
    const double err = std::abs(binomial_american(mk, spec, steps, false) - bs);
    EXPECT_LT(err * static_cast<double>(steps), 5.0) << steps;
  }
}

TEST(Binomial, AmericanCallWithoutDividendsIsEuropean) {
  const Market1d mk{95.0, 0.04, 0.0, 0.3};
  const OptionSpec spec = geometric_call(100, 1.5, 50);
  EXPECT_NEAR(binomial_american(mk, spec, 2000, true), binomial_american(mk, spec, 2000, false),
              1e-10);
}

TEST(Binomial, AmericanPutCarriesEarlyExercisePremium) {
  const Market1d mk{100.0, 0.05, 0.0, 0.2};
  const OptionSpec spec = put_spec(100, 1.0);
  EXPECT_GT(binomial_american(mk, spec, 2000, true),
            binomial_american(mk, spec, 2000, false) + 0.1);
}

TEST(FiniteDifference, AmericanCallWithoutDividendsMatchesBlackScholes) {
  const Market1d mk{100.0, 0.05, 0.0, 0.2};
  const FdSolution sol = fd_american_1d(mk, geometric_call(100, 1.0, 50));
  for (double s : {80.0, 100.0, 120.0}) {
    const PriceDelta bs = bs_european_call(s, 100, 0.05, 0.0, 0.2, 1.0);
    EXPECT_NEAR(sol.value_at(0, s), bs.price, 2e-3) << s;
    EXPECT_NEAR(sol.delta_at(0, s), bs.delta, 1e-3) << s;
  }
}

TEST(FiniteDifference, AmericanPutMatchesBinomial) {
  const Market1d mk{100.0, 0.05, 0.0, 0.2};
  const OptionSpec spec = put_spec(100, 1.0);
  const double fd = fd_american_1d(mk, spec).value_at(0, 100.0);
  const double tree = binomial_american(mk, spec, 10000);
  EXPECT_LT(std::abs(fd - tree), 1e-2) << fd << " vs " << tree;
}

TEST(FiniteDifference, ReducedGeometricMatchesBinomial) {
  const auto p = MarketParams::homogeneous(2, 0.0, 0.0, 0.25, 0.75, 100.0);
  const OptionSpec spec = geometric_call(100, 2.0, 50);
  for (double s0 : {90.0, 100.0, 110.0}) {
    Market1d mk = reduce_market(p);
    mk.s0 = s0;
    const double fd = fd_american_1d(mk, spec).value_at(0, s0);
    EXPECT_LT(std::abs(fd - binomial_american(mk, spec, 10000)), 1e-2) << s0;
  }
}

TEST(FiniteDifference, ShapeOfCallSurface) {
  const Market1d mk{100.0, 0.03, 0.06, 0.3};
  const OptionSpec spec = geometric_call(100, 1.0, 10);
  FdGrid grid;
  grid.nodes = 4097;
  grid.timesteps = 500;
  const FdSolution sol = fd_american_1d(mk, spec, grid);
  for (std::size_t k = 0; k < sol.levels(); ++k) {
    for (std::size_t j = 1; j < sol.s.size(); ++j)
      ASSERT_GE(sol.value[k][j], sol.value[k][j - 1] - 1e-9) << k << " " << j;
    for (double dlt : sol.delta[k]) {
      ASSERT_GE(dlt, -1e-9);
      ASSERT_LE(dlt, 1.0 + 1e-9);
    }
    for (std::size_t j = 0; j < sol.s.size(); ++j)
      ASSERT_GE(sol.value[k][j], payoff_1d(true, 100, sol.s[j]) - 1e-8 * 100);
  }
}

TEST(FiniteDifference, CyclingActiveSetStaysAbovePayoff) {
  // Coarse grid on which the penalty active set cycles at the boundary.
  const Market1d mk{100.0, 0.047112745034924026, 0.0040773201267174522, 0.42018495380236454};
  const OptionSpec spec = geometric_call(111.02224684880822, 1.7402141463137557, 4);
  FdGrid grid;
  grid.nodes = 257;
  grid.timesteps = 40;
  const FdSolution sol = fd_american_1d(mk, spec, grid);
  for (std::size_t k = 0; k < sol.levels(); ++k)
    for (std::size_t j = 0; j < sol.s.size(); ++j) {
      const double pay = payoff_1d(true, spec.strike, sol.s[j]);
      ASSERT_GE(sol.value[k][j], pay - 1e-6 - 1e-9 * pay) << k << " " << j;
    }
}

TEST(FiniteDifference, AmericanDominatesEuropean) {
  const Market1d mk{100.0, 0.05, 0.0, 0.25};
  const OptionSpec spec = put_spec(100, 1.0, 10);
  FdGrid grid;
  grid.nodes = 4097;
  grid.timesteps = 500;
  const FdSolution sol = fd_american_1d(mk, spec, grid);
  for (double s = 40.0; s <= 200.0; s += 5.0)
    EXPECT_GE(sol.value_at(0, s), bs_european(false, s, 100, 0.05, 0.0, 0.25, 1.0).price - 1e-3) << s;
  grid.american = false;
  const FdSolution eu = fd_american_1d(mk, spec, grid);
  for (double s = 60.0; s <= 160.0; s += 10.0)
    EXPECT_NEAR(eu.value_at(0, s), bs_european(false, s, 100, 0.05, 0.0, 0.25, 1.0).price, 5e-3) << s;
}

TEST(FiniteDifference, RichardsonSelfConsistency) {
  const auto p = MarketParams::homogeneous(2, 0.0, 0.0, 0.25, 0.75, 100.0);
  const OptionSpec spec = geometric_call(100, 2.0, 50);
  const Market1d mk = reduce_market(p);
  FdGrid fine;
  fine.nodes = 2 * 16385 - 1;
  fine.timesteps = 2000;
  const double a = fd_american_1d(mk, spec).value_at(0, 100.0);
  const double b = fd_american_1d(mk, spec, fine).value_at(0, 100.0);
  EXPECT_LT(std::abs(a - b) / b, 5e-4);
}

TEST(FiniteDifference, GridTooCoarse) {
  const Market1d mk{100.0, 0.05, 0.0, 0.2};
  FdGrid coarse;
  coarse.nodes = 17;
  coarse.timesteps = 50;
  try {
    fd_american_1d_checked(mk, put_spec(100, 1.0), coarse);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::GridTooCoarse);
  }
  FdGrid ok;
  ok.nodes = 4097;
  ok.timesteps = 400;
  EXPECT_NO_THROW(fd_american_1d_checked(mk, put_spec(100, 1.0), ok));
  FdGrid bad;
  bad.nodes = 2;
  EXPECT_THROW(fd_american_1d(mk, put_spec(100, 1.0), bad), ValidationError);
}

TEST(FiniteDifference, AssetDeltaFromReducedSolution) {
  const auto p = MarketParams::homogeneous(2, 0.0, 0.0, 0.25, 0.75, 100.0);
  const OptionSpec spec = geometric_call(100, 2.0, 10);
  FdGrid grid;
  grid.nodes = 8193;
  grid.timesteps = 500;
  const FdSolution sol = fd_american_1d(reduce_market(p), spec, grid);
  const std::vector<double> s{95.0, 120.0};
  const auto dv = fd_asset_delta(sol, 0, s);
  for (std::size_t i = 0; i < 2; ++i) {
    auto up = s, dn = s;
    up[i] += 0.05;
    dn[i] -= 0.05;
    const double fd =
        (sol.value_at(0, geometric_mean(up)) - sol.value_at(0, geometric_mean(dn))) / 0.1;
    EXPECT_NEAR(dv[i], fd, 2e-3) << i;
  }
}

TEST(FiniteDifference, TruthLabels) {
  const auto p = MarketParams::homogeneous(2, 0.0, 0.0, 0.25, 0.75, 100.0);
  const OptionSpec spec = geometric_call(100, 2.0, 10);
  FdGrid grid;
  grid.nodes = 4097;
  grid.timesteps = 500;
  const FdSolution sol = fd_american_1d(reduce_market(p), spec, grid);
  const PathSet paths = simulate_paths(p, spec, 100, 1);
  const auto labels = fd_truth_labels(paths, sol);
  ASSERT_EQ(labels.size(), 100u * 11u);
  for (std::size_t m = 0; m < 100; ++m) {
    EXPECT_EQ(labels[m * 11 + 10], payoff_f(spec, paths.state(m, 10)) > 0.0);
    for (std::size_t n = 0; n < 10; ++n) {
      const double g = geometric_mean(paths.state(m, n));
      EXPECT_EQ(labels[m * 11 + n], sol.exercise(n, g));
      if (labels[m * 11 + n]) EXPECT_GE(g, sol.boundary[n]);
    }
  }
  OptionSpec other = spec;
  other.steps = 5;
  EXPECT_THROW(fd_truth_labels(simulate_paths(p, other, 3, 1), sol), Error);
}

TEST(FiniteDifference, CsvRoundTrip) {
  const Market1d mk{100.0, 0.05, 0.0, 0.2};
  FdGrid grid;
  grid.nodes = 65;
  grid.timesteps = 20;
  grid.store_steps = 2;
  const FdSolution sol = fd_american_1d(mk, put_spec(100, 1.0, 2), grid);
  const auto file = std::filesystem::temp_directory_path() / "amgru_fd.csv";
  write_fd_csv(sol, file.string());
  std::ifstream is(file);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "t,s,value,delta");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    const std::size_t k = rows / 65, j = rows % 65;
    double t, s, v, d;
    char c;
    std::istringstream ss(line);
    ss >> t >> c >> s >> c >> v >> c >> d;
    EXPECT_EQ(t, sol.times[k]);
    EXPECT_EQ(s, sol.s[j]);
    EXPECT_EQ(v, sol.value[k][j]);
    EXPECT_EQ(d, sol.delta[k][j]);
    ++rows;
  }
  EXPECT_EQ(rows, 3u * 65u);
  std::filesystem::remove(file);
}

TEST(LongstaffSchwartz, DeterministicMarketStopsOptimally) {
  const auto p = MarketParams::homogeneous(1, 0.05, 0.0, 0.0, 0.0, 90.0);
  const OptionSpec spec = put_spec(100, 1.0, 20);
  const PathSet paths = simulate_paths(p, spec, 50, 1);
  double best = 0.0;
  for (std::size_t k = 0; k <= 20; ++k)
    best = std::max(best, std::exp(-0.05 * spec.dt() * static_cast<double>(k)) *
                              payoff_f(spec, paths.state(0, k)));
  const LsResult r = longstaff_schwartz(paths, spec, p);
  EXPECT_NEAR(r.price0, best, 1e-9);
  EXPECT_NEAR(r.price0_std, 0.0, 1e-12);

  // A rising call payoff is held to maturity.
  const auto q = MarketParams::homogeneous(1, 0.05, 0.0, 0.0, 0.0, 110.0);
  const OptionSpec call = geometric_call(100, 1.0, 20);
  const PathSet up = simulate_paths(q, call, 30, 1);
  const LsResult rc = longstaff_schwartz(up, call, q);
  EXPECT_NEAR(rc.price0, std::exp(-0.05) * payoff_f(call, up.state(0, 20)), 1e-9);
  for (std::size_t m = 0; m < 30; ++m) EXPECT_EQ(rc.tau[m], 20u);
}

TEST(LongstaffSchwartz, AmericanPutAgainstBinomial) {
  const auto p = MarketParams::homogeneous(1, 0.05, 0.0, 0.2, 0.0, 100.0);
  const OptionSpec spec = put_spec(100, 1.0, 50);
  const PathSet paths = simulate_paths(p, spec, 200000, 2);
  const LsResult r = longstaff_schwartz(paths, spec, p);
  const double tree = binomial_american(Market1d{100.0, 0.05, 0.0, 0.2}, spec, 10000);
  EXPECT_LT(r.price0, tree + 3 * r.price0_std);
  EXPECT_LT(std::abs(r.price0 - tree) / tree, 0.01) << r.price0 << " vs " << tree;
  EXPECT_LT(r.delta0[0], 0.0);
}

TEST(LongstaffSchwartz, RidgeFallbackAndSingular) {
  const Tensor rank_one(2, 2, {1.0, 1.0, 1.0, 1.0});
  const Tensor b = detail::least_squares(rank_one, Tensor(2, 1, {2.0, 2.0}));
  EXPECT_TRUE(b.all_finite());
  EXPECT_NEAR(b(0, 0) + b(1, 0), 2.0, 1e-6);
  try {
    detail::least_squares(Tensor(2, 2, {-1.0, 0.0, 0.0, -1.0}), Tensor(2, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SingularRegression);
  }
}

TEST(LongstaffSchwartz, MonomialCount) {
  EXPECT_EQ(detail::monomial_exponents(1, 4).size(), 5u);
  EXPECT_EQ(detail::monomial_exponents(2, 4).size(), 15u);
  EXPECT_EQ(detail::monomial_exponents(5, 2).size(), 21u);
  EXPECT_EQ(LsBasis(2, 4, 100.0).size(), 16u);
}
