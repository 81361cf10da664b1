#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace amgru;
using amgru::testing::geometric_call;

namespace {

/// Fixed value and delta everywhere, exercising at one chosen step.
class ScriptedProvider final : public HedgeProvider {
 public:
  ScriptedProvider(double value, double delta, std::size_t exercise_at)
      : value_(value), delta_(delta), at_(exercise_at) {}
  ProviderKind kind() const override { return ProviderKind::ClosedForm; }
  Spacetime surface(const PathSet& paths, const OptionSpec& spec,
                    const MarketParams&) const override {
    Spacetime st = detail::empty_surface(paths);
    for (std::size_t m = 0; m < st.paths; ++m)
      for (std::size_t n = 0; n <= st.steps; ++n) {
        st.f(m, n) = payoff_f(spec, paths.state(m, n));
        st.v(m, n) = st.y(m, n) = value_;
        for (std::size_t j = 0; j < st.d; ++j) st.dv[n](m, j) = delta_;
        st.labels[m * (st.steps + 1) + n] = n == at_;
      }
    return st;
  }

 private:
  double value_, delta_;
  std::size_t at_;
};

}  // namespace

TEST(Hedge, ZeroVolatilityReplicationIsExact) {
  const auto p = MarketParams::homogeneous(1, 0.0, 0.0, 0.0, 0.0, 120.0);
  const OptionSpec spec = geometric_call(100, 1.0, 25);
  const HedgeResult r = hedge(ClosedFormProvider{}, spec, p, 25, 20, 1);
  EXPECT_NEAR(r.v0, 20.0, 1e-12);
  for (double x : r.pnl) EXPECT_NEAR(x, 0.0, 1e-14);
  EXPECT_EQ(r.exercised, 0u);
}

TEST(Hedge, ClosedFormEuropeanErrorShrinksWithRebalancing) {
  const auto p = MarketParams::homogeneous(1, 0.05, 0.0, 0.2, 0.0, 100.0);
  const OptionSpec spec = geometric_call(100, 1.0, 50);
  std::vector<double> stds;
  for (std::size_t n : {50u, 100u, 200u, 400u}) {
    const HedgeResult r = hedge(ClosedFormProvider{}, spec, p, n, 20000, 7);
    EXPECT_EQ(r.intervals, n);
    EXPECT_LT(std::abs(r.mean), 3.0 * r.std / std::sqrt(20000.0) + 0.01) << n;
    if (!stds.empty()) EXPECT_LT(r.std, stds.back()) << n;
    stds.push_back(r.std);
  }
  const double ratio = stds[1] / stds[3];
  EXPECT_GE(ratio, 1.7);
  EXPECT_LE(ratio, 2.3);
}

TEST(Hedge, SelfFinancingResidual) {
  const auto p = MarketParams::homogeneous(2, 0.03, 0.02, 0.3, 0.4, 100.0);
  const OptionSpec spec = geometric_call(100, 1.0, 40);
  const HedgeResult r = hedge(ClosedFormProvider{}, spec, p, 40, 2000, 3);
  EXPECT_LT(r.max_self_financing_residual, 1e-12);
  for (double x : r.pnl) EXPECT_TRUE(std::isfinite(x));
}

TEST(Hedge, EarlyExerciseAccruesCashOnly) {
  const auto p = MarketParams::homogeneous(1, 0.04, 0.0, 0.3, 0.0, 100.0);
  const OptionSpec spec = geometric_call(90, 1.0, 10);
  const PathSet paths = simulate_paths(p, spec, 500, 5);
  const HedgeResult r = hedge(ScriptedProvider(12.0, 0.0, 3), paths, spec, p);
  EXPECT_EQ(r.v0, 12.0);
  EXPECT_EQ(r.exercised, 500u);
  const double g = std::exp(0.04 * spec.dt());
  for (std::size_t m = 0; m < 500; ++m) {
    const double f3 = payoff_f(spec, paths.state(m, 3));
    EXPECT_NEAR(r.pnl[m], 1.0 - f3 / (12.0 * g * g * g), 1e-13);
  }
}

TEST(Hedge, ExerciseAtInceptionClosesImmediately) {
  const auto p = MarketParams::homogeneous(1, 0.04, 0.0, 0.3, 0.0, 130.0);
  const OptionSpec spec = geometric_call(100, 1.0, 10);
  const HedgeResult r = hedge(ScriptedProvider(30.0, 0.7, 0), spec, p, 10, 10, 2);
  for (double x : r.pnl) EXPECT_NEAR(x, 0.0, 1e-14);
  EXPECT_EQ(r.exercised, 10u);
}

TEST(Hedge, FdProviderClampsOutOfDomain) {
  const auto p = MarketParams::homogeneous(1, 0.05, 0.0, 0.4, 0.0, 100.0);
  const OptionSpec spec = geometric_call(100, 1.0, 20);
  FdGrid grid;
  grid.s_min = 80.0;
  grid.s_max = 125.0;
  grid.nodes = 257;
  grid.timesteps = 200;
  const FdProvider fd(grid);
  const HedgeResult r = hedge(fd, spec, p, 20, 300, 4);
  EXPECT_GT(fd.clamped(), 0u);
  for (double x : r.pnl) EXPECT_TRUE(std::isfinite(x));
  EXPECT_EQ(r.provider, ProviderKind::FiniteDifference);
}

TEST(Hedge, FdAndClosedFormAgreeWithoutEarlyExercise) {
  const auto p = MarketParams::homogeneous(1, 0.05, 0.0, 0.2, 0.0, 100.0);
  const OptionSpec spec = geometric_call(100, 1.0, 50);
  FdGrid grid;
  grid.nodes = 4097;
  grid.timesteps = 500;
  const HedgeResult a = hedge(FdProvider(grid), spec, p, 50, 2000, 9);
  const HedgeResult b = hedge(ClosedFormProvider{}, spec, p, 50, 2000, 9);
  EXPECT_NEAR(a.v0, b.v0, 5e-3);
  EXPECT_NEAR(a.mean, b.mean, 2e-3);
  EXPECT_NEAR(a.std, b.std, 5e-3);
}

TEST(Hedge, LsProviderRuns) {
  const auto p = MarketParams::homogeneous(2, 0.05, 0.1, 0.2, 0.3, 100.0);
  const OptionSpec spec = amgru::testing::with_kind(geometric_call(100, 1.0, 20), PayoffKind::MaxCall);
  const HedgeResult r = hedge(LsProvider(20000, 11), spec, p, 20, 2000, 12);
  EXPECT_GT(r.v0, 0.0);
  EXPECT_TRUE(std::isfinite(r.mean));
  EXPECT_LT(std::abs(r.mean), 0.2);
  EXPECT_GT(r.exercised, 0u);
}

TEST(Hedge, Validation) {
  const auto p = MarketParams::homogeneous(1, 0.05, 0.0, 0.2, 0.0, 100.0);
  const OptionSpec spec = geometric_call(100, 1.0, 10);
  const PathSet paths = simulate_paths(p, spec, 10, 1);
  OptionSpec other = spec;
  other.steps = 5;
  try {
    hedge(ClosedFormProvider{}, paths, other, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SpecMismatch);
  }
  EXPECT_THROW(hedge(ClosedFormProvider{}, spec, p, 0, 10, 1), Error);
  EXPECT_THROW(provider_from_string("delta"), ValidationError);
  for (auto k : {ProviderKind::RnnNets, ProviderKind::FiniteDifference,
                 ProviderKind::LongstaffSchwartz, ProviderKind::ClosedForm})
    EXPECT_EQ(provider_from_string(to_string(k)), k);
}

TEST(Hedge, HistogramAndSummary) {
  const auto p = MarketParams::homogeneous(1, 0.05, 0.0, 0.2, 0.0, 100.0);
  const HedgeResult r = hedge(ClosedFormProvider{}, geometric_call(100, 1.0, 10), p, 10, 777, 2);
  const auto file = std::filesystem::temp_directory_path() / "amgru_hist.csv";
  write_histogram_csv(r.pnl, 30, file.string());
  std::ifstream is(file);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "bin_left,bin_right,count");
  std::size_t total = 0, rows = 0;
  while (std::getline(is, line)) {
    total += std::stoul(line.substr(line.rfind(',') + 1));
    ++rows;
  }
  EXPECT_EQ(rows, 30u);
  EXPECT_EQ(total, 777u);
  std::filesystem::remove(file);

  const auto j = summary_json(r);
  EXPECT_EQ(j.at("intervals").get<std::size_t>(), 10u);
  EXPECT_EQ(j.at("provider").get<std::string>(), "closed_form");
  EXPECT_EQ(j.at("mean").get<double>(), r.mean);
  EXPECT_EQ(j.at("paths").get<std::size_t>(), 777u);
}
