#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "amgru/baselines.hpp"
#include "amgru/error.hpp"
#include "amgru/evaluation.hpp"
#include "amgru/market_model.hpp"
#include "amgru/rnn_nets.hpp"

namespace amgru {

enum class ProviderKind { RnnNets, FiniteDifference, LongstaffSchwartz, ClosedForm };

inline std::string to_string(ProviderKind k) {
  switch (k) {
    case ProviderKind::RnnNets: return "rnn";
    case ProviderKind::FiniteDifference: return "fd";
    case ProviderKind::LongstaffSchwartz: return "ls";
    case ProviderKind::ClosedForm: return "closed_form";
  }
  return "unknown";
}

inline ProviderKind provider_from_string(const std::string& s) {
  if (s == "rnn") return ProviderKind::RnnNets;
  if (s == "fd") return ProviderKind::FiniteDifference;
  if (s == "ls") return ProviderKind::LongstaffSchwartz;
  if (s == "closed_form") return ProviderKind::ClosedForm;
  throw ValidationError("hedge.provider", "unknown provider '" + s + "'");
}

/// Serves price, delta and exercise labels over a hedge PathSet whose step
/// count equals the rebalance count.
class HedgeProvider {
 public:
  virtual ~HedgeProvider() = default;
  virtual ProviderKind kind() const = 0;
  virtual Spacetime surface(const PathSet& paths, const OptionSpec& spec,
                            const MarketParams& params) const = 0;
};

namespace detail {

inline Spacetime empty_surface(const PathSet& paths) {
  Spacetime st;
  st.paths = paths.paths();
  st.steps = paths.steps();
  st.d = paths.dim();
  st.v = Tensor(st.paths, st.steps + 1);
  st.y = Tensor(st.paths, st.steps + 1);
  st.f = Tensor(st.paths, st.steps + 1);
  st.dv.assign(st.steps + 1, Tensor(st.paths, st.d));
  st.dy.assign(st.steps + 1, Tensor(st.paths, st.d));
  st.labels.assign(st.paths * (st.steps + 1), 0);
  return st;
}

/// Fills the surface from a rule on the geometric average G: value(n, G),
/// dV/dG(n, G) and the exercise label(n, G).
template <class ValueFn, class DeltaFn, class LabelFn>
Spacetime geometric_surface(const PathSet& paths, const OptionSpec& spec, ValueFn value,
                            DeltaFn delta, LabelFn label) {
  Spacetime st = empty_surface(paths);
  const double dd = static_cast<double>(st.d);
  std::vector<double> grad(st.d);
  for (std::size_t m = 0; m < st.paths; ++m)
    for (std::size_t n = 0; n <= st.steps; ++n) {
      const auto s = paths.state(m, n);
      const double g = geometric_mean(s);
      const double f = payoff_f(spec, s);
      st.f(m, n) = f;
      const bool ex = n == st.steps ? f > 0.0 : label(n, g);
      st.labels[m * (st.steps + 1) + n] = ex;
      if (n == st.steps || ex) {
        st.v(m, n) = st.y(m, n) = f;
        payoff_f_grad(spec, s, grad);
        for (std::size_t j = 0; j < st.d; ++j) st.dv[n](m, j) = st.dy[n](m, j) = grad[j];
      } else {
        const double v = value(n, g);
        st.v(m, n) = st.y(m, n) = v;
        const double dg = delta(n, g);
        for (std::size_t j = 0; j < st.d; ++j) st.dv[n](m, j) = st.dy[n](m, j) = dg * g / (dd * s[j]);
      }
    }
  return st;
}

}  // namespace detail

class RnnProvider final : public HedgeProvider {
 public:
  RnnProvider(NetworkState price_net, NetworkState delta_net, EvalOptions opt = {})
      : price_(std::move(price_net)), delta_(std::move(delta_net)), opt_(opt) {}

  ProviderKind kind() const override { return ProviderKind::RnnNets; }

  Spacetime surface(const PathSet& paths, const OptionSpec& spec,
                    const MarketParams& params) const override {
    return evaluate(paths, spec, params, price_, delta_, opt_).spacetime;
  }

 private:
  NetworkState price_, delta_;
  EvalOptions opt_;
};

/// Reduced 1-D FD solve re-run on the hedge grid; spots outside the grid
/// are clamped to its edge and counted.
class FdProvider final : public HedgeProvider {
 public:
  explicit FdProvider(FdGrid grid = {}) : grid_(grid) {}

  ProviderKind kind() const override { return ProviderKind::FiniteDifference; }
  std::size_t clamped() const { return clamped_; }

  Spacetime surface(const PathSet& paths, const OptionSpec& spec,
                    const MarketParams& params) const override {
    FdGrid g = grid_;
    g.store_steps = paths.steps();
    g.timesteps = (std::max(grid_.timesteps, g.store_steps) + g.store_steps - 1) /
                  g.store_steps * g.store_steps;
    const FdSolution sol = fd_american_1d(reduce_market(params), spec, g);
    clamped_ = 0;
    auto clamp = [&](double x) {
      if (sol.in_domain(x)) return x;
      ++clamped_;
      return std::clamp(x, sol.s.front(), sol.s.back());
    };
    Spacetime st = detail::geometric_surface(
        paths, spec, [&](std::size_t n, double x) { return sol.value_at(n, clamp(x)); },
        [&](std::size_t n, double x) { return sol.delta_at(n, clamp(x)); },
        [&](std::size_t n, double x) { return sol.exercise(n, clamp(x)); });
    if (clamped_ > 0)
      std::fprintf(stderr, "warning: fd provider clamped %zu queries outside [%g, %g]\n",
                   clamped_, sol.s.front(), sol.s.back());
    return st;
  }

 private:
  FdGrid grid_;
  mutable std::size_t clamped_ = 0;
};

/// European Black-Scholes on the geometric average; never exercises early.
class ClosedFormProvider final : public HedgeProvider {
 public:
  ProviderKind kind() const override { return ProviderKind::ClosedForm; }

  Spacetime surface(const PathSet& paths, const OptionSpec& spec,
                    const MarketParams& params) const override {
    const Market1d mk = reduce_market(params);
    const bool call = is_call(spec);
    const double dt = spec.maturity / static_cast<double>(paths.steps());
    auto tau = [&](std::size_t n) { return spec.maturity - dt * static_cast<double>(n); };
    if (mk.sigma == 0.0) {
      auto value = [&](std::size_t n, double g) {
        const double t = tau(n);
        return std::max(call ? g * std::exp(-mk.q * t) - spec.strike * std::exp(-mk.r * t)
                             : spec.strike * std::exp(-mk.r * t) - g * std::exp(-mk.q * t),
                        0.0);
      };
      auto delta = [&](std::size_t n, double g) {
        const double e = std::exp(-mk.q * tau(n));
        return value(n, g) > 0.0 ? (call ? e : -e) : 0.0;
      };
      return detail::geometric_surface(paths, spec, value, delta,
                                       [](std::size_t, double) { return false; });
    }
    return detail::geometric_surface(
        paths, spec,
        [&](std::size_t n, double g) {
          return bs_european(call, g, spec.strike, mk.r, mk.q, mk.sigma, tau(n)).price;
        },
        [&](std::size_t n, double g) {
          return bs_european(call, g, spec.strike, mk.r, mk.q, mk.sigma, tau(n)).delta;
        },
        [](std::size_t, double) { return false; });
  }
};

/// Longstaff-Schwartz regressions fitted on an independent PathSet that has
/// the hedge step count.
class LsProvider final : public HedgeProvider {
 public:
  LsProvider(std::size_t regression_paths, std::uint64_t seed, unsigned degree = 4)
      : paths_(regression_paths), seed_(seed), degree_(degree) {}

  ProviderKind kind() const override { return ProviderKind::LongstaffSchwartz; }

  Spacetime surface(const PathSet& paths, const OptionSpec& spec,
                    const MarketParams& params) const override {
    const PathSet fit = simulate_paths(params, spec, paths_, seed_);
    const LsResult ls = longstaff_schwartz(fit, spec, params, degree_);
    const LsBasis basis(paths.dim(), degree_, spec.strike);
    Spacetime st = detail::empty_surface(paths);
    const std::size_t big_n = st.steps, d = st.d;
    std::vector<double> phi(basis.size()), grad(d);
    for (std::size_t m = 0; m < st.paths; ++m)
      for (std::size_t n = 0; n <= big_n; ++n) {
        const auto s = paths.state(m, n);
        const double f = payoff_f(spec, s);
        st.f(m, n) = f;
        payoff_f_grad(spec, s, grad);
        bool ex = f > 0.0;
        double value = f;
        std::vector<double> delta(grad.begin(), grad.end());
        if (n == 0) {
          ex = ls.tau[0] == 0;
          value = ls.price0;
          delta = ls.delta0;
        } else if (n < big_n) {
          basis.eval(spec, s, phi);
          const Tensor& beta = ls.exercise_coef[n];
          if (ex && !beta.empty()) {
            double c = 0.0;
            for (std::size_t i = 0; i < phi.size(); ++i) c += beta(i, 0) * phi[i];
            ex = f >= c;
          } else {
            ex = false;
          }
          if (!ex) {
            const Tensor& w = ls.value_coef[n];
            value = 0.0;
            std::fill(delta.begin(), delta.end(), 0.0);
            for (std::size_t i = 0; i < phi.size(); ++i) {
              value += w(i, 0) * phi[i];
              for (std::size_t j = 0; j < d; ++j) delta[j] += w(i, 1 + j) * phi[i];
            }
          }
        }
        st.labels[m * (big_n + 1) + n] = ex;
        st.v(m, n) = st.y(m, n) = value;
        for (std::size_t j = 0; j < d; ++j) st.dv[n](m, j) = st.dy[n](m, j) = delta[j];
      }
    return st;
  }

 private:
  std::size_t paths_;
  std::uint64_t seed_;
  unsigned degree_;
};

// ---------------------------------------------------------------------------
// Backtest
// ---------------------------------------------------------------------------

struct HedgeResult {
  std::vector<double> pnl;  // e^{-rT} Pi_T / V0 per path
  double mean = 0.0;
  double std = 0.0;
  double v0 = 0.0;
  std::size_t intervals = 0;
  std::size_t exercised = 0;  // paths closed before maturity
  double max_self_financing_residual = 0.0;
  ProviderKind provider = ProviderKind::RnnNets;
};

/// Self-financing delta hedge of a short option: the option premium V0 buys
/// delta units of stock, the remainder sits in cash at r, dividends are
/// credited to cash, and the option is settled at the first exercise label
/// or at maturity.
inline HedgeResult hedge(const HedgeProvider& provider, const PathSet& paths,
                         const OptionSpec& spec, const MarketParams& params) {
  require(paths.steps() == spec.steps, ErrorKind::SpecMismatch,
          "hedge: PathSet steps must equal the rebalance count");
  require(paths.paths() >= 2, ErrorKind::Validation, "hedge: need at least two paths");
  const Spacetime st = provider.surface(paths, spec, params);
  const std::size_t mm = paths.paths(), big_n = paths.steps(), d = paths.dim();
  const double dt = spec.dt();
  const double growth = std::exp(params.r * dt);
  HedgeResult res;
  res.provider = provider.kind();
  res.intervals = big_n;
  res.pnl.resize(mm);
  for (std::size_t m = 0; m < mm; ++m) res.v0 += st.v(m, 0);
  res.v0 /= static_cast<double>(mm);
  if (!(res.v0 > 0.0)) throw Error(ErrorKind::Validation, "hedge: provider V0 must be > 0");

  std::vector<double> delta(d);
  for (std::size_t m = 0; m < mm; ++m) {
    const auto s0 = paths.state(m, 0);
    double stock = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      delta[j] = st.dv[0](m, j);
      stock += delta[j] * s0[j];
    }
    double cash = res.v0 - stock;
    double pi = 0.0;
    std::size_t closed_at = big_n;
    bool closed = st.label(m, 0) && big_n > 0;
    if (closed) {
      pi = res.v0 - st.f(m, 0);
      closed_at = 0;
    }
    for (std::size_t n = 0; n < big_n && !closed; ++n) {
      const auto sn = paths.state(m, n);
      const auto sn1 = paths.state(m, n + 1);
      double dividends = 0.0, before = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dividends += delta[j] * sn[j] * params.dividends[j] * dt;
        before += delta[j] * sn1[j];
      }
      const double prev_total = cash + stock;
      cash = cash * growth + dividends;
      const double total = cash + before;
      double gain = 0.0;
      for (std::size_t j = 0; j < d; ++j) gain += delta[j] * (sn1[j] - sn[j]);
      const double expected = prev_total + gain + (growth - 1.0) * (prev_total - stock) + dividends;
      res.max_self_financing_residual = std::max(
          res.max_self_financing_residual, std::abs(total - expected) / std::max(1.0, res.v0));
      if (n + 1 == big_n || st.label(m, n + 1)) {
        pi = total - st.f(m, n + 1);
        closed = true;
        closed_at = n + 1;
        break;
      }
      stock = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        delta[j] = st.dv[n + 1](m, j);
        stock += delta[j] * sn1[j];
      }
      cash = total - stock;
    }
    if (big_n == 0) pi = res.v0 - st.f(m, 0);
    if (closed_at < big_n) ++res.exercised;
    pi *= std::pow(growth, static_cast<double>(big_n - closed_at));
    res.pnl[m] = std::exp(-params.r * spec.maturity) * pi / res.v0;
  }
  double s1 = 0.0, s2 = 0.0;
  for (double x : res.pnl) s1 += x, s2 += x * x;
  const double md = static_cast<double>(mm);
  res.mean = s1 / md;
  res.std = std::sqrt(std::max(0.0, (s2 - md * res.mean * res.mean) / (md - 1.0)));
  return res;
}

/// Hedge on freshly simulated paths with `intervals` rebalances.
inline HedgeResult hedge(const HedgeProvider& provider, const OptionSpec& spec,
                         const MarketParams& params, std::size_t intervals, std::size_t paths,
                         std::uint64_t seed, unsigned threads = 1) {
  require(intervals >= 1, ErrorKind::Validation, "hedge: intervals must be >= 1");
  OptionSpec hs = spec;
  hs.steps = intervals;
  const PathSet p = simulate_paths(params, hs, paths, seed, threads);
  return hedge(provider, p, hs, params);
}

inline void write_histogram_csv(std::span<const double> x, std::size_t bins,
                                const std::string& file) {
  require(!x.empty() && bins >= 1, ErrorKind::Validation, "histogram: empty input");
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  const double lo = *lo_it, hi = *hi_it > *lo_it ? *hi_it : *lo_it + 1e-12;
  const double w = (hi - lo) / static_cast<double>(bins);
  std::vector<std::size_t> count(bins, 0);
  for (double v : x)
    ++count[std::min(static_cast<std::size_t>((v - lo) / w), bins - 1)];
  std::ofstream os(file);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file);
  os.precision(17);
  os << "bin_left,bin_right,count\n";
  for (std::size_t b = 0; b < bins; ++b)
    os << lo + w * static_cast<double>(b) << ',' << lo + w * static_cast<double>(b + 1) << ','
       << count[b] << '\n';
}

inline nlohmann::json summary_json(const HedgeResult& r) {
  return {{"mean", r.mean},
          {"std", r.std},
          {"intervals", r.intervals},
          {"provider", to_string(r.provider)},
          {"v0", r.v0},
          {"paths", r.pnl.size()},
          {"exercised_early", r.exercised},
          {"max_self_financing_residual", r.max_self_financing_residual}};
}

}  // namespace amgru
