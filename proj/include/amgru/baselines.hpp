#pragma once

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "amgru/error.hpp"
#include "amgru/market_model.hpp"
#include "amgru/tensor.hpp"

namespace amgru {

/// One-asset market: spot, rate, continuous dividend yield and volatility.
struct Market1d {
  double s0 = 100.0;
  double r = 0.0;
  double q = 0.0;
  double sigma = 0.2;
};

/// The geometric average of a homogeneous market as a single asset.
inline Market1d reduce_market(const MarketParams& p) {
  const OneDimParams e = equivalent_1d_params(p);
  return {geometric_mean(p.s0), p.r, p.r - e.mu, e.sigma};
}

inline bool is_call(const OptionSpec& spec) {
  require(spec.payoff_kind != PayoffKind::MaxCall, ErrorKind::Validation,
          "1-D baselines need a geometric-average payoff");
  return spec.payoff_kind == PayoffKind::GeometricAverageCall;
}

inline double payoff_1d(bool call, double strike, double s) {
  return std::max(call ? s - strike : strike - s, 0.0);
}

// ---------------------------------------------------------------------------
// Closed form
// ---------------------------------------------------------------------------

struct PriceDelta {
  double price = 0.0;
  double delta = 0.0;
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline PriceDelta bs_european(bool call, double s0, double strike, double r, double q,
                              double sigma, double t) {
  require(sigma > 0.0 && t > 0.0, ErrorKind::Validation, "bs_european: sigma and T must be > 0");
  const double sq = sigma * std::sqrt(t);
  const double d1 = (std::log(s0 / strike) + (r - q + 0.5 * sigma * sigma) * t) / sq;
  const double d2 = d1 - sq;
  const double dq = std::exp(-q * t), dr = std::exp(-r * t);
  if (call) return {s0 * dq * normal_cdf(d1) - strike * dr * normal_cdf(d2), dq * normal_cdf(d1)};
  return {strike * dr * normal_cdf(-d2) - s0 * dq * normal_cdf(-d1), -dq * normal_cdf(-d1)};
}

inline PriceDelta bs_european_call(double s0, double strike, double r, double q, double sigma,
                                   double t) {
  return bs_european(true, s0, strike, r, q, sigma, t);
}

// ---------------------------------------------------------------------------
// CRR binomial tree
// ---------------------------------------------------------------------------

inline double binomial_american(const Market1d& mk, const OptionSpec& spec, std::size_t steps,
                                bool american = true) {
  require(steps >= 1, ErrorKind::Validation, "binomial_american: steps must be >= 1");
  const bool call = is_call(spec);
  const double dt = spec.maturity / static_cast<double>(steps);
  const double disc = std::exp(-mk.r * dt);
  if (mk.sigma == 0.0) {
    const double growth = std::exp((mk.r - mk.q) * dt);
    double best = 0.0, s = mk.s0, df = 1.0;
    for (std::size_t k = 0; k <= steps; ++k) {
      const double v = df * payoff_1d(call, spec.strike, s);
      if (american || k == steps) best = american ? std::max(best, v) : v;
      s *= growth;
      df *= disc;
    }
    return best;
  }
  const double u = std::exp(mk.sigma * std::sqrt(dt)), dn = 1.0 / u;
  const double p = (std::exp((mk.r - mk.q) * dt) - dn) / (u - dn);
  require(p > 0.0 && p < 1.0, ErrorKind::Validation,
          "binomial_american: risk-neutral probability outside (0, 1)");
  std::vector<double> v(steps + 1);
  for (std::size_t j = 0; j <= steps; ++j) {
    const double s = mk.s0 * std::pow(u, static_cast<double>(2 * j) - static_cast<double>(steps));
    v[j] = payoff_1d(call, spec.strike, s);
  }
  for (std::size_t k = steps; k-- > 0;) {
    for (std::size_t j = 0; j <= k; ++j) {
      v[j] = disc * (p * v[j + 1] + (1.0 - p) * v[j]);
      if (american) {
        const double s = mk.s0 * std::pow(u, static_cast<double>(2 * j) - static_cast<double>(k));
        v[j] = std::max(v[j], payoff_1d(call, spec.strike, s));
      }
    }
  }
  return v[0];
}

// ---------------------------------------------------------------------------
// Crank-Nicolson finite differences
// ---------------------------------------------------------------------------

struct FdGrid {
  double s_min = 0.0;
  double s_max = 0.0;  // 0 selects 5 K e^{(mu + 3 sigma) T}
  std::size_t nodes = 16385;
  std::size_t timesteps = 1000;
  double theta = 0.5;
  double penalty = 0.0;  // 0 selects 1e7 K
  bool rannacher = true;
  bool american = true;
  std::size_t store_steps = 0;  // stored time levels; 0 selects spec.steps
};

struct FdSolution {
  std::vector<double> s;
  std::vector<double> times;                 // t_k = k T / store_steps
  std::vector<std::vector<double>> value;    // [k][j]
  std::vector<std::vector<double>> delta;    // [k][j]
  std::vector<double> boundary;              // exercise boundary per stored time, NaN if none
  bool call = true;
  double strike = 0.0;

  std::size_t levels() const { return times.size(); }
  bool in_domain(double x) const { return x >= s.front() && x <= s.back(); }

  double value_at(std::size_t k, double x) const { return interp(value[k], x); }
  double delta_at(std::size_t k, double x) const { return interp(delta[k], x); }

  /// Truth label: the spot lies in the exercise region at stored time k.
  bool exercise(std::size_t k, double x) const {
    if (payoff_1d(call, strike, x) <= 0.0) return false;
    if (k + 1 == levels()) return true;
    const double b = boundary[k];
    if (std::isnan(b)) return false;
    return call ? x >= b : x <= b;
  }

 private:
  double interp(const std::vector<double>& y, double x) const {
    const double h = s[1] - s[0];
    const double pos = std::clamp((x - s.front()) / h, 0.0, static_cast<double>(s.size() - 1));
    const auto j = std::min(static_cast<std::size_t>(pos), s.size() - 2);
    const double w = pos - static_cast<double>(j);
    return (1.0 - w) * y[j] + w * y[j + 1];
  }
};

namespace detail {

// Solves a tridiagonal system in place; sub, diag, sup and rhs have equal length.
inline void thomas(std::span<const double> sub, std::span<const double> diag,
                   std::span<const double> sup, std::span<double> rhs,
                   std::vector<double>& scratch) {
  const std::size_t n = diag.size();
  scratch.resize(n);
  double beta = diag[0];
  rhs[0] /= beta;
  for (std::size_t i = 1; i < n; ++i) {
    scratch[i] = sup[i - 1] / beta;
    beta = diag[i] - sub[i] * scratch[i];
    rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / beta;
  }
  for (std::size_t i = n - 1; i-- > 0;) rhs[i] -= scratch[i + 1] * rhs[i + 1];
}

}  // namespace detail

inline FdSolution fd_american_1d(const Market1d& mk, const OptionSpec& spec, FdGrid grid = {}) {
  const bool call = is_call(spec);
  const double k_strike = spec.strike, t_mat = spec.maturity;
  const double mu = mk.r - mk.q;
  if (grid.s_max == 0.0) grid.s_max = 5.0 * k_strike * std::exp((mu + 3.0 * mk.sigma) * t_mat);
  if (grid.penalty == 0.0) grid.penalty = 1e7 * k_strike;
  if (grid.store_steps == 0) grid.store_steps = spec.steps;
  if (grid.nodes < 3) throw ValidationError("fd.nodes", "must be >= 3");
  if (!(grid.s_min < k_strike && k_strike < grid.s_max))
    throw ValidationError("fd.s_max", "need s_min < K < s_max");
  if (grid.timesteps % grid.store_steps != 0)
    throw ValidationError("fd.timesteps", "must be a multiple of the stored time levels");

  const std::size_t nj = grid.nodes;
  const double h = (grid.s_max - grid.s_min) / static_cast<double>(nj - 1);
  FdSolution sol;
  sol.call = call;
  sol.strike = k_strike;
  sol.s.resize(nj);
  for (std::size_t j = 0; j < nj; ++j) sol.s[j] = grid.s_min + h * static_cast<double>(j);
  std::vector<double> pay(nj);
  for (std::size_t j = 0; j < nj; ++j) pay[j] = payoff_1d(call, k_strike, sol.s[j]);

  // L V_j = a_j V_{j-1} + b_j V_j + c_j V_{j+1}
  std::vector<double> a(nj, 0.0), b(nj, 0.0), c(nj, 0.0);
  for (std::size_t j = 1; j + 1 < nj; ++j) {
    const double x = sol.s[j];
    const double diff = 0.5 * mk.sigma * mk.sigma * x * x / (h * h);
    const double conv = 0.5 * mu * x / h;
    a[j] = diff - conv;
    b[j] = -2.0 * diff - mk.r;
    c[j] = diff + conv;
  }

  auto boundary_values = [&](double tau) {
    double lo, hi;
    const double smax = sol.s.back(), smin = sol.s.front();
    if (call) {
      lo = payoff_1d(true, k_strike, smin);
      hi = smax * std::exp(-mk.q * tau) - k_strike * std::exp(-mk.r * tau);
      if (grid.american) hi = std::max(hi, smax - k_strike);
    } else {
      lo = k_strike * std::exp(-mk.r * tau) - smin * std::exp(-mk.q * tau);
      if (grid.american) lo = std::max(lo, k_strike - smin);
      hi = 0.0;
    }
    return std::pair{lo, hi};
  };

  std::vector<double> v = pay, rhs(nj), sub(nj), diag(nj), sup(nj), trial(nj), scratch;
  std::vector<char> active(nj, 0), prev_active(nj, 0);

  auto step = [&](double dtau, double theta, double tau_new) {
    for (std::size_t j = 1; j + 1 < nj; ++j) {
      const double w = (1.0 - theta) * dtau;
      rhs[j] = v[j] + w * (a[j] * v[j - 1] + b[j] * v[j] + c[j] * v[j + 1]);
    }
    const auto [lo, hi] = boundary_values(tau_new);
    std::fill(active.begin(), active.end(), 0);
    if (grid.american)
      for (std::size_t j = 1; j + 1 < nj; ++j) active[j] = v[j] < pay[j];
    auto solve = [&] {
      sub[0] = 0.0, diag[0] = 1.0, sup[0] = 0.0, trial[0] = lo;
      sub[nj - 1] = 0.0, diag[nj - 1] = 1.0, sup[nj - 1] = 0.0, trial[nj - 1] = hi;
      for (std::size_t j = 1; j + 1 < nj; ++j) {
        const double w = theta * dtau;
        sub[j] = -w * a[j];
        diag[j] = 1.0 - w * b[j];
        sup[j] = -w * c[j];
        trial[j] = rhs[j];
        if (active[j]) {
          diag[j] += grid.penalty;
          trial[j] += grid.penalty * pay[j];
        }
      }
      detail::thomas(sub, diag, sup, trial, scratch);
    };
    constexpr int max_iter = 100;
    for (int iter = 0;; ++iter) {
      solve();
      if (!grid.american) break;
      prev_active = active;
      bool changed = false;
      for (std::size_t j = 1; j + 1 < nj; ++j) {
        active[j] = trial[j] < pay[j];
        changed = changed || active[j] != prev_active[j];
      }
      if (!changed) break;
      if (iter + 1 == max_iter) {
        // The active set can cycle at the free boundary; pin the union.
        for (std::size_t j = 1; j + 1 < nj; ++j) active[j] = active[j] || prev_active[j];
        solve();
        break;
      }
    }
    v.swap(trial);
  };

  auto store = [&](std::size_t k) {
    sol.value[k] = v;
    auto& dl = sol.delta[k];
    dl.resize(nj);
    dl[0] = (v[1] - v[0]) / h;
    dl[nj - 1] = (v[nj - 1] - v[nj - 2]) / h;
    for (std::size_t j = 1; j + 1 < nj; ++j) dl[j] = (v[j + 1] - v[j - 1]) / (2.0 * h);
    double bnd = std::numeric_limits<double>::quiet_NaN();
    if (grid.american) {
      const double tol = 1e-6 * k_strike;
      if (call) {
        for (std::size_t j = nj; j-- > 0;) {
          if (pay[j] > 0.0 && v[j] - pay[j] <= tol) bnd = sol.s[j];
          else if (!std::isnan(bnd)) break;
        }
      } else {
        for (std::size_t j = 0; j < nj; ++j) {
          if (pay[j] > 0.0 && v[j] - pay[j] <= tol) bnd = sol.s[j];
          else if (!std::isnan(bnd)) break;
        }
      }
    }
    sol.boundary[k] = bnd;
  };

  const std::size_t levels = grid.store_steps + 1;
  sol.times.resize(levels);
  sol.value.resize(levels);
  sol.delta.resize(levels);
  sol.boundary.resize(levels);
  for (std::size_t k = 0; k < levels; ++k)
    sol.times[k] = t_mat * static_cast<double>(k) / static_cast<double>(grid.store_steps);
  store(levels - 1);

  const double dtau = t_mat / static_cast<double>(grid.timesteps);
  const std::size_t per_level = grid.timesteps / grid.store_steps;
  for (std::size_t i = 0; i < grid.timesteps; ++i) {
    const double tau_new = dtau * static_cast<double>(i + 1);
    if (i == 0 && grid.rannacher) {
      step(0.5 * dtau, 1.0, 0.5 * dtau);
      step(0.5 * dtau, 1.0, tau_new);
    } else {
      step(dtau, grid.theta, tau_new);
    }
    if ((i + 1) % per_level == 0) store(levels - 1 - (i + 1) / per_level);
  }
  return sol;
}

/// Solves twice, the second time with doubled node count, and throws
/// GridTooCoarse when the t = 0 price at s0 moves by more than 0.1%.
inline FdSolution fd_american_1d_checked(const Market1d& mk, const OptionSpec& spec,
                                         FdGrid grid = {}) {
  FdSolution coarse = fd_american_1d(mk, spec, grid);
  FdGrid fine = grid;
  fine.nodes = 2 * grid.nodes - 1;
  const FdSolution refined = fd_american_1d(mk, spec, fine);
  const double a = coarse.value_at(0, mk.s0), b = refined.value_at(0, mk.s0);
  if (std::abs(a - b) > 1e-3 * std::max(std::abs(b), 1e-12))
    throw Error(ErrorKind::GridTooCoarse, "fd: t=0 price changes from " + std::to_string(a) +
                                              " to " + std::to_string(b) +
                                              " when the node count doubles");
  return coarse;
}

/// FD exercise labels for every (m, n) of a PathSet on the geometric average,
/// indexed m * (N + 1) + n; the solution must store one level per step.
inline std::vector<std::uint8_t> fd_truth_labels(const PathSet& paths, const FdSolution& sol) {
  const std::size_t big_n = paths.steps();
  require(sol.levels() == big_n + 1, ErrorKind::SpecMismatch,
          "fd_truth_labels: stored levels do not match the path grid");
  std::vector<std::uint8_t> out(paths.paths() * (big_n + 1));
  for (std::size_t m = 0; m < paths.paths(); ++m)
    for (std::size_t n = 0; n <= big_n; ++n)
      out[m * (big_n + 1) + n] = sol.exercise(n, geometric_mean(paths.state(m, n)));
  return out;
}

/// Per-asset delta at spot vector s from the reduced solution at level k.
inline std::vector<double> fd_asset_delta(const FdSolution& sol, std::size_t k,
                                          std::span<const double> s) {
  const double g = geometric_mean(s);
  const double dg = sol.delta_at(k, g);
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    out[i] = dg * g / (static_cast<double>(s.size()) * s[i]);
  return out;
}

inline void write_fd_csv(const FdSolution& sol, const std::string& file) {
  std::ofstream os(file);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file);
  os.precision(17);
  os << "t,s,value,delta\n";
  for (std::size_t k = 0; k < sol.levels(); ++k)
    for (std::size_t j = 0; j < sol.s.size(); ++j)
      os << sol.times[k] << ',' << sol.s[j] << ',' << sol.value[k][j] << ',' << sol.delta[k][j]
         << '\n';
}

// ---------------------------------------------------------------------------
// Longstaff-Schwartz
// ---------------------------------------------------------------------------

namespace detail {

/// Exponent tuples of all monomials in d variables with total degree <= deg.
inline std::vector<std::vector<unsigned>> monomial_exponents(std::size_t d, unsigned deg) {
  std::vector<std::vector<unsigned>> out;
  std::vector<unsigned> e(d, 0);
  auto rec = [&](auto&& self, std::size_t i, unsigned left) -> void {
    if (i == d) {
      out.push_back(e);
      return;
    }
    for (unsigned p = 0; p <= left; ++p) {
      e[i] = p;
      self(self, i + 1, left - p);
    }
    e[i] = 0;
  };
  rec(rec, 0, deg);
  return out;
}

/// Solves (X^T X) b = X^T Y for every column of rhs; falls back to a ridge
/// term when the normal matrix is not positive definite.
inline Tensor least_squares(const Tensor& xtx, const Tensor& xty) {
  const std::size_t p = xtx.rows();
  Tensor l;
  try {
    l = cholesky(xtx);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NotPositiveDefinite) throw;
    Tensor reg = xtx;
    double tr = 0.0;
    for (std::size_t i = 0; i < p; ++i) tr += xtx(i, i);
    const double lambda = 1e-8 * std::max(tr / static_cast<double>(p), 1.0);
    for (std::size_t i = 0; i < p; ++i) reg(i, i) += lambda;
    try {
      l = cholesky(reg);
    } catch (const Error&) {
      throw Error(ErrorKind::SingularRegression, "longstaff_schwartz: regression is singular");
    }
  }
  Tensor b = xty;
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t i = 0; i < p; ++i) {
      double s = b(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * b(k, c);
      b(i, c) = s / l(i, i);
    }
    for (std::size_t i = p; i-- > 0;) {
      double s = b(i, c);
      for (std::size_t k = i + 1; k < p; ++k) s -= l(k, i) * b(k, c);
      b(i, c) = s / l(i, i);
    }
  }
  return b;
}

}  // namespace detail

/// Polynomial basis in S / K plus the payoff g / K.
class LsBasis {
 public:
  LsBasis(std::size_t d, unsigned degree, double strike)
      : exps_(detail::monomial_exponents(d, degree)), d_(d), strike_(strike) {}

  std::size_t size() const { return exps_.size() + 1; }

  void eval(const OptionSpec& spec, std::span<const double> s, std::span<double> out) const {
    for (std::size_t b = 0; b < exps_.size(); ++b) {
      double v = 1.0;
      for (std::size_t i = 0; i < d_; ++i)
        for (unsigned p = 0; p < exps_[b][i]; ++p) v *= s[i] / strike_;
      out[b] = v;
    }
    out[exps_.size()] = payoff_g(spec, s) / strike_;
  }

 private:
  std::vector<std::vector<unsigned>> exps_;
  std::size_t d_;
  double strike_;
};

struct LsResult {
  double price0 = 0.0;
  double price0_std = 0.0;
  std::vector<double> delta0;
  std::vector<double> delta0_std;
  std::vector<std::size_t> tau;  // stopping index per path
  // Per-step regression coefficients: exercise rule on in-the-money paths, and
  // value / delta fits over all paths used by the hedging provider.
  std::vector<Tensor> exercise_coef;  // [n] p x 1, empty when nothing is in the money
  std::vector<Tensor> value_coef;     // [n] p x (1 + d)
};

inline LsResult longstaff_schwartz(const PathSet& paths, const OptionSpec& spec,
                                   const MarketParams& params, unsigned degree = 4) {
  const std::size_t mm = paths.paths(), big_n = paths.steps(), d = paths.dim();
  require(big_n == spec.steps, ErrorKind::SpecMismatch, "longstaff_schwartz: step count");
  require(mm >= 2, ErrorKind::Validation, "longstaff_schwartz: need at least two paths");
  const double dt = spec.dt();
  const LsBasis basis(d, degree, spec.strike);
  const std::size_t p = basis.size();

  LsResult res;
  res.tau.assign(mm, big_n);
  res.exercise_coef.resize(big_n + 1);
  res.value_coef.resize(big_n + 1);

  std::vector<double> phi(p), grad(d);
  // Discounted-to-n cash flow and pathwise delta at the current stopping time.
  auto cash = [&](std::size_t m, std::size_t n) {
    const std::size_t k = res.tau[m];
    return std::exp(-params.r * static_cast<double>(k - n) * dt) *
           payoff_f(spec, paths.state(m, k));
  };
  auto pathwise = [&](std::size_t m, std::size_t n, std::span<double> out) {
    const std::size_t k = res.tau[m];
    const auto sk = paths.state(m, k);
    const auto sn = paths.state(m, n);
    payoff_f_grad(spec, sk, grad);
    const double disc = std::exp(-params.r * static_cast<double>(k - n) * dt);
    for (std::size_t j = 0; j < d; ++j) out[j] = disc * grad[j] * sk[j] / sn[j];
  };

  std::vector<double> z(d);
  for (std::size_t n = big_n; n-- > 1;) {
    Tensor xtx(p, p), xty(p, 1), atx(p, p), aty(p, 1 + d);
    std::size_t itm = 0;
    for (std::size_t m = 0; m < mm; ++m) {
      const auto s = paths.state(m, n);
      basis.eval(spec, s, phi);
      const double y = cash(m, n);
      pathwise(m, n, z);
      const bool in_money = payoff_f(spec, s) > 0.0;
      itm += in_money;
      for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k <= i; ++k) {
          const double w = phi[i] * phi[k];
          atx(i, k) += w;
          if (in_money) xtx(i, k) += w;
        }
        aty(i, 0) += phi[i] * y;
        for (std::size_t j = 0; j < d; ++j) aty(i, 1 + j) += phi[i] * z[j];
        if (in_money) xty(i, 0) += phi[i] * y;
      }
    }
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t k = 0; k < i; ++k) atx(k, i) = atx(i, k), xtx(k, i) = xtx(i, k);
    res.value_coef[n] = detail::least_squares(atx, aty);
    if (itm == 0) continue;
    const Tensor beta = detail::least_squares(xtx, xty);
    res.exercise_coef[n] = beta;
    for (std::size_t m = 0; m < mm; ++m) {
      const auto s = paths.state(m, n);
      const double f = payoff_f(spec, s);
      if (f <= 0.0) continue;
      basis.eval(spec, s, phi);
      double c = 0.0;
      for (std::size_t i = 0; i < p; ++i) c += beta(i, 0) * phi[i];
      if (f >= c) res.tau[m] = n;
    }
  }

  double sum = 0.0, sum2 = 0.0;
  std::vector<double> dsum(d, 0.0), dsum2(d, 0.0);
  for (std::size_t m = 0; m < mm; ++m) {
    const double y = cash(m, 0);
    sum += y;
    sum2 += y * y;
    pathwise(m, 0, z);
    for (std::size_t j = 0; j < d; ++j) dsum[j] += z[j], dsum2[j] += z[j] * z[j];
  }
  const double mf = static_cast<double>(mm);
  auto stderr_of = [mf](double s, double s2) {
    const double mean = s / mf;
    return std::sqrt(std::max(s2 / mf - mean * mean, 0.0) * mf / (mf - 1.0) / mf);
  };
  res.price0 = sum / mf;
  res.price0_std = stderr_of(sum, sum2);
  res.delta0.resize(d);
  res.delta0_std.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    res.delta0[j] = dsum[j] / mf;
    res.delta0_std[j] = stderr_of(dsum[j], dsum2[j]);
  }
  const double f0 = payoff_f(spec, paths.state(0, 0));
  if (f0 > res.price0) {
    res.price0 = f0;
    res.price0_std = 0.0;
    payoff_f_grad(spec, paths.state(0, 0), res.delta0);
    std::fill(res.delta0_std.begin(), res.delta0_std.end(), 0.0);
    std::fill(res.tau.begin(), res.tau.end(), 0);
  }
  return res;
}

}  // namespace amgru
