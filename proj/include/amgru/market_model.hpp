#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "amgru/error.hpp"
#include "amgru/memory.hpp"
#include "amgru/random.hpp"
#include "amgru/tensor.hpp"

namespace amgru {

// ---------------------------------------------------------------------------
// Market and contract description
// ---------------------------------------------------------------------------

struct MarketParams {
  std::size_t d = 1;
  double r = 0.0;
  std::vector<double> dividends;  // delta_i, length d
  std::vector<double> sigma;      // length d
  Tensor rho;                     // d x d correlation
  std::vector<double> s0;         // length d

  /// Equicorrelated market with identical assets.
  static MarketParams homogeneous(std::size_t d, double r, double dividend, double sigma,
                                  double rho, double s0) {
    MarketParams p;
    p.d = d;
    p.r = r;
    p.dividends.assign(d, dividend);
    p.sigma.assign(d, sigma);
    p.s0.assign(d, s0);
    p.rho = Tensor(d, d, rho);
    for (std::size_t i = 0; i < d; ++i) p.rho(i, i) = 1.0;
    return p;
  }

  double drift(std::size_t i) const { return r - dividends[i]; }
};

enum class PayoffKind {
  GeometricAverageCall,
  MaxCall,
  // Put on the geometric average; with d = 1 this is the vanilla put used by
  // the 1-D oracles.
  GeometricAveragePut,
};

inline std::string to_string(PayoffKind k) {
  switch (k) {
    case PayoffKind::GeometricAverageCall: return "geometric_average_call";
    case PayoffKind::MaxCall: return "max_call";
    case PayoffKind::GeometricAveragePut: return "geometric_average_put";
  }
  return "unknown";
}

struct OptionSpec {
  PayoffKind payoff_kind = PayoffKind::GeometricAverageCall;
  double strike = 100.0;
  double maturity = 1.0;
  std::size_t steps = 50;
  std::optional<double> kappa_override;

  double dt() const { return maturity / static_cast<double>(steps); }
  /// Smoothing parameter; defaults to 2 / dt.
  double kappa() const { return kappa_override.value_or(2.0 / dt()); }
};

inline void validate(const OptionSpec& spec) {
  if (!(spec.strike > 0.0)) throw ValidationError("option.strike", "must be > 0");
  if (!(spec.maturity > 0.0)) throw ValidationError("option.maturity", "must be > 0");
  if (spec.steps < 1) throw ValidationError("option.steps", "must be >= 1");
  if (spec.kappa_override && !(*spec.kappa_override > 0.0))
    throw ValidationError("option.kappa", "must be > 0");
}

// ---------------------------------------------------------------------------
// Cholesky factorisation
// ---------------------------------------------------------------------------

/// Lower-triangular L with L L^T = a. Throws NotPositiveDefinite on a
/// non-positive pivot.
inline Tensor cholesky(const Tensor& a) {
  require(a.rows() == a.cols(), ErrorKind::ShapeMismatch, "cholesky: matrix must be square");
  const std::size_t n = a.rows();
  Tensor l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = a(j, j);
    for (std::size_t k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
    if (!(pivot > 0.0))
      throw Error(ErrorKind::NotPositiveDefinite,
                  "cholesky: pivot " + std::to_string(j) + " is " + std::to_string(pivot));
    l(j, j) = std::sqrt(pivot);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

inline void validate(const MarketParams& p) {
  if (p.d < 1) throw ValidationError("market.d", "must be >= 1");
  auto check_len = [&](const std::vector<double>& v, const char* name) {
    if (v.size() != p.d)
      throw ValidationError(std::string("market.") + name,
                            "expected " + std::to_string(p.d) + " entries, got " +
                                std::to_string(v.size()));
  };
  check_len(p.dividends, "dividends");
  check_len(p.sigma, "sigma");
  check_len(p.s0, "s0");
  for (double s : p.sigma)
    if (!(s >= 0.0) || !std::isfinite(s)) throw ValidationError("market.sigma", "must be >= 0");
  for (double s : p.s0)
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("market.s0", "must be > 0");
  if (p.rho.rows() != p.d || p.rho.cols() != p.d)
    throw ValidationError("market.rho", "must be " + std::to_string(p.d) + "x" +
                                            std::to_string(p.d));
  for (std::size_t i = 0; i < p.d; ++i) {
    if (p.rho(i, i) != 1.0) throw ValidationError("market.rho", "diagonal must be 1");
    for (std::size_t j = 0; j < p.d; ++j) {
      const double v = p.rho(i, j);
      if (!(v >= -1.0 && v <= 1.0))
        throw ValidationError("market.rho", "entry (" + std::to_string(i) + "," +
                                                std::to_string(j) + ") = " +
                                                std::to_string(v) + " outside [-1,1]");
      if (v != p.rho(j, i)) throw ValidationError("market.rho", "must be symmetric");
    }
  }
  try {
    (void)cholesky(p.rho);
  } catch (const Error&) {
    throw ValidationError("market.rho", "not positive definite");
  }
}

// ---------------------------------------------------------------------------
// Payoffs
// ---------------------------------------------------------------------------

inline double geometric_mean(std::span<const double> s) {
  double log_sum = 0.0;
  for (double v : s) log_sum += std::log(v);
  return std::exp(log_sum / static_cast<double>(s.size()));
}

/// Inner payoff g before clamping at zero.
inline double payoff_g(const OptionSpec& spec, std::span<const double> s) {
  switch (spec.payoff_kind) {
    case PayoffKind::GeometricAverageCall: return geometric_mean(s) - spec.strike;
    case PayoffKind::MaxCall: return *std::max_element(s.begin(), s.end()) - spec.strike;
    case PayoffKind::GeometricAveragePut: return spec.strike - geometric_mean(s);
  }
  return 0.0;
}

inline double payoff_f(const OptionSpec& spec, std::span<const double> s) {
  return std::max(payoff_g(spec, s), 0.0);
}

/// Gradient of g. Max-call ties go to the lowest-index maximiser.
inline void payoff_g_grad(const OptionSpec& spec, std::span<const double> s,
                          std::span<double> out) {
  const auto d = static_cast<double>(s.size());
  switch (spec.payoff_kind) {
    case PayoffKind::GeometricAverageCall:
    case PayoffKind::GeometricAveragePut: {
      const double gm = geometric_mean(s);
      const double sign = spec.payoff_kind == PayoffKind::GeometricAverageCall ? 1.0 : -1.0;
      for (std::size_t i = 0; i < s.size(); ++i) out[i] = sign * gm / (d * s[i]);
      break;
    }
    case PayoffKind::MaxCall: {
      const auto arg = static_cast<std::size_t>(
          std::distance(s.begin(), std::max_element(s.begin(), s.end())));
      std::fill(out.begin(), out.end(), 0.0);
      out[arg] = 1.0;
      break;
    }
  }
}

/// Subgradient of f = max(g, 0); zero where g <= 0.
inline void payoff_f_grad(const OptionSpec& spec, std::span<const double> s,
                          std::span<double> out) {
  if (payoff_g(spec, s) > 0.0) {
    payoff_g_grad(spec, s, out);
  } else {
    std::fill(out.begin(), out.end(), 0.0);
  }
}

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// (1/kappa) ln(1 + e^{kappa x}) in overflow-safe form.
inline double softplus_scaled(double x, double kappa) {
  const double z = kappa * x;
  if (z > 0.0) return x + std::log1p(std::exp(-z)) / kappa;
  return std::log1p(std::exp(z)) / kappa;
}

inline double smoothed_payoff(const OptionSpec& spec, std::span<const double> s) {
  return softplus_scaled(payoff_g(spec, s), spec.kappa());
}

inline void smoothed_payoff_grad(const OptionSpec& spec, std::span<const double> s,
                                 std::span<double> out) {
  payoff_g_grad(spec, s, out);
  const double w = logistic(spec.kappa() * payoff_g(spec, s));
  for (double& v : out) v *= w;
}

// ---------------------------------------------------------------------------
// Geometric-average reduction
// ---------------------------------------------------------------------------

struct OneDimParams {
  double sigma = 0.0;  // effective volatility
  double mu = 0.0;     // effective drift under the pricing measure
};

/// Parameters of the 1-D asset (prod s_i)^{1/d} for an equicorrelated,
/// identical-asset market.
inline OneDimParams equivalent_1d_params(const MarketParams& p) {
  const std::size_t d = p.d;
  for (std::size_t i = 1; i < d; ++i) {
    if (p.sigma[i] != p.sigma[0] || p.dividends[i] != p.dividends[0])
      throw Error(ErrorKind::HeterogeneousParams,
                  "geometric reduction needs identical sigma and dividends");
  }
  const double rho = d > 1 ? p.rho(0, 1) : 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      if (i != j && p.rho(i, j) != rho)
        throw Error(ErrorKind::HeterogeneousParams,
                    "geometric reduction needs a constant off-diagonal correlation");
  const double sigma = p.sigma[0];
  const double dd = static_cast<double>(d);
  OneDimParams out;
  out.sigma = sigma * std::sqrt((1.0 + (dd - 1.0) * rho) / dd);
  out.mu = p.r - p.dividends[0] + 0.5 * (out.sigma * out.sigma - sigma * sigma);
  return out;
}

// ---------------------------------------------------------------------------
// Simulated paths
// ---------------------------------------------------------------------------

/// Prices M x (N+1) x d and the correlated increments M x N x d that
/// produced them. Storage is time-major so one timestep is contiguous.
class PathSet {
 public:
  using Storage = std::vector<double, memory::TrackingAllocator<double, memory::Category::Paths>>;

  PathSet() = default;
  PathSet(std::size_t paths, std::size_t steps, std::size_t dim, std::uint64_t seed)
      : m_(paths), n_(steps), d_(dim), seed_(seed),
        prices_((steps + 1) * paths * dim), increments_(steps * paths * dim) {}

  std::size_t paths() const noexcept { return m_; }
  std::size_t steps() const noexcept { return n_; }
  std::size_t dim() const noexcept { return d_; }
  std::uint64_t seed() const noexcept { return seed_; }

  double price(std::size_t m, std::size_t n, std::size_t i) const {
    return prices_[(n * m_ + m) * d_ + i];
  }
  double& price(std::size_t m, std::size_t n, std::size_t i) {
    return prices_[(n * m_ + m) * d_ + i];
  }
  std::span<const double> state(std::size_t m, std::size_t n) const {
    return {prices_.data() + (n * m_ + m) * d_, d_};
  }
  std::span<double> state(std::size_t m, std::size_t n) {
    return {prices_.data() + (n * m_ + m) * d_, d_};
  }
  double increment(std::size_t m, std::size_t n, std::size_t i) const {
    return increments_[(n * m_ + m) * d_ + i];
  }
  double& increment(std::size_t m, std::size_t n, std::size_t i) {
    return increments_[(n * m_ + m) * d_ + i];
  }

  std::size_t bytes() const noexcept {
    return (prices_.size() + increments_.size()) * sizeof(double);
  }

  /// Number of simulated prices that went negative (arithmetic Euler can
  /// overshoot for large sigma * sqrt(dt)).
  std::size_t negative_price_count() const {
    return static_cast<std::size_t>(
        std::count_if(prices_.begin(), prices_.end(), [](double v) { return v < 0.0; }));
  }

  bool all_finite() const {
    return std::all_of(prices_.begin(), prices_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const PathSet& a, const PathSet& b) {
    return a.m_ == b.m_ && a.n_ == b.n_ && a.d_ == b.d_ && a.prices_ == b.prices_ &&
           a.increments_ == b.increments_;
  }

 private:
  std::size_t m_ = 0, n_ = 0, d_ = 0;
  std::uint64_t seed_ = 0;
  Storage prices_;
  Storage increments_;
};

/// Euler-Maruyama simulation of the correlated GBM
///   S^{n+1} = (1 + (r - delta) dt) S^n + sigma S^n dW^n,  dW = L phi sqrt(dt).
/// Path m draws its normals from Philox counters (m, n, block), so the
/// result does not depend on `threads`.
inline PathSet simulate_paths(const MarketParams& params, const OptionSpec& spec,
                              std::size_t paths, std::uint64_t seed, unsigned threads = 1) {
  validate(params);
  validate(spec);
  if (paths < 1) throw ValidationError("paths", "must be >= 1");
  const std::size_t d = params.d;
  const std::size_t steps = spec.steps;
  const double dt = spec.dt();
  const double sqrt_dt = std::sqrt(dt);
  const Tensor chol = cholesky(params.rho);
  const Philox4x32 gen(seed);
  PathSet out(paths, steps, d, seed);

  auto simulate_range = [&](std::size_t begin, std::size_t end) {
    std::vector<double> phi(d + 1), dw(d);
    for (std::size_t m = begin; m < end; ++m) {
      for (std::size_t i = 0; i < d; ++i) out.price(m, 0, i) = params.s0[i];
      const auto lo = static_cast<std::uint32_t>(m);
      const auto hi = static_cast<std::uint32_t>(static_cast<std::uint64_t>(m) >> 32);
      for (std::size_t n = 0; n < steps; ++n) {
        for (std::size_t j = 0; j < d; j += 2) {
          const auto z = normal_pair(gen, {lo, hi, static_cast<std::uint32_t>(n),
                                           static_cast<std::uint32_t>(j / 2)});
          phi[j] = z[0];
          phi[j + 1] = z[1];
        }
        for (std::size_t i = 0; i < d; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) acc += chol(i, j) * phi[j];
          dw[i] = acc * sqrt_dt;
          out.increment(m, n, i) = dw[i];
        }
        for (std::size_t i = 0; i < d; ++i) {
          const double s = out.price(m, n, i);
          out.price(m, n + 1, i) =
              (1.0 + params.drift(i) * dt) * s + params.sigma[i] * s * dw[i];
        }
      }
    }
  };

  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(paths)));
  if (threads == 1) {
    simulate_range(0, paths);
  } else {
    std::vector<std::jthread> workers;
    const std::size_t chunk = (paths + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(paths, b + chunk);
      if (b < e) workers.emplace_back(simulate_range, b, e);
    }
  }
  return out;
}

// Binary layout: "PATHSET1", M, N, d (u64 little-endian), then prices in
// M x (N+1) x d order, then increments in M x N x d order, all f64 LE.
namespace detail {
inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw Error(ErrorKind::Io, "unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}
inline void write_f64(std::ostream& os, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, 8);
  write_u64(os, bits);
}
inline double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double x;
  std::memcpy(&x, &bits, 8);
  return x;
}
}  // namespace detail

inline void write_pathset(const PathSet& p, const std::string& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file);
  os.write("PATHSET1", 8);
  detail::write_u64(os, p.paths());
  detail::write_u64(os, p.steps());
  detail::write_u64(os, p.dim());
  for (std::size_t m = 0; m < p.paths(); ++m)
    for (std::size_t n = 0; n <= p.steps(); ++n)
      for (std::size_t i = 0; i < p.dim(); ++i) detail::write_f64(os, p.price(m, n, i));
  for (std::size_t m = 0; m < p.paths(); ++m)
    for (std::size_t n = 0; n < p.steps(); ++n)
      for (std::size_t i = 0; i < p.dim(); ++i) detail::write_f64(os, p.increment(m, n, i));
  if (!os) throw Error(ErrorKind::Io, "write failed: " + file);
}

inline PathSet read_pathset(const std::string& file, std::uint64_t seed = 0) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + file);
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "PATHSET1")
    throw Error(ErrorKind::Io, file + ": bad PATHSET1 header");
  const auto m = detail::read_u64(is), n = detail::read_u64(is), d = detail::read_u64(is);
  PathSet p(m, n, d, seed);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b <= n; ++b)
      for (std::size_t i = 0; i < d; ++i) p.price(a, b, i) = detail::read_f64(is);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < d; ++i) p.increment(a, b, i) = detail::read_f64(is);
  return p;
}

}  // namespace amgru
