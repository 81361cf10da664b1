#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "amgru/autodiff.hpp"
#include "amgru/error.hpp"
#include "amgru/market_model.hpp"
#include "amgru/tensor.hpp"

namespace amgru {

enum class StoppingMode {
  CrossSectionalArgmax,
  PerPathBoundary,
  // Always stop at maturity; turns the targets into a European payoff.
  European,
};

inline std::string to_string(StoppingMode m) {
  switch (m) {
    case StoppingMode::CrossSectionalArgmax: return "cross_sectional_argmax";
    case StoppingMode::PerPathBoundary: return "per_path_boundary";
    case StoppingMode::European: return "european";
  }
  return "unknown";
}

inline StoppingMode stopping_mode_from_string(const std::string& s) {
  if (s == "cross_sectional_argmax") return StoppingMode::CrossSectionalArgmax;
  if (s == "per_path_boundary") return StoppingMode::PerPathBoundary;
  if (s == "european") return StoppingMode::European;
  throw ValidationError("train.stopping_mode", "unknown mode '" + s + "'");
}

/// Cross-path mean of the unsmoothed payoff f at every n = 0..N.
inline std::vector<double> mean_payoffs(const PathSet& paths, const OptionSpec& spec) {
  std::vector<double> out(paths.steps() + 1, 0.0);
  for (std::size_t n = 0; n <= paths.steps(); ++n) {
    double s = 0.0;
    for (std::size_t m = 0; m < paths.paths(); ++m) s += payoff_f(spec, paths.state(m, n));
    out[n] = s / static_cast<double>(paths.paths());
  }
  return out;
}

/// argmax over k in [n+1, N-1] of mean_f[k], ties to the latest index. The
/// range is empty at n = N-1, which maps to N.
inline std::size_t cross_sectional_index(std::span<const double> mean_f, std::size_t n) {
  const std::size_t big_n = mean_f.size() - 1;
  require(n < big_n, ErrorKind::Validation, "stopping_index: n must be < N");
  if (n + 1 > big_n - 1) return big_n;
  std::size_t best = n + 1;
  for (std::size_t k = n + 1; k <= big_n - 1; ++k)
    if (mean_f[k] >= mean_f[best]) best = k;
  return best;
}

/// Stopping index of CrossSectionalArgmax or European mode for timestep n.
inline std::size_t stopping_index(const PathSet& paths, const OptionSpec& spec, std::size_t n,
                                  StoppingMode mode = StoppingMode::CrossSectionalArgmax) {
  require(n < paths.steps(), ErrorKind::Validation, "stopping_index: n must be < N");
  if (mode == StoppingMode::European) return paths.steps();
  require(mode == StoppingMode::CrossSectionalArgmax, ErrorKind::Validation,
          "stopping_index: per-path mode needs a PerPathStopper");
  const auto mean_f = mean_payoffs(paths, spec);
  return cross_sectional_index(mean_f, n);
}

/// Stopping indices for every n = 0..N-1 (cached once per PathSet).
inline std::vector<std::size_t> stopping_indices(const PathSet& paths, const OptionSpec& spec,
                                                 StoppingMode mode) {
  std::vector<std::size_t> out(paths.steps(), paths.steps());
  if (mode == StoppingMode::European) return out;
  const auto mean_f = mean_payoffs(paths, spec);
  for (std::size_t n = 0; n < paths.steps(); ++n) out[n] = cross_sectional_index(mean_f, n);
  return out;
}

/// Per-path boundary rule, swept backward in n: after observing the
/// continuation estimate y at step k, a path whose payoff satisfies f >= y
/// (and f > 0) records k as its next stopping index.
class PerPathStopper {
 public:
  PerPathStopper(std::size_t paths, std::size_t steps) : tau_(paths, steps) {}

  std::size_t index(std::size_t m) const { return tau_[m]; }
  std::span<const std::size_t> indices() const { return tau_; }

  void observe(std::size_t m, std::size_t k, double f, double y) {
    if (f > 0.0 && f >= y) tau_[m] = k;
  }

 private:
  std::vector<std::size_t> tau_;
};

// ---------------------------------------------------------------------------
// Continuation targets
// ---------------------------------------------------------------------------

struct Targets {
  Tensor c;   // count x 1
  Tensor dc;  // count x d
};

/// Payoff and gradient used as the stopping value at index k: the smoothed
/// payoff at maturity, the plain payoff with its subgradient before.
inline double stop_value(const OptionSpec& spec, std::span<const double> s, std::size_t k,
                         std::span<double> grad) {
  if (k == spec.steps) {
    smoothed_payoff_grad(spec, s, grad);
    return smoothed_payoff(spec, s);
  }
  payoff_f_grad(spec, s, grad);
  return payoff_f(spec, s);
}

/// c^n = e^{-r (k - n) dt} f^k(S^k) and
/// dc^n = e^{-r (k - n) dt} grad f^k(S^k) * S^k / S^n for paths
/// [begin, begin + count), with k = n_tilde(m) supplied per path.
template <class IndexFn>
Targets continuation_targets(const PathSet& paths, const OptionSpec& spec,
                             const MarketParams& params, std::size_t n, IndexFn n_tilde,
                             std::size_t begin, std::size_t count) {
  const std::size_t d = paths.dim();
  const double dt = spec.dt();
  Targets t{Tensor(count, 1), Tensor(count, d)};
  std::vector<double> grad(d);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t m = begin + i;
    const std::size_t k = n_tilde(m);
    require(k >= n && k <= paths.steps(), ErrorKind::Validation,
            "continuation_targets: stopping index out of range");
    const auto sk = paths.state(m, k);
    const auto sn = paths.state(m, n);
    const double disc = std::exp(-params.r * static_cast<double>(k - n) * dt);
    t.c(i, 0) = disc * stop_value(spec, sk, k, grad);
    for (std::size_t j = 0; j < d; ++j) {
      if (sn[j] == 0.0)
        throw Error(ErrorKind::DivisionByZero,
                    "continuation_targets: S^" + std::to_string(n) + " is zero on path " +
                        std::to_string(m));
      t.dc(i, j) = k == n ? grad[j] : disc * grad[j] * sk[j] / sn[j];
    }
  }
  return t;
}

inline Targets continuation_targets(const PathSet& paths, const OptionSpec& spec,
                                    const MarketParams& params, std::size_t n,
                                    std::size_t n_tilde) {
  return continuation_targets(
      paths, spec, params, n, [n_tilde](std::size_t) { return n_tilde; }, 0, paths.paths());
}

/// Fully materialised targets for n = 0..N (debugging and export).
struct TargetSet {
  Tensor c;                          // M x (N+1)
  std::vector<Tensor> dc;            // N+1 tensors of M x d
  std::vector<std::size_t> n_tilde;  // length N
  StoppingMode mode = StoppingMode::CrossSectionalArgmax;
};

inline TargetSet build_targets(const PathSet& paths, const OptionSpec& spec,
                               const MarketParams& params, StoppingMode mode) {
  require(mode != StoppingMode::PerPathBoundary, ErrorKind::Validation,
          "build_targets: per-path targets depend on the network and are built in training");
  const std::size_t big_n = paths.steps(), mm = paths.paths();
  TargetSet ts;
  ts.mode = mode;
  ts.n_tilde = stopping_indices(paths, spec, mode);
  ts.c = Tensor(mm, big_n + 1);
  ts.dc.resize(big_n + 1);
  for (std::size_t n = 0; n <= big_n; ++n) {
    const std::size_t k = n == big_n ? big_n : ts.n_tilde[n];
    Targets t = continuation_targets(paths, spec, params, n, k);
    for (std::size_t m = 0; m < mm; ++m) ts.c(m, n) = t.c(m, 0);
    ts.dc[n] = std::move(t.dc);
  }
  return ts;
}

inline void write_targets_csv(const TargetSet& ts, const std::string& file) {
  std::ofstream os(file);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file);
  os.precision(17);
  const std::size_t d = ts.dc.empty() ? 0 : ts.dc[0].cols();
  os << "m,n,c";
  for (std::size_t j = 0; j < d; ++j) os << ",dc_" << j + 1;
  os << '\n';
  for (std::size_t m = 0; m < ts.c.rows(); ++m)
    for (std::size_t n = 0; n < ts.c.cols(); ++n) {
      os << m << ',' << n << ',' << ts.c(m, n);
      for (std::size_t j = 0; j < d; ++j) os << ',' << ts.dc[n](m, j);
      os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// diag(sigma) * L.
inline Tensor sigma_tilde(const MarketParams& params) {
  Tensor l = cholesky(params.rho);
  for (std::size_t i = 0; i < params.d; ++i)
    for (std::size_t j = 0; j < params.d; ++j) l(i, j) *= params.sigma[i];
  return l;
}

struct LossTerms {
  ad::Var total, price_term, delta_term;
};

/// mean |c - y|^2 + dt * mean |(dc - dy) sigma_tilde|^2 as tape nodes.
inline LossTerms loss(ad::Var y, ad::Var dy, ad::Var c, ad::Var dc, const Tensor& sig_tilde,
                      double dt) {
  ad::Tape& t = *y.tape;
  const std::size_t m = y.rows(), d = dy.cols();
  require_shape(y.value(), m, 1, "loss y");
  require_shape(c.value(), m, 1, "loss c");
  require_shape(dc.value(), m, d, "loss dc");
  require_shape(dy.value(), m, d, "loss dy");
  require_shape(sig_tilde, d, d, "loss sigma_tilde");
  ad::Var r = ad::sub(c, y);
  ad::Var price = ad::mean_all(ad::mul_elem(r, r));
  ad::Var e = ad::matmul(ad::sub(dc, dy), t.constant(sig_tilde));
  ad::Var delta = ad::scale(ad::sum_all(ad::mul_elem(e, e)), 1.0 / static_cast<double>(m));
  ad::Var total = ad::add(price, ad::scale(delta, dt));
  return {total, price, delta};
}

/// Plain-value version of the loss.
inline double loss_value(const Tensor& y, const Tensor& dy, const Tensor& c, const Tensor& dc,
                         const Tensor& sig_tilde, double dt) {
  ad::Tape t;
  LossTerms l = loss(t.constant(y), t.constant(dy), t.constant(c), t.constant(dc), sig_tilde, dt);
  return l.total.value()(0, 0);
}

}  // namespace amgru
