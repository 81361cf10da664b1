#pragma once

#include <chrono>
#include <cmath>
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amgru/autodiff.hpp"
#include "amgru/bsde_targets.hpp"
#include "amgru/error.hpp"
#include "amgru/market_model.hpp"
#include "amgru/memory.hpp"
#include "amgru/rnn_nets.hpp"
#include "amgru/training.hpp"

namespace amgru {

struct EvalOptions {
  StoppingMode stopping_mode = StoppingMode::CrossSectionalArgmax;
  HiddenCarry hidden_carry = HiddenCarry::TopLayer;
  std::size_t batch_size = 100000;
  // All paths share the t = 0 state, so the t = 0 exercise decision compares
  // f(s0) against the cross-path mean of y^0 instead of each path's y^0.
  bool pooled_t0 = true;
};

struct EvalReport {
  double price0 = 0.0;
  double price0_std = 0.0;
  std::vector<double> delta0;
  std::optional<double> f1;
  std::optional<double> pct_err_price;
  std::optional<double> pct_err_delta;
  double wall_ms = 0.0;
  std::size_t peak_bytes = 0;
  StoppingMode stopping_mode = StoppingMode::CrossSectionalArgmax;
};

/// Spacetime output of an evaluation: arrays are indexed [m][n] and the
/// gradients [n](m, j).
struct Spacetime {
  std::size_t paths = 0, steps = 0, d = 0;
  Tensor v;                   // M x (N+1)
  Tensor y;                   // M x (N+1), network estimate (f at N)
  Tensor f;                   // M x (N+1), unsmoothed payoff
  std::vector<Tensor> dv;     // N+1 tensors M x d
  std::vector<Tensor> dy;     // N+1 tensors M x d
  std::vector<std::uint8_t> labels;  // M x (N+1), 1 = exercise

  bool label(std::size_t m, std::size_t n) const { return labels[m * (steps + 1) + n] != 0; }
};

struct EvalResult {
  EvalReport report;
  Spacetime spacetime;
};

/// Forward evaluation of trained networks over `paths`: y*, grad y* from
/// the networks, E* = (f >= y*), v = max(f, y*), grad v = grad f E* +
/// grad y* (1 - E*). At n = N the label is f > 0 and v = f.
inline EvalResult evaluate(const PathSet& paths, const OptionSpec& spec, const MarketParams& params,
                           const NetworkState& price_net, const NetworkState& delta_net,
                           const EvalOptions& opt = {}) {
  validate(params);
  validate(spec);
  if (price_net.d != params.d || delta_net.d != params.d || paths.dim() != params.d)
    throw Error(ErrorKind::SpecMismatch, "evaluate: network dimension " +
                                             std::to_string(price_net.d) + " vs market d=" +
                                             std::to_string(params.d));
  if (paths.steps() != spec.steps)
    throw Error(ErrorKind::SpecMismatch, "evaluate: PathSet has " +
                                             std::to_string(paths.steps()) + " steps, option " +
                                             std::to_string(spec.steps));
  if (price_net.head != Head::Softplus || delta_net.head != Head::Sigmoid)
    throw Error(ErrorKind::SpecMismatch, "evaluate: network heads swapped");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t base_live = memory::live_bytes();
  memory::reset_peak();

  const std::size_t mm = paths.paths(), big_n = spec.steps, d = params.d;
  const std::size_t width = price_net.hidden;
  const double disc = std::exp(-params.r * spec.dt());
  EvalResult out;
  Spacetime& st = out.spacetime;
  st.paths = mm;
  st.steps = big_n;
  st.d = d;
  st.v = Tensor(mm, big_n + 1);
  st.y = Tensor(mm, big_n + 1);
  st.f = Tensor(mm, big_n + 1);
  st.dv.assign(big_n + 1, Tensor(mm, d));
  st.dy.assign(big_n + 1, Tensor(mm, d));
  st.labels.assign(mm * (big_n + 1), 0);

  const std::vector<std::size_t> cached_tilde =
      opt.stopping_mode == StoppingMode::PerPathBoundary
          ? std::vector<std::size_t>{}
          : stopping_indices(paths, spec, opt.stopping_mode);
  PerPathStopper stopper(mm, big_n);
  const std::size_t batch = std::min(std::max<std::size_t>(opt.batch_size, 1), mm);
  std::vector<double> grad_f(d);

  for (std::size_t begin = 0; begin < mm; begin += batch) {
    const std::size_t count = std::min(batch, mm - begin);
    Tensor grad_terminal;
    Tensor c_next = detail::terminal_values(paths, spec, begin, count, grad_terminal);
    Tensor dc_next = grad_terminal;
    Tensor h_price = init_hidden(c_next, width);
    Tensor h_delta = init_hidden(dc_next, width);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t m = begin + i;
      const auto s = paths.state(m, big_n);
      const double f = payoff_f(spec, s);
      payoff_f_grad(spec, s, grad_f);
      st.f(m, big_n) = st.v(m, big_n) = st.y(m, big_n) = f;
      st.labels[m * (big_n + 1) + big_n] = f > 0.0;
      for (std::size_t j = 0; j < d; ++j) st.dv[big_n](m, j) = st.dy[big_n](m, j) = grad_f[j];
    }
    for (std::size_t n = big_n; n-- > 0;) {
      auto tilde = [&, n](std::size_t m) {
        return opt.stopping_mode == StoppingMode::PerPathBoundary ? stopper.index(m)
                                                                  : cached_tilde[n];
      };
      ad::Tape tape;
      NetVars pv = bind(tape, price_net, false);
      NetVars dv = bind(tape, delta_net, false);
      ad::Var x = tape.constant(build_input(paths, spec, n, begin, count));
      StepOutput py = price_net_step(pv, tape.constant(h_price), x, tape.constant(c_next), disc);
      StepOutput dy = delta_net_step(dv, tape.constant(h_delta), x, tape.constant(dc_next),
                                     tape.constant(detail::price_ratio(paths, n, begin, count)),
                                     disc);
      const Tensor& yv = py.y.value();
      const Tensor& dyv = dy.y.value();
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t m = begin + i;
        const auto s = paths.state(m, n);
        const double f = payoff_f(spec, s);
        payoff_f_grad(spec, s, grad_f);
        const double y = yv(i, 0);
        const bool ex = f >= y;
        st.f(m, n) = f;
        st.y(m, n) = y;
        st.v(m, n) = std::max(f, y);
        st.labels[m * (big_n + 1) + n] = ex;
        for (std::size_t j = 0; j < d; ++j) {
          st.dy[n](m, j) = dyv(i, j);
          st.dv[n](m, j) = ex ? grad_f[j] : dyv(i, j);
        }
        if (opt.stopping_mode == StoppingMode::PerPathBoundary) stopper.observe(m, n, f, y);
      }
      Targets tg = continuation_targets(paths, spec, params, n, tilde, begin, count);
      h_price = detail::next_hidden(opt.hidden_carry, py.hidden, py.y, width);
      h_delta = detail::next_hidden(opt.hidden_carry, dy.hidden, dy.y, width);
      c_next = std::move(tg.c);
      dc_next = std::move(tg.dc);
    }
  }

  if (opt.pooled_t0 && big_n > 0 && mm > 0) {
    const auto s0 = paths.state(0, 0);
    bool common = true;
    for (std::size_t m = 1; m < mm && common; ++m) {
      const auto sm = paths.state(m, 0);
      common = std::equal(s0.begin(), s0.end(), sm.begin());
    }
    if (common) {
      double ybar = 0.0;
      for (std::size_t m = 0; m < mm; ++m) ybar += st.y(m, 0);
      ybar /= static_cast<double>(mm);
      const double f0 = payoff_f(spec, s0);
      payoff_f_grad(spec, s0, grad_f);
      const bool ex = f0 >= ybar;
      for (std::size_t m = 0; m < mm; ++m) {
        st.labels[m * (big_n + 1)] = ex;
        st.v(m, 0) = ex ? f0 : st.y(m, 0);
        for (std::size_t j = 0; j < d; ++j) st.dv[0](m, j) = ex ? grad_f[j] : st.dy[0](m, j);
      }
    }
  }

  EvalReport& rep = out.report;
  rep.stopping_mode = opt.stopping_mode;
  double s1 = 0.0, s2 = 0.0;
  rep.delta0.assign(d, 0.0);
  for (std::size_t m = 0; m < mm; ++m) {
    const double v = st.v(m, 0);
    s1 += v;
    s2 += v * v;
    for (std::size_t j = 0; j < d; ++j) rep.delta0[j] += st.dv[0](m, j);
  }
  const double md = static_cast<double>(mm);
  rep.price0 = s1 / md;
  const double var = mm > 1 ? std::max(0.0, (s2 - md * rep.price0 * rep.price0) / (md - 1.0)) : 0.0;
  rep.price0_std = std::sqrt(var / md);
  for (double& x : rep.delta0) x /= md;
  rep.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  rep.peak_bytes = memory::peak_bytes() - std::min(base_live, memory::peak_bytes());
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Confusion confusion(std::span<const std::uint8_t> predicted,
                           std::span<const std::uint8_t> truth) {
  require(predicted.size() == truth.size(), ErrorKind::ShapeMismatch,
          "f1_score: " + std::to_string(predicted.size()) + " predictions vs " +
              std::to_string(truth.size()) + " labels");
  Confusion c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool p = predicted[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// TP / (TP + (FP + FN) / 2) with exercise as the positive class.
inline double f1_score(std::span<const std::uint8_t> predicted,
                       std::span<const std::uint8_t> truth) {
  const Confusion c = confusion(predicted, truth);
  if (c.tp + c.fn == 0)
    throw Error(ErrorKind::EmptyPositiveClass, "f1_score: truth has no exercised samples");
  return static_cast<double>(c.tp) /
         (static_cast<double>(c.tp) + 0.5 * static_cast<double>(c.fp + c.fn));
}

struct PercentErrors {
  double price = 0.0;
  double delta = 0.0;
};

/// 100 |p - p_ref| / |p_ref| and 100 ||D - D_ref||_2 / ||D_ref||_2.
inline PercentErrors percent_errors(double price0, std::span<const double> delta0,
                                    double ref_price, std::span<const double> ref_delta) {
  require(delta0.size() == ref_delta.size(), ErrorKind::ShapeMismatch,
          "percent_errors: delta lengths differ");
  if (ref_price == 0.0) throw Error(ErrorKind::ZeroReference, "percent_errors: reference price is 0");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < delta0.size(); ++i) {
    num += (delta0[i] - ref_delta[i]) * (delta0[i] - ref_delta[i]);
    den += ref_delta[i] * ref_delta[i];
  }
  if (den == 0.0) throw Error(ErrorKind::ZeroReference, "percent_errors: reference delta is 0");
  return {100.0 * std::abs(price0 - ref_price) / std::abs(ref_price),
          100.0 * std::sqrt(num) / std::sqrt(den)};
}

struct Instrumented {
  double wall_ms = 0.0;
  std::size_t peak_bytes = 0;
};

/// Runs `fn` and reports wall time and the peak of tracked working memory
/// above the level at entry.
inline Instrumented instrument(const std::function<void()>& fn) {
  const std::size_t base = memory::live_bytes();
  memory::reset_peak();
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  Instrumented r;
  r.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  r.peak_bytes = memory::peak_bytes() - std::min(base, memory::peak_bytes());
  return r;
}

/// Boundary dump: n, m, s_1..s_d, predicted and (if given) truth, for the
/// first `max_paths` paths.
inline void write_boundary_csv(const PathSet& paths, const Spacetime& st,
                               const std::vector<std::uint8_t>* truth, const std::string& file,
                               std::size_t max_paths = std::numeric_limits<std::size_t>::max()) {
  std::ofstream os(file);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file);
  os.precision(17);
  os << "n,m";
  for (std::size_t j = 0; j < st.d; ++j) os << ",s_" << j + 1;
  os << ",predicted";
  if (truth) os << ",truth";
  os << '\n';
  for (std::size_t n = 0; n <= st.steps; ++n)
    for (std::size_t m = 0; m < std::min(st.paths, max_paths); ++m) {
      os << n << ',' << m;
      for (std::size_t j = 0; j < st.d; ++j) os << ',' << paths.price(m, n, j);
      os << ',' << int(st.label(m, n));
      if (truth) os << ',' << int((*truth)[m * (st.steps + 1) + n]);
      os << '\n';
    }
}

}  // namespace amgru
