#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "amgru/amgru.hpp"

namespace amgru::testing {

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(rows, cols);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central differences of `fn` over every entry of `x`.
inline Tensor numeric_grad(Tensor& x, const std::function<double()>& fn, double h) {
  Tensor g(x.rows(), x.cols());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double keep = x[k];
    x[k] = keep + h;
    const double up = fn();
    x[k] = keep - h;
    const double dn = fn();
    x[k] = keep;
    g[k] = (up - dn) / (2.0 * h);
  }
  return g;
}

/// Five-point central differences, truncation error O(h^4).
inline Tensor numeric_grad5(Tensor& x, const std::function<double()>& fn, double h) {
  Tensor g(x.rows(), x.cols());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double keep = x[k];
    double f[4];
    const double off[4] = {2 * h, h, -h, -2 * h};
    for (int i = 0; i < 4; ++i) {
      x[k] = keep + off[i];
      f[i] = fn();
    }
    x[k] = keep;
    g[k] = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h);
  }
  return g;
}

inline OptionSpec geometric_call(double strike, double maturity, std::size_t steps) {
  OptionSpec s;
  s.payoff_kind = PayoffKind::GeometricAverageCall;
  s.strike = strike;
  s.maturity = maturity;
  s.steps = steps;
  return s;
}

inline OptionSpec with_kind(OptionSpec s, PayoffKind k) {
  s.payoff_kind = k;
  return s;
}

struct GradientCheck {
  double worst = 0.0;
  std::size_t checked = 0;
};

/// Unrolls both networks through a GRU stack of `depth` layers over `steps`
/// steps with the blend weights and the loss, then compares the tape
/// gradient of every weight with five-point differences. Gradients far
/// below the largest one are compared against a floor of 1e-6 of the
/// largest, where finite differences are roundoff-limited.
inline GradientCheck gru_stack_gradient_check(std::size_t depth, std::size_t steps) {
  const std::size_t d = 2, mm = 5;
  auto market = MarketParams::homogeneous(d, 0.03, 0.0, 0.25, 0.75, 100.0);
  const OptionSpec spec = geometric_call(100, 1.0, steps);
  const PathSet paths = simulate_paths(market, spec, mm, 3);
  const Tensor sig = sigma_tilde(market);
  NetworkState price = init_weights(d, depth, Head::Softplus, 21);
  NetworkState delta = init_weights(d, depth, Head::Sigmoid, 22);
  std::mt19937_64 rng(12);
  for (auto* net : {&price, &delta})
    for (Tensor* q : net->parameters())
      for (double& v : q->values()) v += 0.3 * std::uniform_real_distribution<double>(-1, 1)(rng);

  const double disc = std::exp(-market.r * spec.dt());
  auto forward = [&](ad::Tape& t, const NetVars& pv, const NetVars& dv) {
    Tensor dc0;
    ad::Var c = t.constant(detail::terminal_values(paths, spec, 0, mm, dc0));
    ad::Var dc = t.constant(dc0);
    ad::Var hp = t.constant(init_hidden(c.value(), 2 * d));
    ad::Var hd = t.constant(init_hidden(dc0, 2 * d));
    ad::Var total = t.constant(Tensor(1, 1));
    for (std::size_t n = steps; n-- > 0;) {
      const ad::Var x = t.constant(build_input(paths, spec, n, 0, mm));
      const ad::Var ratio = t.constant(detail::price_ratio(paths, n, 0, mm));
      const auto po = price_net_step(pv, hp, x, c, disc);
      const auto doo = delta_net_step(dv, hd, x, dc, ratio, disc);
      const auto l = loss(po.y, doo.y, c, dc, sig, spec.dt());
      total = ad::add(total, l.total);
      c = po.y;
      dc = doo.y;
      hp = po.hidden;
      hd = doo.hidden;
    }
    return total;
  };
  auto value = [&] {
    ad::Tape t;
    return forward(t, bind(t, price), bind(t, delta)).value()(0, 0);
  };
  ad::Tape t;
  const NetVars pv = bind(t, price), dv = bind(t, delta);
  t.backward(forward(t, pv, dv));
  std::vector<std::pair<Tensor, Tensor>> pairs;
  double scale = 0.0;
  for (auto [net, vars] : {std::pair{&price, &pv}, {&delta, &dv}}) {
    auto params = net->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      pairs.emplace_back(t.grad(vars->all[i]), numeric_grad5(*params[i], value, 1e-3));
      for (double g : pairs.back().first.values()) scale = std::max(scale, std::abs(g));
    }
  }
  GradientCheck r;
  for (const auto& [g, fd] : pairs)
    for (std::size_t k = 0; k < g.size(); ++k, ++r.checked)
      r.worst = std::max(r.worst, rel_err(g[k], fd[k], 1e-6 * scale));
  return r;
}

}  // namespace amgru::testing
