#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "amgru/autodiff.hpp"
#include "amgru/bsde_targets.hpp"
#include "amgru/error.hpp"
#include "amgru/market_model.hpp"
#include "amgru/memory.hpp"
#include "amgru/rnn_nets.hpp"

namespace amgru {

/// What the recurrence carries from step n+1 to step n.
enum class HiddenCarry {
  TopLayer,  // top GRU layer's hidden state
  Output,    // the blended estimate y^n (or grad y^n), tiled to width H
};

inline std::string to_string(HiddenCarry c) {
  return c == HiddenCarry::TopLayer ? "top_layer" : "output";
}

inline HiddenCarry hidden_carry_from_string(const std::string& s) {
  if (s == "top_layer") return HiddenCarry::TopLayer;
  if (s == "output") return HiddenCarry::Output;
  throw ValidationError("train.hidden_carry", "unknown value '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 100000;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  StoppingMode stopping_mode = StoppingMode::CrossSectionalArgmax;
  std::size_t layers = 7;
  double clip_norm = 10.0;  // <= 0 disables clipping
  bool full_bptt = false;   // one tape for the whole sequence
  HiddenCarry hidden_carry = HiddenCarry::TopLayer;
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw ValidationError("train.batch_size", "must be >= 1");
  if (!(c.learning_rate > 0.0)) throw ValidationError("train.learning_rate", "must be > 0");
  if (!(c.adam_beta1 > 0.0 && c.adam_beta1 < 1.0))
    throw ValidationError("train.adam_beta1", "must be in (0,1)");
  if (!(c.adam_beta2 > 0.0 && c.adam_beta2 < 1.0))
    throw ValidationError("train.adam_beta2", "must be in (0,1)");
  if (!(c.adam_eps > 0.0)) throw ValidationError("train.adam_eps", "must be > 0");
  if (c.layers < 1) throw ValidationError("train.layers", "must be >= 1");
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(AdamState& st, std::span<Tensor* const> params,
                      std::span<const Tensor> grads, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
  require(params.size() == grads.size(), ErrorKind::ShapeMismatch,
          "adam_step: " + std::to_string(params.size()) + " params vs " +
              std::to_string(grads.size()) + " grads");
  if (st.m.empty()) {
    for (const Tensor* p : params) {
      st.m.emplace_back(p->rows(), p->cols());
      st.v.emplace_back(p->rows(), p->cols());
    }
  }
  require(st.m.size() == params.size(), ErrorKind::ShapeMismatch, "adam_step: state size");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(grads[i]) || !params[i]->same_shape(st.m[i]))
      throw Error(ErrorKind::ShapeMismatch, "adam_step: parameter " + std::to_string(i) + " is " +
                                                params[i]->shape_string() + ", grad " +
                                                grads[i].shape_string());
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      const double mh = m[k] / bc1;
      const double vh = v[k] / bc2;
      p[k] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

inline double global_norm(std::span<const std::vector<Tensor>* const> groups) {
  double s = 0.0;
  for (const auto* gs : groups)
    for (const Tensor& g : *gs)
      for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double price_term = 0.0;
  double delta_term = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  NetworkState price_net;
  NetworkState delta_net;
  std::vector<EpochStats> history;
  double wall_ms = 0.0;
  std::size_t peak_bytes = 0;
};

namespace detail {

inline Tensor terminal_values(const PathSet& paths, const OptionSpec& spec, std::size_t begin,
                              std::size_t count, Tensor& grad) {
  const std::size_t d = paths.dim(), n = paths.steps();
  Tensor f(count, 1);
  grad = Tensor(count, d);
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = paths.state(begin + i, n);
    f(i, 0) = smoothed_payoff(spec, s);
    smoothed_payoff_grad(spec, s, grad.row(i));
  }
  return f;
}

inline Tensor price_ratio(const PathSet& paths, std::size_t n, std::size_t begin,
                          std::size_t count) {
  const std::size_t d = paths.dim();
  Tensor r(count, d);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double sn = paths.price(begin + i, n, j);
      if (sn == 0.0)
        throw Error(ErrorKind::DivisionByZero, "price ratio: zero price on path " +
                                                   std::to_string(begin + i));
      r(i, j) = paths.price(begin + i, n + 1, j) / sn;
    }
  return r;
}

inline void check_finite(const Tensor& t, const char* name, std::size_t epoch, std::size_t n) {
  if (!t.all_finite())
    throw Error(ErrorKind::NonFiniteLoss, "non-finite " + std::string(name) + " at epoch " +
                                              std::to_string(epoch) + ", n=" + std::to_string(n));
}

/// Next carried hidden state for one network.
inline Tensor next_hidden(HiddenCarry carry, const ad::Var& top, const ad::Var& y,
                          std::size_t width) {
  return carry == HiddenCarry::TopLayer ? top.value() : init_hidden(y.value(), width);
}

}  // namespace detail

/// Trains the price and delta networks backward over n = N-1..0.
/// By default the hidden state is detached between timesteps, so each step
/// records its own small tape and peak memory does not grow with N;
/// `full_bptt` records the whole sequence on one tape instead. Gradients of
/// all steps in a batch are summed (as the mean over n) before one Adam step.
inline TrainResult train(const PathSet& paths, const OptionSpec& spec, const MarketParams& params,
                         const TrainConfig& cfg,
                         const std::function<void(const EpochStats&)>& on_epoch = {}) {
  validate(params);
  validate(spec);
  validate(cfg);
  require(paths.dim() == params.d && paths.steps() == spec.steps, ErrorKind::SpecMismatch,
          "train: PathSet shape does not match market/option");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t base_live = memory::live_bytes();
  memory::reset_peak();

  TrainResult res;
  res.price_net = init_weights(params.d, cfg.layers, Head::Softplus, cfg.seed);
  res.delta_net = init_weights(params.d, cfg.layers, Head::Sigmoid, cfg.seed);
  const std::size_t big_n = spec.steps, width = res.price_net.hidden;
  const double dt = spec.dt();
  const double disc = std::exp(-params.r * dt);
  const Tensor sig_t = sigma_tilde(params);
  const std::vector<std::size_t> cached_tilde =
      cfg.stopping_mode == StoppingMode::PerPathBoundary
          ? std::vector<std::size_t>{}
          : stopping_indices(paths, spec, cfg.stopping_mode);
  const std::size_t batch = std::min(cfg.batch_size, paths.paths());
  AdamState adam_price, adam_delta;
  const double inv_steps = 1.0 / static_cast<double>(big_n);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto e0 = std::chrono::steady_clock::now();
    EpochStats stats;
    stats.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < paths.paths(); begin += batch) {
      const std::size_t count = std::min(batch, paths.paths() - begin);
      Tensor grad_terminal;
      Tensor c_next = detail::terminal_values(paths, spec, begin, count, grad_terminal);
      Tensor dc_next = grad_terminal;
      Tensor h_price = init_hidden(c_next, width);
      Tensor h_delta = init_hidden(dc_next, width);
      PerPathStopper stopper(paths.paths(), big_n);
      std::vector<Tensor> g_price, g_delta;
      double sum_loss = 0.0, sum_price = 0.0, sum_delta = 0.0;

      auto n_tilde_fn = [&](std::size_t n) {
        return [&, n](std::size_t m) {
          return cfg.stopping_mode == StoppingMode::PerPathBoundary ? stopper.index(m)
                                                                    : cached_tilde[n];
        };
      };

      auto record_per_path = [&](std::size_t n, const Tensor& y) {
        if (cfg.stopping_mode != StoppingMode::PerPathBoundary) return;
        for (std::size_t i = 0; i < count; ++i)
          stopper.observe(begin + i, n, payoff_f(spec, paths.state(begin + i, n)), y(i, 0));
      };

      if (!cfg.full_bptt) {
        for (std::size_t n = big_n; n-- > 0;) {
          Targets tg = continuation_targets(paths, spec, params, n, n_tilde_fn(n), begin, count);
          ad::Tape tape;
          NetVars pv = bind(tape, res.price_net);
          NetVars dv = bind(tape, res.delta_net);
          ad::Var x = tape.constant(build_input(paths, spec, n, begin, count));
          StepOutput py = price_net_step(pv, tape.constant(h_price), x,
                                         tape.constant(c_next), disc);
          StepOutput dy = delta_net_step(dv, tape.constant(h_delta), x,
                                         tape.constant(dc_next),
                                         tape.constant(detail::price_ratio(paths, n, begin, count)),
                                         disc);
          LossTerms l = loss(py.y, dy.y, tape.constant(tg.c), tape.constant(tg.dc), sig_t, dt);
          ad::Var scaled = ad::scale(l.total, inv_steps);
          detail::check_finite(py.y.value(), "price output y", epoch, n);
          detail::check_finite(dy.y.value(), "delta output dy", epoch, n);
          detail::check_finite(l.total.value(), "loss", epoch, n);
          tape.backward(scaled);
          accumulate_grads(tape, pv, g_price);
          accumulate_grads(tape, dv, g_delta);
          sum_loss += l.total.value()(0, 0);
          sum_price += l.price_term.value()(0, 0);
          sum_delta += l.delta_term.value()(0, 0);
          record_per_path(n, py.y.value());
          h_price = detail::next_hidden(cfg.hidden_carry, py.hidden, py.y, width);
          h_delta = detail::next_hidden(cfg.hidden_carry, dy.hidden, dy.y, width);
          c_next = std::move(tg.c);
          dc_next = std::move(tg.dc);
        }
      } else {
        ad::Tape tape;
        NetVars pv = bind(tape, res.price_net);
        NetVars dv = bind(tape, res.delta_net);
        ad::Var hp = tape.constant(h_price), hd = tape.constant(h_delta);
        ad::Var total = tape.constant(Tensor(1, 1));
        for (std::size_t n = big_n; n-- > 0;) {
          Targets tg = continuation_targets(paths, spec, params, n, n_tilde_fn(n), begin, count);
          ad::Var x = tape.constant(build_input(paths, spec, n, begin, count));
          StepOutput py = price_net_step(pv, hp, x, tape.constant(c_next), disc);
          StepOutput dy = delta_net_step(
              dv, hd, x, tape.constant(dc_next),
              tape.constant(detail::price_ratio(paths, n, begin, count)), disc);
          LossTerms l = loss(py.y, dy.y, tape.constant(tg.c), tape.constant(tg.dc), sig_t, dt);
          detail::check_finite(l.total.value(), "loss", epoch, n);
          total = ad::add(total, ad::scale(l.total, inv_steps));
          sum_loss += l.total.value()(0, 0);
          sum_price += l.price_term.value()(0, 0);
          sum_delta += l.delta_term.value()(0, 0);
          record_per_path(n, py.y.value());
          if (cfg.hidden_carry == HiddenCarry::TopLayer) {
            hp = py.hidden;
            hd = dy.hidden;
          } else {
            hp = tape.constant(init_hidden(py.y.value(), width));
            hd = tape.constant(init_hidden(dy.y.value(), width));
          }
          c_next = std::move(tg.c);
          dc_next = std::move(tg.dc);
        }
        tape.backward(total);
        accumulate_grads(tape, pv, g_price);
        accumulate_grads(tape, dv, g_delta);
      }

      if (cfg.clip_norm > 0.0) {
        const std::vector<Tensor>* groups[] = {&g_price, &g_delta};
        const double norm = global_norm(groups);
        if (norm > cfg.clip_norm) {
          const double s = cfg.clip_norm / norm;
          for (auto* gs : {&g_price, &g_delta})
            for (Tensor& g : *gs)
              for (double& v : g.values()) v *= s;
        }
      }
      auto pp = res.price_net.parameters();
      auto dp = res.delta_net.parameters();
      adam_step(adam_price, pp, g_price, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps);
      adam_step(adam_delta, dp, g_delta, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps);
      stats.loss += sum_loss * inv_steps;
      stats.price_term += sum_price * inv_steps;
      stats.delta_term += sum_delta * inv_steps;
      ++batches;
    }
    stats.loss /= static_cast<double>(batches);
    stats.price_term /= static_cast<double>(batches);
    stats.delta_term /= static_cast<double>(batches);
    stats.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - e0).count();
    res.history.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  res.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  res.peak_bytes = memory::peak_bytes() - std::min(base_live, memory::peak_bytes());
  return res;
}

inline void write_loss_csv(const std::vector<EpochStats>& history, const std::string& file) {
  std::ofstream os(file);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file);
  os.precision(17);
  os << "epoch,loss,price_term,delta_term,wall_ms\n";
  for (const auto& e : history)
    os << e.epoch << ',' << e.loss << ',' << e.price_term << ',' << e.delta_term << ','
       << e.wall_ms << '\n';
}

}  // namespace amgru
