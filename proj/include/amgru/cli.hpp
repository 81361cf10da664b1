#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "amgru/baselines.hpp"
#include "amgru/config.hpp"
#include "amgru/error.hpp"
#include "amgru/evaluation.hpp"
#include "amgru/hedging.hpp"
#include "amgru/market_model.hpp"
#include "amgru/rnn_nets.hpp"
#include "amgru/training.hpp"

#ifndef AMGRU_VERSION
#define AMGRU_VERSION "0.1.0"
#endif

namespace amgru {

namespace fs = std::filesystem;

/// Exit status of a command: 0 ok, 1 invalid input, 2 runtime failure.
enum class ExitCode : int { Ok = 0, Validation = 1, Runtime = 2 };

struct CommandOptions {
  std::string subcommand;
  std::string baseline_kind;  // fd, ls or binomial
  bool quiet = false;
};

namespace detail {

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_json(const json& j, const fs::path& file) {
  std::ofstream os(file);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file.string());
  os << j.dump(2) << '\n';
}

inline json read_json(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + file.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Io, file.string() + ": " + e.what());
  }
}

/// Report envelope; everything run-dependent lives under "metadata".
inline json report(const std::string& command, const RunConfig& cfg, json result,
                   json metadata) {
  metadata["timestamp"] = utc_timestamp();
  return {{"command", command},
          {"version", AMGRU_VERSION},
          {"seed", cfg.simulation.seed},
          {"config", to_json(cfg)},
          {"result", std::move(result)},
          {"metadata", std::move(metadata)}};
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline fs::path model_dir(const RunConfig& cfg) {
  return cfg.eval.model_dir.empty() ? fs::path(cfg.outputs) : fs::path(cfg.eval.model_dir);
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx, sy += ly, sxx += lx * lx, sxy += lx * ly;
  }
  const double nn = static_cast<double>(n);
  const double den = nn * sxx - sx * sx;
  return den == 0.0 ? 0.0 : (nn * sxy - sx * sy) / den;
}

struct FdReference {
  FdSolution sol;
  double price = 0.0;
  std::vector<double> delta;
};

inline FdReference fd_reference(const RunConfig& cfg) {
  FdGrid g = cfg.baseline.fd;
  if (g.store_steps == 0) g.store_steps = cfg.option.steps;
  if (g.timesteps % g.store_steps != 0)
    g.timesteps = (g.timesteps + g.store_steps - 1) / g.store_steps * g.store_steps;
  const Market1d mk = reduce_market(cfg.market);
  FdReference ref;
  ref.sol = fd_american_1d(mk, cfg.option, g);
  ref.price = ref.sol.value_at(0, mk.s0);
  ref.delta = fd_asset_delta(ref.sol, 0, cfg.market.s0);
  return ref;
}

inline json cmd_simulate(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const PathSet p = simulate_paths(cfg.market, cfg.option, cfg.simulation.paths,
                                   cfg.simulation.seed, static_cast<unsigned>(cfg.threads));
  const fs::path out = fs::path(cfg.outputs) / "paths.bin";
  write_pathset(p, out.string());
  const json result = {{"paths", p.paths()},
                       {"steps", p.steps()},
                       {"d", p.dim()},
                       {"bytes", p.bytes()},
                       {"negative_prices", p.negative_price_count()},
                       {"file", "paths.bin"}};
  return report("simulate", cfg, result, {{"wall_ms", elapsed_ms(t0)}});
}

inline json cmd_train(const RunConfig& cfg, bool quiet) {
  const auto t0 = std::chrono::steady_clock::now();
  const PathSet p = simulate_paths(cfg.market, cfg.option, cfg.simulation.paths,
                                   cfg.simulation.seed, static_cast<unsigned>(cfg.threads));
  const TrainResult tr = train(p, cfg.option, cfg.market, cfg.train, [&](const EpochStats& e) {
    if (!quiet)
      std::cerr << "epoch " << e.epoch + 1 << "/" << cfg.train.epochs << " loss " << e.loss
                << " (" << e.wall_ms << " ms)\n";
  });
  const fs::path out(cfg.outputs);
  save_network(tr.price_net, (out / "price_net.bin").string());
  save_network(tr.delta_net, (out / "delta_net.bin").string());
  write_loss_csv(tr.history, (out / "loss.csv").string());
  write_json({{"format", "RNNSTATE1"},
              {"layers", tr.price_net.depth()},
              {"d", tr.price_net.d},
              {"hidden", tr.price_net.hidden},
              {"alpha", tr.price_net.blend()},
              {"beta", tr.delta_net.blend()},
              {"seed", cfg.train.seed}},
             out / "networks.json");
  json result = {{"epochs", tr.history.size()},
                 {"batches_per_epoch",
                  (p.paths() + cfg.train.batch_size - 1) / cfg.train.batch_size},
                 {"final_loss", tr.history.empty() ? 0.0 : tr.history.back().loss},
                 {"price_blend", tr.price_net.blend()},
                 {"delta_blend", tr.delta_net.blend()},
                 {"parameters", tr.price_net.parameter_count() + tr.delta_net.parameter_count()},
                 {"peak_working_bytes", tr.peak_bytes},
                 {"path_bytes", p.bytes()},
                 {"files", {"price_net.bin", "delta_net.bin", "networks.json", "loss.csv"}}};
  return report("train", cfg, result,
                {{"wall_ms", elapsed_ms(t0)}, {"train_ms", tr.wall_ms}});
}

inline json cmd_evaluate(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = model_dir(cfg);
  const NetworkState pn = load_network((dir / "price_net.bin").string());
  const NetworkState dn = load_network((dir / "delta_net.bin").string());
  const PathSet p = simulate_paths(cfg.market, cfg.option, cfg.eval.paths, cfg.eval.seed,
                                   static_cast<unsigned>(cfg.threads));
  EvalOptions opt;
  opt.stopping_mode = cfg.train.stopping_mode;
  opt.hidden_carry = cfg.train.hidden_carry;
  opt.batch_size = cfg.eval.batch_size;
  EvalResult ev = evaluate(p, cfg.option, cfg.market, pn, dn, opt);
  EvalReport& rep = ev.report;

  json result = {{"price0", rep.price0},
                 {"price0_std", rep.price0_std},
                 {"delta0", rep.delta0},
                 {"stopping_mode", to_string(rep.stopping_mode)},
                 {"peak_working_bytes", rep.peak_bytes}};
  std::vector<std::uint8_t> truth;
  const std::string& ref = cfg.eval.reference;
  if (ref == "fd") {
    const FdReference fr = fd_reference(cfg);
    truth = fd_truth_labels(p, fr.sol);
    const PercentErrors pe = percent_errors(rep.price0, rep.delta0, fr.price, fr.delta);
    rep.pct_err_price = pe.price;
    rep.pct_err_delta = pe.delta;
    rep.f1 = f1_score(ev.spacetime.labels, truth);
    result["reference"] = {{"source", "fd"}, {"price", fr.price}, {"delta", fr.delta}};
  } else if (ref != "none") {
    const json r = read_json(ref);
    if (!r.contains("price") || !r.contains("delta"))
      throw ValidationError("eval.reference", "file needs price and delta");
    const auto rd = r.at("delta").get<std::vector<double>>();
    const PercentErrors pe = percent_errors(rep.price0, rep.delta0, r.at("price").get<double>(), rd);
    rep.pct_err_price = pe.price;
    rep.pct_err_delta = pe.delta;
    result["reference"] = {{"source", ref}, {"price", r.at("price")}, {"delta", rd}};
  }
  if (rep.pct_err_price) result["pct_err_price"] = *rep.pct_err_price;
  if (rep.pct_err_delta) result["pct_err_delta"] = *rep.pct_err_delta;
  if (rep.f1) result["f1"] = *rep.f1;
  const fs::path out(cfg.outputs);
  write_boundary_csv(p, ev.spacetime, truth.empty() ? nullptr : &truth,
                     (out / "boundary.csv").string(), 2000);
  result["files"] = {"eval_report.json", "boundary.csv"};
  return report("evaluate", cfg, result,
                {{"wall_ms", elapsed_ms(t0)}, {"eval_ms", rep.wall_ms}});
}

inline json cmd_hedge(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  std::unique_ptr<HedgeProvider> provider;
  switch (cfg.hedge.provider) {
    case ProviderKind::RnnNets: {
      const fs::path dir = model_dir(cfg);
      EvalOptions opt;
      opt.stopping_mode = cfg.train.stopping_mode;
      opt.hidden_carry = cfg.train.hidden_carry;
      opt.batch_size = cfg.eval.batch_size;
      provider = std::make_unique<RnnProvider>(load_network((dir / "price_net.bin").string()),
                                               load_network((dir / "delta_net.bin").string()),
                                               opt);
      break;
    }
    case ProviderKind::FiniteDifference:
      provider = std::make_unique<FdProvider>(cfg.baseline.fd);
      break;
    case ProviderKind::LongstaffSchwartz:
      provider = std::make_unique<LsProvider>(cfg.hedge.ls_paths, cfg.baseline.ls_seed,
                                              cfg.baseline.ls_degree);
      break;
    case ProviderKind::ClosedForm:
      provider = std::make_unique<ClosedFormProvider>();
      break;
  }
  const HedgeResult hr = hedge(*provider, cfg.option, cfg.market, cfg.hedge.intervals,
                               cfg.hedge.paths, cfg.hedge.seed,
                               static_cast<unsigned>(cfg.threads));
  const fs::path out(cfg.outputs);
  {
    std::ofstream os(out / "pnl.csv");
    if (!os) throw Error(ErrorKind::Io, "cannot open pnl.csv");
    os.precision(17);
    os << "m,relative_pnl\n";
    for (std::size_t m = 0; m < hr.pnl.size(); ++m) os << m << ',' << hr.pnl[m] << '\n';
  }
  write_histogram_csv(hr.pnl, cfg.hedge.bins, (out / "histogram.csv").string());
  json summary = summary_json(hr);
  write_json(summary, out / "hedge_summary.json");
  summary["files"] = {"pnl.csv", "histogram.csv", "hedge_summary.json"};
  return report("hedge", cfg, summary, {{"wall_ms", elapsed_ms(t0)}});
}

inline json cmd_baseline(const RunConfig& cfg, const std::string& kind) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out(cfg.outputs);
  json result;
  if (kind == "fd") {
    const FdReference fr = fd_reference(cfg);
    write_fd_csv(fr.sol, (out / "fd_curve.csv").string());
    result = {{"method", "fd"},
              {"price", fr.price},
              {"delta", fr.delta},
              {"boundary_t0", std::isnan(fr.sol.boundary[0]) ? json(nullptr)
                                                                : json(fr.sol.boundary[0])},
              {"files", {"fd_curve.csv", "baseline_fd.json"}}};
  } else if (kind == "binomial") {
    const Market1d mk = reduce_market(cfg.market);
    result = {{"method", "binomial"},
              {"steps", cfg.baseline.binomial_steps},
              {"price", binomial_american(mk, cfg.option, cfg.baseline.binomial_steps)},
              {"european_price",
               binomial_american(mk, cfg.option, cfg.baseline.binomial_steps, false)},
              {"files", {"baseline_binomial.json"}}};
  } else if (kind == "ls") {
    const PathSet p = simulate_paths(cfg.market, cfg.option, cfg.baseline.ls_paths,
                                     cfg.baseline.ls_seed, static_cast<unsigned>(cfg.threads));
    const LsResult ls = longstaff_schwartz(p, cfg.option, cfg.market, cfg.baseline.ls_degree);
    result = {{"method", "ls"},
              {"paths", p.paths()},
              {"degree", cfg.baseline.ls_degree},
              {"price", ls.price0},
              {"price_std", ls.price0_std},
              {"delta", ls.delta0},
              {"delta_std", ls.delta0_std},
              {"files", {"baseline_ls.json"}}};
  } else {
    throw ValidationError("baseline", "kind must be fd, ls or binomial");
  }
  return report("baseline", cfg, result, {{"wall_ms", elapsed_ms(t0)}});
}

inline json cmd_bench(const RunConfig& cfg, bool quiet) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out(cfg.outputs);
  std::ofstream csv(out / "bench.csv");
  if (!csv) throw Error(ErrorKind::Io, "cannot open bench.csv");
  csv.precision(17);
  csv << "N,train_ms,eval_ms,peak_bytes\n";
  std::vector<double> ns, train_ms;
  json rows = json::array();
  for (std::size_t steps : cfg.bench.steps) {
    OptionSpec spec = cfg.option;
    spec.steps = steps;
    spec.kappa_override = 2.0 * static_cast<double>(steps) / spec.maturity;
    const PathSet p = simulate_paths(cfg.market, spec, cfg.bench.paths, cfg.simulation.seed,
                                     static_cast<unsigned>(cfg.threads));
    TrainConfig tc = cfg.train;
    tc.epochs = cfg.bench.epochs;
    const TrainResult tr = train(p, spec, cfg.market, tc);
    EvalOptions opt;
    opt.stopping_mode = tc.stopping_mode;
    opt.hidden_carry = tc.hidden_carry;
    opt.batch_size = cfg.eval.batch_size;
    const EvalResult ev = evaluate(p, spec, cfg.market, tr.price_net, tr.delta_net, opt);
    csv << steps << ',' << tr.wall_ms << ',' << ev.report.wall_ms << ',' << tr.peak_bytes << '\n';
    if (!quiet)
      std::cerr << "bench N=" << steps << " train " << tr.wall_ms << " ms, eval "
                << ev.report.wall_ms << " ms, peak " << tr.peak_bytes << " B\n";
    ns.push_back(static_cast<double>(steps));
    train_ms.push_back(tr.wall_ms);
    rows.push_back({{"N", steps}, {"peak_bytes", tr.peak_bytes}});
  }
  const json result = {{"rows", rows}, {"files", {"bench.csv"}}};
  return report("bench", cfg, result,
                {{"wall_ms", elapsed_ms(t0)},
                 {"train_ms", train_ms},
                 {"train_time_loglog_slope", loglog_slope(ns, train_ms)}});
}

}  // namespace detail

inline json error_json(const std::exception& e) {
  json j = {{"error", {{"message", e.what()}}}};
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    j["error"]["kind"] = std::string(to_string(err->kind()));
    if (const auto* v = dynamic_cast<const ValidationError*>(&e)) j["error"]["field"] = v->field();
  } else {
    j["error"]["kind"] = "Runtime";
  }
  return j;
}

inline ExitCode exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e))
    return err->kind() == ErrorKind::Validation ? ExitCode::Validation : ExitCode::Runtime;
  return ExitCode::Runtime;
}

/// Runs one subcommand and writes its report into cfg.outputs. Returns the
/// report; errors propagate as exceptions.
inline json run_command(const CommandOptions& opt, const RunConfig& cfg) {
  fs::create_directories(cfg.outputs);
  const fs::path out(cfg.outputs);
  json rep;
  std::string file;
  if (opt.subcommand == "simulate") {
    rep = detail::cmd_simulate(cfg);
    file = "simulate_report.json";
  } else if (opt.subcommand == "train") {
    rep = detail::cmd_train(cfg, opt.quiet);
    file = "train_report.json";
  } else if (opt.subcommand == "evaluate") {
    rep = detail::cmd_evaluate(cfg);
    file = "eval_report.json";
  } else if (opt.subcommand == "hedge") {
    rep = detail::cmd_hedge(cfg);
    file = "hedge_report.json";
  } else if (opt.subcommand == "baseline") {
    rep = detail::cmd_baseline(cfg, opt.baseline_kind);
    file = "baseline_" + opt.baseline_kind + ".json";
  } else if (opt.subcommand == "bench") {
    rep = detail::cmd_bench(cfg, opt.quiet);
    file = "bench.json";
  } else {
    throw ValidationError("command", "unknown subcommand '" + opt.subcommand + "'");
  }
  detail::write_json(rep, out / file);
  return rep;
}

/// Applies --seed: every stream derives from the base seed.
inline void override_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.simulation.seed = seed;
  cfg.train.seed = seed;
  cfg.eval.seed = seed + 1;
  cfg.hedge.seed = seed + 2;
  cfg.baseline.ls_seed = seed + 3;
}

}  // namespace amgru
