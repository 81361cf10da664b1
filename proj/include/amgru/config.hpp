#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "amgru/baselines.hpp"
#include "amgru/bsde_targets.hpp"
#include "amgru/error.hpp"
#include "amgru/hedging.hpp"
#include "amgru/market_model.hpp"
#include "amgru/training.hpp"

namespace amgru {

using json = nlohmann::json;

struct SimulationConfig {
  std::size_t paths = 50000;
  std::uint64_t seed = 1;
};

struct EvalConfig {
  std::size_t paths = 50000;
  std::uint64_t seed = 2;
  std::size_t batch_size = 100000;
  std::string reference = "none";  // "none", "fd" or a JSON file with price and delta
  std::string model_dir;           // empty: the output directory
};

struct HedgeConfig {
  std::size_t intervals = 250;
  std::size_t paths = 20000;
  std::uint64_t seed = 3;
  ProviderKind provider = ProviderKind::RnnNets;
  std::size_t ls_paths = 50000;
  std::size_t bins = 50;
};

struct BaselineConfig {
  FdGrid fd;
  std::size_t binomial_steps = 10000;
  unsigned ls_degree = 4;
  std::size_t ls_paths = 100000;
  std::uint64_t ls_seed = 4;
};

struct BenchConfig {
  std::vector<std::size_t> steps{25, 50, 100, 200};
  std::size_t paths = 2000;
  std::size_t epochs = 2;
};

struct RunConfig {
  MarketParams market;
  OptionSpec option;
  SimulationConfig simulation;
  TrainConfig train;
  EvalConfig eval;
  HedgeConfig hedge;
  BaselineConfig baseline;
  BenchConfig bench;
  std::string outputs = "out";
  std::size_t threads = 1;
};

namespace detail {

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(path + "." + key, "has the wrong type");
  }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys,
                           const std::string& path) {
  if (!j.is_object()) throw ValidationError(path, "must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw ValidationError(path + "." + k, "unknown field");
  }
}

// Scalar broadcast to length d, or an explicit array of length d.
inline std::vector<double> vector_field(const json& j, const char* key, std::size_t d,
                                        double fallback, const std::string& path) {
  const std::string field = path + "." + key;
  if (!j.contains(key)) return std::vector<double>(d, fallback);
  const json& v = j.at(key);
  if (v.is_number()) return std::vector<double>(d, v.get<double>());
  if (!v.is_array() || v.size() != d)
    throw ValidationError(field, "must be a number or an array of length " + std::to_string(d));
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) throw ValidationError(field, "entries must be numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

// Scalar equicorrelation, flat row-major array of d*d, or nested d x d matrix.
inline Tensor rho_field(const json& j, std::size_t d, const std::string& path) {
  const std::string field = path + ".rho";
  Tensor rho = Tensor::identity(d);
  if (!j.contains("rho")) return rho;
  const json& v = j.at("rho");
  auto number = [&](const json& x) {
    if (!x.is_number()) throw ValidationError(field, "entries must be numbers");
    return x.get<double>();
  };
  if (v.is_number()) {
    const double c = v.get<double>();
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        if (a != b) rho(a, b) = c;
    return rho;
  }
  if (!v.is_array()) throw ValidationError(field, "must be a number, an array or a matrix");
  if (v.size() == d * d && (d == 1 || !v[0].is_array())) {
    for (std::size_t k = 0; k < d * d; ++k) rho(k / d, k % d) = number(v[k]);
    return rho;
  }
  if (v.size() != d) throw ValidationError(field, "must be d x d");
  for (std::size_t a = 0; a < d; ++a) {
    if (!v[a].is_array() || v[a].size() != d) throw ValidationError(field, "must be d x d");
    for (std::size_t b = 0; b < d; ++b) rho(a, b) = number(v[a][b]);
  }
  return rho;
}

inline PayoffKind payoff_from_string(const std::string& s) {
  if (s == "geometric_call") return PayoffKind::GeometricAverageCall;
  if (s == "max_call") return PayoffKind::MaxCall;
  if (s == "geometric_put") return PayoffKind::GeometricAveragePut;
  throw ValidationError("option.payoff", "unknown payoff '" + s + "'");
}

inline std::string payoff_name(PayoffKind k) {
  switch (k) {
    case PayoffKind::GeometricAverageCall: return "geometric_call";
    case PayoffKind::MaxCall: return "max_call";
    case PayoffKind::GeometricAveragePut: return "geometric_put";
  }
  return "unknown";
}

inline json matrix_json(const Tensor& t) {
  json out = json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < t.cols(); ++j) row.push_back(t(i, j));
    out.push_back(row);
  }
  return out;
}

}  // namespace detail

inline RunConfig parse_config(const json& doc) {
  using detail::get_or;
  RunConfig c;
  detail::reject_unknown(doc, {"schema", "market", "option", "simulation", "train", "eval",
                               "hedge", "baseline", "bench", "outputs", "threads"},
                         "config");
  if (!doc.contains("schema") || !doc.at("schema").is_number_integer() ||
      doc.at("schema").get<int>() != 1)
    throw ValidationError("schema", "must be 1");
  if (!doc.contains("market")) throw ValidationError("market", "is required");
  if (!doc.contains("option")) throw ValidationError("option", "is required");

  const json& mk = doc.at("market");
  detail::reject_unknown(mk, {"d", "r", "dividends", "sigma", "rho", "s0"}, "market");
  const auto d = get_or<std::size_t>(mk, "d", 0, "market");
  if (d < 1) throw ValidationError("market.d", "must be >= 1");
  c.market.d = d;
  c.market.r = get_or<double>(mk, "r", 0.0, "market");
  c.market.dividends = detail::vector_field(mk, "dividends", d, 0.0, "market");
  c.market.sigma = detail::vector_field(mk, "sigma", d, 0.2, "market");
  c.market.s0 = detail::vector_field(mk, "s0", d, 100.0, "market");
  c.market.rho = detail::rho_field(mk, d, "market");
  validate(c.market);

  const json& op = doc.at("option");
  detail::reject_unknown(op, {"payoff", "strike", "maturity", "steps", "kappa"}, "option");
  c.option.payoff_kind =
      detail::payoff_from_string(get_or<std::string>(op, "payoff", "geometric_call", "option"));
  c.option.strike = get_or<double>(op, "strike", 100.0, "option");
  c.option.maturity = get_or<double>(op, "maturity", 1.0, "option");
  c.option.steps = get_or<std::size_t>(op, "steps", 50, "option");
  if (op.contains("kappa")) c.option.kappa_override = get_or<double>(op, "kappa", 0.0, "option");
  validate(c.option);
  if (!c.option.kappa_override)
    c.option.kappa_override = 2.0 * static_cast<double>(c.option.steps) / c.option.maturity;

  if (doc.contains("simulation")) {
    const json& s = doc.at("simulation");
    detail::reject_unknown(s, {"paths", "seed"}, "simulation");
    c.simulation.paths = get_or(s, "paths", c.simulation.paths, "simulation");
    c.simulation.seed = get_or(s, "seed", c.simulation.seed, "simulation");
  }
  if (c.simulation.paths < 1) throw ValidationError("simulation.paths", "must be >= 1");

  if (doc.contains("train")) {
    const json& t = doc.at("train");
    detail::reject_unknown(t, {"epochs", "batch_size", "learning_rate", "adam_beta1",
                               "adam_beta2", "adam_eps", "seed", "stopping_mode", "layers",
                               "clip_norm", "full_bptt", "hidden_carry"},
                           "train");
    TrainConfig& tc = c.train;
    tc.epochs = get_or(t, "epochs", tc.epochs, "train");
    tc.batch_size = get_or(t, "batch_size", tc.batch_size, "train");
    tc.learning_rate = get_or(t, "learning_rate", tc.learning_rate, "train");
    tc.adam_beta1 = get_or(t, "adam_beta1", tc.adam_beta1, "train");
    tc.adam_beta2 = get_or(t, "adam_beta2", tc.adam_beta2, "train");
    tc.adam_eps = get_or(t, "adam_eps", tc.adam_eps, "train");
    tc.seed = get_or(t, "seed", tc.seed, "train");
    tc.layers = get_or(t, "layers", tc.layers, "train");
    tc.clip_norm = get_or(t, "clip_norm", tc.clip_norm, "train");
    tc.full_bptt = get_or(t, "full_bptt", tc.full_bptt, "train");
    if (t.contains("stopping_mode"))
      tc.stopping_mode = stopping_mode_from_string(get_or<std::string>(t, "stopping_mode", "", "train"));
    if (t.contains("hidden_carry"))
      tc.hidden_carry = hidden_carry_from_string(get_or<std::string>(t, "hidden_carry", "", "train"));
  }
  validate(c.train);

  if (doc.contains("eval")) {
    const json& e = doc.at("eval");
    detail::reject_unknown(e, {"paths", "seed", "batch_size", "reference", "model_dir"}, "eval");
    c.eval.paths = get_or(e, "paths", c.eval.paths, "eval");
    c.eval.seed = get_or(e, "seed", c.eval.seed, "eval");
    c.eval.batch_size = get_or(e, "batch_size", c.eval.batch_size, "eval");
    c.eval.reference = get_or(e, "reference", c.eval.reference, "eval");
    c.eval.model_dir = get_or(e, "model_dir", c.eval.model_dir, "eval");
  }
  if (c.eval.paths < 1) throw ValidationError("eval.paths", "must be >= 1");
  if (c.eval.batch_size < 1) throw ValidationError("eval.batch_size", "must be >= 1");

  if (doc.contains("hedge")) {
    const json& h = doc.at("hedge");
    detail::reject_unknown(h, {"intervals", "paths", "seed", "provider", "ls_paths", "bins"},
                           "hedge");
    c.hedge.intervals = get_or(h, "intervals", c.hedge.intervals, "hedge");
    c.hedge.paths = get_or(h, "paths", c.hedge.paths, "hedge");
    c.hedge.seed = get_or(h, "seed", c.hedge.seed, "hedge");
    c.hedge.ls_paths = get_or(h, "ls_paths", c.hedge.ls_paths, "hedge");
    c.hedge.bins = get_or(h, "bins", c.hedge.bins, "hedge");
    if (h.contains("provider"))
      c.hedge.provider = provider_from_string(get_or<std::string>(h, "provider", "", "hedge"));
  }
  if (c.hedge.intervals < 1) throw ValidationError("hedge.intervals", "must be >= 1");
  if (c.hedge.paths < 2) throw ValidationError("hedge.paths", "must be >= 2");
  if (c.hedge.bins < 1) throw ValidationError("hedge.bins", "must be >= 1");

  if (doc.contains("baseline")) {
    const json& b = doc.at("baseline");
    detail::reject_unknown(b, {"fd", "binomial_steps", "ls_degree", "ls_paths", "ls_seed"},
                           "baseline");
    c.baseline.binomial_steps = get_or(b, "binomial_steps", c.baseline.binomial_steps, "baseline");
    c.baseline.ls_degree = get_or(b, "ls_degree", c.baseline.ls_degree, "baseline");
    c.baseline.ls_paths = get_or(b, "ls_paths", c.baseline.ls_paths, "baseline");
    c.baseline.ls_seed = get_or(b, "ls_seed", c.baseline.ls_seed, "baseline");
    if (b.contains("fd")) {
      const json& f = b.at("fd");
      detail::reject_unknown(f, {"s_min", "s_max", "nodes", "timesteps", "theta", "penalty",
                                 "rannacher", "american", "store_steps"},
                             "baseline.fd");
      FdGrid& g = c.baseline.fd;
      g.s_min = get_or(f, "s_min", g.s_min, "baseline.fd");
      g.s_max = get_or(f, "s_max", g.s_max, "baseline.fd");
      g.nodes = get_or(f, "nodes", g.nodes, "baseline.fd");
      g.timesteps = get_or(f, "timesteps", g.timesteps, "baseline.fd");
      g.theta = get_or(f, "theta", g.theta, "baseline.fd");
      g.penalty = get_or(f, "penalty", g.penalty, "baseline.fd");
      g.rannacher = get_or(f, "rannacher", g.rannacher, "baseline.fd");
      g.american = get_or(f, "american", g.american, "baseline.fd");
      g.store_steps = get_or(f, "store_steps", g.store_steps, "baseline.fd");
    }
  }
  if (c.baseline.fd.nodes < 3) throw ValidationError("baseline.fd.nodes", "must be >= 3");
  if (c.baseline.binomial_steps < 1)
    throw ValidationError("baseline.binomial_steps", "must be >= 1");

  if (doc.contains("bench")) {
    const json& b = doc.at("bench");
    detail::reject_unknown(b, {"steps", "paths", "epochs"}, "bench");
    c.bench.steps = get_or(b, "steps", c.bench.steps, "bench");
    c.bench.paths = get_or(b, "paths", c.bench.paths, "bench");
    c.bench.epochs = get_or(b, "epochs", c.bench.epochs, "bench");
  }
  if (c.bench.steps.empty()) throw ValidationError("bench.steps", "must not be empty");
  for (std::size_t n : c.bench.steps)
    if (n < 1) throw ValidationError("bench.steps", "entries must be >= 1");

  c.outputs = get_or(doc, "outputs", c.outputs, "config");
  c.threads = get_or(doc, "threads", c.threads, "config");
  if (c.threads < 1) throw ValidationError("threads", "must be >= 1");
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError("config", std::string("parse error: ") + e.what());
  }
  return parse_config(doc);
}

inline RunConfig load_config(const std::string& file) {
  std::ifstream is(file);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + file);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// Normalized form with every default filled in.
inline json to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  const FdGrid& g = c.baseline.fd;
  return {
      {"schema", 1},
      {"market",
       {{"d", c.market.d},
        {"r", c.market.r},
        {"dividends", c.market.dividends},
        {"sigma", c.market.sigma},
        {"rho", detail::matrix_json(c.market.rho)},
        {"s0", c.market.s0}}},
      {"option",
       {{"payoff", detail::payoff_name(c.option.payoff_kind)},
        {"strike", c.option.strike},
        {"maturity", c.option.maturity},
        {"steps", c.option.steps},
        {"kappa", c.option.kappa()}}},
      {"simulation", {{"paths", c.simulation.paths}, {"seed", c.simulation.seed}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"adam_beta1", t.adam_beta1},
        {"adam_beta2", t.adam_beta2},
        {"adam_eps", t.adam_eps},
        {"seed", t.seed},
        {"stopping_mode", to_string(t.stopping_mode)},
        {"layers", t.layers},
        {"clip_norm", t.clip_norm},
        {"full_bptt", t.full_bptt},
        {"hidden_carry", to_string(t.hidden_carry)}}},
      {"eval",
       {{"paths", c.eval.paths},
        {"seed", c.eval.seed},
        {"batch_size", c.eval.batch_size},
        {"reference", c.eval.reference},
        {"model_dir", c.eval.model_dir}}},
      {"hedge",
       {{"intervals", c.hedge.intervals},
        {"paths", c.hedge.paths},
        {"seed", c.hedge.seed},
        {"provider", to_string(c.hedge.provider)},
        {"ls_paths", c.hedge.ls_paths},
        {"bins", c.hedge.bins}}},
      {"baseline",
       {{"fd",
         {{"s_min", g.s_min},
          {"s_max", g.s_max},
          {"nodes", g.nodes},
          {"timesteps", g.timesteps},
          {"theta", g.theta},
          {"penalty", g.penalty},
          {"rannacher", g.rannacher},
          {"american", g.american},
          {"store_steps", g.store_steps}}},
        {"binomial_steps", c.baseline.binomial_steps},
        {"ls_degree", c.baseline.ls_degree},
        {"ls_paths", c.baseline.ls_paths},
        {"ls_seed", c.baseline.ls_seed}}},
      {"bench",
       {{"steps", c.bench.steps}, {"paths", c.bench.paths}, {"epochs", c.bench.epochs}}},
      {"outputs", c.outputs},
      {"threads", c.threads}};
}

}  // namespace amgru
