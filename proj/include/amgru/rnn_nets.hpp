#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "amgru/autodiff.hpp"
#include "amgru/error.hpp"
#include "amgru/market_model.hpp"
#include "amgru/random.hpp"
#include "amgru/tensor.hpp"

namespace amgru {

enum class Head { Softplus, Sigmoid };

inline std::string to_string(Head h) { return h == Head::Softplus ? "softplus" : "sigmoid"; }

struct GruLayerParams {
  Tensor w_r, w_z, w_h;  // (H + input) x H
  Tensor b_r, b_z, b_h;  // 1 x H
};

/// All trainable weights of one network. `blend_raw` is 1x1; its sigmoid is
/// alpha for the price net and beta for the delta net.
struct NetworkState {
  std::size_t d = 0;
  std::size_t hidden = 0;
  Head head = Head::Softplus;
  std::uint64_t seed = 0;
  std::vector<GruLayerParams> layers;
  Tensor w_e, b_e;      // H x H, 1 x H
  Tensor w_out, b_out;  // H x d, 1 x d
  Tensor blend_raw = Tensor(1, 1);

  std::size_t input_width() const noexcept { return 2 * d; }
  std::size_t depth() const noexcept { return layers.size(); }
  double blend() const { return logistic(blend_raw(0, 0)); }

  /// Parameters in declaration order.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers)
      for (Tensor* t : {&l.w_r, &l.w_z, &l.w_h, &l.b_r, &l.b_z, &l.b_h}) out.push_back(t);
    for (Tensor* t : {&w_e, &b_e, &w_out, &b_out, &blend_raw}) out.push_back(t);
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (auto* t : const_cast<NetworkState*>(this)->parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
  }

  friend bool operator==(const NetworkState& a, const NetworkState& b) {
    if (a.d != b.d || a.hidden != b.hidden || a.head != b.head || a.depth() != b.depth())
      return false;
    auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
      if (!(*pa[i] == *pb[i])) return false;
    return true;
  }
};

/// Xavier-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases,
/// blend_raw = 0. Hidden width is 2d.
inline NetworkState init_weights(std::size_t d, std::size_t depth, Head head, std::uint64_t seed) {
  if (d < 1) throw ValidationError("network.d", "must be >= 1");
  if (depth < 1) throw ValidationError("train.layers", "must be >= 1");
  NetworkState s;
  s.d = d;
  s.hidden = 2 * d;
  s.head = head;
  s.seed = seed;
  const std::size_t h = s.hidden, in = s.input_width();
  s.layers.resize(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t rows = h + (l == 0 ? in : h);
    auto& L = s.layers[l];
    L.w_r = Tensor(rows, h);
    L.w_z = Tensor(rows, h);
    L.w_h = Tensor(rows, h);
    L.b_r = Tensor(1, h);
    L.b_z = Tensor(1, h);
    L.b_h = Tensor(1, h);
  }
  s.w_e = Tensor(h, h);
  s.b_e = Tensor(1, h);
  s.w_out = Tensor(h, d);
  s.b_out = Tensor(1, d);

  const Philox4x32 gen(seed);
  std::uint32_t index = 0;
  for (Tensor* t : s.parameters()) {
    ++index;
    if (t->rows() == 1) continue;  // biases and blend stay zero
    const double bound = std::sqrt(6.0 / static_cast<double>(t->rows() + t->cols()));
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double u = uniform_at(gen, index, static_cast<std::uint32_t>(i),
                                  static_cast<std::uint32_t>(head == Head::Sigmoid), 0x5EEDu);
      (*t)[i] = bound * (2.0 * u - 1.0);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Tape binding
// ---------------------------------------------------------------------------

/// A NetworkState copied onto a tape as leaf nodes.
struct NetVars {
  std::vector<ad::GruVars> layers;
  ad::Var w_e, b_e, w_out, b_out, blend_raw;
  std::vector<ad::Var> all;  // same order as NetworkState::parameters()
};

inline NetVars bind(ad::Tape& tape, const NetworkState& s, bool requires_grad = true) {
  NetVars v;
  auto leaf = [&](const Tensor& t) {
    ad::Var x = tape.leaf(t, requires_grad);
    v.all.push_back(x);
    return x;
  };
  for (const auto& l : s.layers) {
    ad::GruVars g;
    g.w_r = leaf(l.w_r);
    g.w_z = leaf(l.w_z);
    g.w_h = leaf(l.w_h);
    g.b_r = leaf(l.b_r);
    g.b_z = leaf(l.b_z);
    g.b_h = leaf(l.b_h);
    v.layers.push_back(g);
  }
  v.w_e = leaf(s.w_e);
  v.b_e = leaf(s.b_e);
  v.w_out = leaf(s.w_out);
  v.b_out = leaf(s.b_out);
  v.blend_raw = leaf(s.blend_raw);
  return v;
}

/// Adds the tape gradients of every bound parameter into `acc`.
inline void accumulate_grads(const ad::Tape& tape, const NetVars& v, std::vector<Tensor>& acc) {
  if (acc.empty()) {
    for (ad::Var p : v.all) acc.emplace_back(p.rows(), p.cols());
  }
  for (std::size_t i = 0; i < v.all.size(); ++i) {
    const Tensor g = tape.grad(v.all[i]);
    for (std::size_t k = 0; k < g.size(); ++k) acc[i][k] += g[k];
  }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

inline ad::Var gru_cell(const ad::GruVars& p, ad::Var h_prev, ad::Var x) {
  return ad::gru_cell_fused(p, h_prev, x);
}

struct DeepOutput {
  ad::Var output;  // M x d, after the head activation
  ad::Var hidden;  // M x H, top layer
};

/// L stacked GRU cells. Every layer sees the previous top-layer hidden
/// state; layer 1 takes x, layer l > 1 takes layer l-1's output.
inline DeepOutput deep_forward(const NetVars& v, Head head, ad::Var h_prev, ad::Var x) {
  ad::Var input = x;
  ad::Var h = h_prev;
  for (const auto& layer : v.layers) {
    h = gru_cell(layer, h_prev, input);
    input = h;
  }
  ad::Var e = ad::swish(ad::row_broadcast_add(ad::matmul(h, v.w_e), v.b_e));
  ad::Var o = ad::row_broadcast_add(ad::matmul(e, v.w_out), v.b_out);
  o = head == Head::Softplus ? ad::softplus(o) : ad::sigmoid(o);
  return {o, h};
}

struct StepOutput {
  ad::Var y;       // blended estimate
  ad::Var net;     // raw head output (F or G)
  ad::Var hidden;  // top-layer hidden state
};

/// y^n = (1 - alpha) e^{-r dt} c^{n+1} + alpha F, with F the mean of the d
/// softplus head outputs.
inline StepOutput price_net_step(const NetVars& v, ad::Var h_prev, ad::Var x, ad::Var c_next,
                                 double discount) {
  ad::Tape& t = *x.tape;
  DeepOutput o = deep_forward(v, Head::Softplus, h_prev, x);
  const Tensor& ov = o.output.value();
  require_shape(c_next.value(), ov.rows(), 1, "price_net_step c_next");
  Tensor sel(ov.cols(), 1, 1.0 / static_cast<double>(ov.cols()));
  ad::Var f = ad::matmul(o.output, t.constant(std::move(sel)));
  ad::Var base = ad::scale(c_next, discount);
  ad::Var alpha = ad::sigmoid(v.blend_raw);
  ad::Var y = ad::add(base, ad::mul_scalar(ad::sub(f, base), alpha));
  return {y, f, o.hidden};
}

/// grad y^n = (1 - beta) e^{-r dt} grad c^{n+1} * S^{n+1}/S^n + beta G.
inline StepOutput delta_net_step(const NetVars& v, ad::Var h_prev, ad::Var x, ad::Var dc_next,
                                 ad::Var price_ratio, double discount) {
  DeepOutput o = deep_forward(v, Head::Sigmoid, h_prev, x);
  const Tensor& ov = o.output.value();
  require_shape(dc_next.value(), ov.rows(), ov.cols(), "delta_net_step dc_next");
  require_shape(price_ratio.value(), ov.rows(), ov.cols(), "delta_net_step price_ratio");
  ad::Var base = ad::scale(ad::mul_elem(dc_next, price_ratio), discount);
  ad::Var beta = ad::sigmoid(v.blend_raw);
  ad::Var dy = ad::add(base, ad::mul_scalar(ad::sub(o.output, base), beta));
  return {dy, o.output, o.hidden};
}

/// Tiles the M x k columns until the width reaches `hidden`.
inline Tensor init_hidden(const Tensor& seed_cols, std::size_t hidden) {
  const std::size_t k = seed_cols.cols();
  require(k > 0 && hidden % k == 0, ErrorKind::ShapeMismatch,
          "init_hidden: width " + std::to_string(hidden) + " is not a multiple of " +
              std::to_string(k));
  Tensor h(seed_cols.rows(), hidden);
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t c = 0; c < hidden; ++c) h(r, c) = seed_cols(r, c % k);
  return h;
}

/// Network input X^n = [S^n, g(S^n) tiled d times], width 2d.
inline Tensor build_input(const PathSet& paths, const OptionSpec& spec, std::size_t n,
                          std::size_t begin, std::size_t count) {
  const std::size_t d = paths.dim();
  Tensor x(count, 2 * d);
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = paths.state(begin + i, n);
    const double g = payoff_g(spec, s);
    for (std::size_t k = 0; k < d; ++k) {
      x(i, k) = s[k];
      x(i, d + k) = g;
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Serialization: "RNNSTATE1", u64 d, H, L, head, f64 blend_raw, then every
// tensor as u64 rows, u64 cols, f64 data (declaration order, blend excluded).
// ---------------------------------------------------------------------------

inline void save_network(const NetworkState& s, const std::string& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file);
  os.write("RNNSTATE1", 9);
  detail::write_u64(os, s.d);
  detail::write_u64(os, s.hidden);
  detail::write_u64(os, s.depth());
  detail::write_u64(os, s.head == Head::Softplus ? 0 : 1);
  detail::write_f64(os, s.blend_raw(0, 0));
  auto params = s.parameters();
  params.pop_back();
  for (const Tensor* t : params) {
    detail::write_u64(os, t->rows());
    detail::write_u64(os, t->cols());
    for (double v : t->values()) detail::write_f64(os, v);
  }
  if (!os) throw Error(ErrorKind::Io, "write failed: " + file);
}

inline NetworkState load_network(const std::string& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + file);
  char magic[9];
  if (!is.read(magic, 9) || std::string(magic, 9) != "RNNSTATE1")
    throw Error(ErrorKind::Io, file + ": bad RNNSTATE1 header");
  const auto d = detail::read_u64(is);
  const auto hidden = detail::read_u64(is);
  const auto depth = detail::read_u64(is);
  const auto head = detail::read_u64(is);
  NetworkState s = init_weights(d, depth, head == 0 ? Head::Softplus : Head::Sigmoid, 0);
  require(s.hidden == hidden, ErrorKind::Io, file + ": hidden width mismatch");
  s.blend_raw(0, 0) = detail::read_f64(is);
  auto params = s.parameters();
  params.pop_back();
  for (Tensor* t : params) {
    const auto r = detail::read_u64(is), c = detail::read_u64(is);
    require(r == t->rows() && c == t->cols(), ErrorKind::Io,
            file + ": tensor shape mismatch, expected " + t->shape_string());
    for (double& v : t->values()) v = detail::read_f64(is);
  }
  return s;
}

}  // namespace amgru
