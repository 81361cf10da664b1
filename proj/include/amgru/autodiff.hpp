#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <algorithm>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "amgru/error.hpp"
#include "amgru/tensor.hpp"

namespace amgru::ad {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Append-only record of tensor operations. Node ids are topologically
/// ordered by construction, so backward is a single reverse sweep.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr);
  }
  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  Var push(Tensor value, bool requires_grad, Backward backward) {
    nodes_.push_back({std::move(value), Tensor{}, std::move(backward), requires_grad});
    return {this, nodes_.size() - 1};
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator for node `id`, allocated on first use.
  Tensor& grad_ref(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Gradient of the last backward() target with respect to `v`; zeros if
  /// `v` was unreachable.
  Tensor grad(Var v) const {
    const auto& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Reverse sweep from a 1x1 loss. Clears any previous gradients first, so
  /// replaying gives identical results.
  void backward(Var loss) {
    const Tensor& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1)
      throw Error(ErrorKind::NonScalarLoss, "backward: loss is " + lv.shape_string());
    for (auto& n : nodes_) n.grad = Tensor{};
    grad_ref(loss.id)(0, 0) = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;  // stable references across push
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& tape_of(Var a, Var b) {
  require(a.tape == b.tape && a.tape != nullptr, ErrorKind::ShapeMismatch,
          "operands live on different tapes");
  return *a.tape;
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw Error(ErrorKind::ShapeMismatch,
                std::string(op) + ": " + a.shape_string() + " vs " + b.shape_string());
}

// out += a * b (a: m x k, b: k x n)
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    const double* arow = pa + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out += a * b^T (a: m x n, b: k x n)
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), n = a.cols(), k = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * n;
    double* orow = out.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b.data() + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      orow[p] += s;
    }
  }
}

// out += a^T * b (a: m x k, b: m x n)
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    const double* brow = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class F, class D>
Var unary(Var a, F f, D dfdx) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id;
  return t.push(std::move(out), t.requires_grad(ia), [ia, dfdx](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_ref(self);
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(self);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows())
    throw Error(ErrorKind::ShapeMismatch,
                "matmul: " + av.shape_string() + " x " + bv.shape_string());
  Tensor out(av.rows(), bv.cols());
  detail::gemm_nn(av, bv, out);
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_ref(self);
                  if (tp.requires_grad(ia)) detail::gemm_nt(g, tp.value(ib), tp.grad_ref(ia));
                  if (tp.requires_grad(ib)) detail::gemm_tn(tp.value(ia), g, tp.grad_ref(ib));
                });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_ref(self);
                  for (std::size_t id : {ia, ib}) {
                    if (!tp.requires_grad(id)) continue;
                    Tensor& gi = tp.grad_ref(id);
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                  }
                });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_ref(self);
                  if (tp.requires_grad(ia)) {
                    Tensor& ga = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  }
                  if (tp.requires_grad(ib)) {
                    Tensor& gb = tp.grad_ref(ib);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                  }
                });
}

inline Var mul_elem(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same(a.value(), b.value(), "mul_elem");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_ref(self);
                  if (tp.requires_grad(ia)) {
                    Tensor& ga = tp.grad_ref(ia);
                    const Tensor& bv2 = tp.value(ib);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                  }
                  if (tp.requires_grad(ib)) {
                    Tensor& gb = tp.grad_ref(ib);
                    const Tensor& av2 = tp.value(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
                  }
                });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  const std::size_t ia = a.id;
  return t.push(std::move(out), t.requires_grad(ia), [ia, c](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_ref(self);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

/// a * s where s is a 1x1 node.
inline Var mul_scalar(Var a, Var s) {
  Tape& t = detail::tape_of(a, s);
  require_shape(s.value(), 1, 1, "mul_scalar");
  const double sv = s.value()(0, 0);
  Tensor out = a.value();
  for (double& v : out.values()) v *= sv;
  const std::size_t ia = a.id, is = s.id;
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(is),
                [ia, is](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_ref(self);
                  const double s2 = tp.value(is)(0, 0);
                  if (tp.requires_grad(ia)) {
                    Tensor& ga = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s2 * g[i];
                  }
                  if (tp.requires_grad(is)) {
                    const Tensor& av = tp.value(ia);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                    tp.grad_ref(is)(0, 0) += acc;
                  }
                });
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows())
    throw Error(ErrorKind::ShapeMismatch,
                "concat_cols: " + av.shape_string() + " | " + bv.shape_string());
  const std::size_t ca = av.cols(), cb = bv.cols();
  Tensor out(av.rows(), ca + cb);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  const std::size_t ia = a.id, ib = b.id;
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib, ca, cb](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_ref(self);
                  const std::size_t rows = g.rows();
                  if (tp.requires_grad(ia)) {
                    Tensor& ga = tp.grad_ref(ia);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < ca; ++c) ga(r, c) += g(r, c);
                  }
                  if (tp.requires_grad(ib)) {
                    Tensor& gb = tp.grad_ref(ib);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cb; ++c) gb(r, c) += g(r, ca + c);
                  }
                });
}

/// a (m x n) plus a 1 x n bias added to every row.
inline Var row_broadcast_add(Var a, Var bias) {
  Tape& t = detail::tape_of(a, bias);
  const Tensor& av = a.value();
  require_shape(bias.value(), 1, av.cols(), "row_broadcast_add bias");
  Tensor out = av;
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv(0, c);
  const std::size_t ia = a.id, ib = bias.id;
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad_ref(self);
                  if (tp.requires_grad(ia)) {
                    Tensor& ga = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  }
                  if (tp.requires_grad(ib)) {
                    Tensor& gb = tp.grad_ref(ib);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                      for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
                  }
                });
}

inline Var sum_all(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id;
  return t.push(Tensor(1, 1, s), t.requires_grad(ia), [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad_ref(self)(0, 0);
    for (double& v : tp.grad_ref(ia).values()) v += g;
  });
}

inline Var mean_all(Var a) {
  const auto n = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Var sigmoid(Var a) {
  return detail::unary(
      a, [](double x) { return detail::sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh_act(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

/// x * sigmoid(x)
inline Var swish(Var a) {
  return detail::unary(
      a, [](double x) { return x * detail::sigmoid(x); },
      [](double x, double) {
        const double s = detail::sigmoid(x);
        return s + x * s * (1.0 - s);
      });
}

/// ln(1 + e^x), overflow-safe.
inline Var softplus(Var a) {
  return detail::unary(
      a, [](double x) { return detail::softplus(x); },
      [](double x, double) { return detail::sigmoid(x); });
}

// ---------------------------------------------------------------------------
// Fused GRU cell
// ---------------------------------------------------------------------------

/// Weights of one GRU layer as tape nodes. Each W maps [h, x] (width
/// H + input) to H; biases are 1 x H.
struct GruVars {
  Var w_r, w_z, w_h, b_r, b_z, b_h;
};

namespace detail {

/// exp(x) for x in [-708, 709] by range reduction and a degree-13 Taylor
/// polynomial, relative error below 3e-16. Branch-free so loops over it
/// vectorise; callers clamp in a separate pass.
inline double exp_raw(double x) {
  constexpr double shifter = 0x1.8p52;
  const double t = x * 1.4426950408889634 + shifter;
  const double k = t - shifter;
  const double r = (x - k * 0.6931471803691238) - k * 1.9082149292705877e-10;
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  std::uint64_t bits;
  std::memcpy(&bits, &t, sizeof bits);
  bits = (bits + 1023) << 52;
  double scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return p * scale;
}

inline double exp_vec(double x) { return exp_raw(std::clamp(x, -708.0, 709.0)); }

inline void sigmoid_inplace(double* __restrict a, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) a[k] = std::clamp(-a[k], -708.0, 709.0);
  for (std::size_t k = 0; k < n; ++k) a[k] = 1.0 / (1.0 + exp_raw(a[k]));
}

inline void tanh_inplace(double* __restrict a, double* __restrict scratch, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) scratch[k] = std::max(-2.0 * std::abs(a[k]), -708.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double e = exp_raw(scratch[k]);
    a[k] = std::copysign((1.0 - e) / (1.0 + e), a[k]);
  }
}

struct GruRaw {
  const double *wr, *wz, *wh, *br, *bz, *bh;
};

// Forward over m rows; HC > 0 fixes the hidden width at compile time.
// `saved` holds three m x H planes: r, z, hhat.
template <std::size_t HC>
void gru_forward_rows(const GruRaw& w, const double* __restrict h, const double* __restrict x,
                      double* __restrict out, double* __restrict saved, std::size_t m,
                      std::size_t hw_rt, std::size_t in_rt) {
  const std::size_t hw = HC ? HC : hw_rt;
  const std::size_t in = HC ? HC : in_rt;
  const std::size_t plane = m * hw;
  double* __restrict rp = saved;
  double* __restrict zp = saved + plane;
  double* __restrict hp = saved + 2 * plane;
  const double* __restrict wr = w.wr;
  const double* __restrict wz = w.wz;
  const double* __restrict wh = w.wh;
  for (std::size_t i = 0; i < m; ++i) {
    const double* __restrict hi = h + i * hw;
    const double* __restrict xi = x + i * in;
    double* __restrict ar = rp + i * hw;
    double* __restrict az = zp + i * hw;
    for (std::size_t j = 0; j < hw; ++j) {
      ar[j] = w.br[j];
      az[j] = w.bz[j];
    }
    for (std::size_t k = 0; k < hw; ++k) {
      const double v = hi[k];
      for (std::size_t j = 0; j < hw; ++j) {
        ar[j] += v * wr[k * hw + j];
        az[j] += v * wz[k * hw + j];
      }
    }
    for (std::size_t k = 0; k < in; ++k) {
      const double v = xi[k];
      for (std::size_t j = 0; j < hw; ++j) {
        ar[j] += v * wr[(hw + k) * hw + j];
        az[j] += v * wz[(hw + k) * hw + j];
      }
    }
  }
  sigmoid_inplace(saved, 2 * plane);
  for (std::size_t i = 0; i < m; ++i) {
    const double* __restrict hi = h + i * hw;
    const double* __restrict xi = x + i * in;
    const double* __restrict ri = rp + i * hw;
    double* __restrict ah = hp + i * hw;
    for (std::size_t j = 0; j < hw; ++j) ah[j] = w.bh[j];
    for (std::size_t k = 0; k < hw; ++k) {
      const double v = ri[k] * hi[k];
      for (std::size_t j = 0; j < hw; ++j) ah[j] += v * wh[k * hw + j];
    }
    for (std::size_t k = 0; k < in; ++k) {
      const double v = xi[k];
      for (std::size_t j = 0; j < hw; ++j) ah[j] += v * wh[(hw + k) * hw + j];
    }
  }
  tanh_inplace(hp, out, plane);
  for (std::size_t k = 0; k < plane; ++k) out[k] = h[k] + zp[k] * (hp[k] - h[k]);
}

struct GruGradRaw {
  double *h, *x, *wr, *wz, *wh, *br, *bz, *bh;  // any may be null
};

template <std::size_t HC>
void gru_backward_rows(const GruRaw& w, const double* __restrict h, const double* __restrict x,
                       const double* __restrict saved, const double* __restrict g,
                       const GruGradRaw& out, std::size_t m, std::size_t hw_rt,
                       std::size_t in_rt) {
  const std::size_t hw = HC ? HC : hw_rt;
  const std::size_t in = HC ? HC : in_rt;
  const std::size_t cat = hw + in;
  const std::size_t plane = m * hw;
  std::vector<double> buf(4 * cat + 3 * hw);
  double* __restrict hx = buf.data();
  double* __restrict u = hx + cat;
  double* __restrict du = u + cat;
  double* __restrict dhx = du + cat;
  double* __restrict dah = dhx + cat;
  double* __restrict dar = dah + hw;
  double* __restrict daz = dar + hw;
  const double* __restrict wr = w.wr;
  const double* __restrict wz = w.wz;
  const double* __restrict wh = w.wh;
  for (std::size_t i = 0; i < m; ++i) {
    const double* __restrict hi = h + i * hw;
    const double* __restrict xi = x + i * in;
    const double* __restrict gi = g + i * hw;
    const double* __restrict ri = saved + i * hw;
    const double* __restrict zi = saved + plane + i * hw;
    const double* __restrict hhi = saved + 2 * plane + i * hw;
    for (std::size_t c = 0; c < hw; ++c) {
      hx[c] = hi[c];
      u[c] = ri[c] * hi[c];
    }
    for (std::size_t c = 0; c < in; ++c) hx[hw + c] = u[hw + c] = xi[c];
    for (std::size_t j = 0; j < hw; ++j) {
      const double z = zi[j], hh = hhi[j];
      dah[j] = gi[j] * z * (1.0 - hh * hh);
      daz[j] = gi[j] * (hh - hi[j]) * z * (1.0 - z);
    }
    for (std::size_t k = 0; k < cat; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < hw; ++j) s += dah[j] * wh[k * hw + j];
      du[k] = s;
    }
    for (std::size_t j = 0; j < hw; ++j) {
      const double r = ri[j];
      dar[j] = du[j] * hi[j] * r * (1.0 - r);
    }
    for (std::size_t k = 0; k < cat; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < hw; ++j) s += dar[j] * wr[k * hw + j] + daz[j] * wz[k * hw + j];
      dhx[k] = s;
    }
    if (out.h) {
      double* __restrict o = out.h + i * hw;
      for (std::size_t j = 0; j < hw; ++j) o[j] += gi[j] * (1.0 - zi[j]) + du[j] * ri[j] + dhx[j];
    }
    if (out.x) {
      double* __restrict o = out.x + i * in;
      for (std::size_t c = 0; c < in; ++c) o[c] += du[hw + c] + dhx[hw + c];
    }
    for (std::size_t k = 0; k < cat; ++k) {
      const double a = hx[k], b = u[k];
      if (out.wr) {
        double* __restrict p = out.wr + k * hw;
        for (std::size_t j = 0; j < hw; ++j) p[j] += a * dar[j];
      }
      if (out.wz) {
        double* __restrict p = out.wz + k * hw;
        for (std::size_t j = 0; j < hw; ++j) p[j] += a * daz[j];
      }
      if (out.wh) {
        double* __restrict p = out.wh + k * hw;
        for (std::size_t j = 0; j < hw; ++j) p[j] += b * dah[j];
      }
    }
    if (out.br)
      for (std::size_t j = 0; j < hw; ++j) out.br[j] += dar[j];
    if (out.bz)
      for (std::size_t j = 0; j < hw; ++j) out.bz[j] += daz[j];
    if (out.bh)
      for (std::size_t j = 0; j < hw; ++j) out.bh[j] += dah[j];
  }
}

template <class F>
void dispatch_width(std::size_t hw, std::size_t in, F&& f) {
  if (hw == in) {
    switch (hw) {
      case 2: return f(std::integral_constant<std::size_t, 2>{});
      case 4: return f(std::integral_constant<std::size_t, 4>{});
      case 6: return f(std::integral_constant<std::size_t, 6>{});
      case 8: return f(std::integral_constant<std::size_t, 8>{});
      case 10: return f(std::integral_constant<std::size_t, 10>{});
      default: break;
    }
  }
  f(std::integral_constant<std::size_t, 0>{});
}

}  // namespace detail

/// One GRU step with a hand-written backward:
///   r = sig([h,x] W_r + b_r), z = sig([h,x] W_z + b_z),
///   hh = tanh([r*h, x] W_h + b_h), h' = (1 - z) h + z hh.
inline Var gru_cell_fused(const GruVars& p, Var h, Var x) {
  Tape& t = detail::tape_of(h, x);
  const Tensor& hv = h.value();
  const Tensor& xv = x.value();
  const std::size_t m = hv.rows(), hw = hv.cols(), in = xv.cols(), cat = hw + in;
  if (xv.rows() != m)
    throw Error(ErrorKind::ShapeMismatch,
                "gru_cell: h " + hv.shape_string() + " vs x " + xv.shape_string());
  require_shape(p.w_r.value(), cat, hw, "gru_cell W_r");
  require_shape(p.w_z.value(), cat, hw, "gru_cell W_z");
  require_shape(p.w_h.value(), cat, hw, "gru_cell W_h");
  require_shape(p.b_r.value(), 1, hw, "gru_cell b_r");
  require_shape(p.b_z.value(), 1, hw, "gru_cell b_z");
  require_shape(p.b_h.value(), 1, hw, "gru_cell b_h");

  const detail::GruRaw raw{p.w_r.value().data(), p.w_z.value().data(), p.w_h.value().data(),
                           p.b_r.value().data(), p.b_z.value().data(), p.b_h.value().data()};
  Tensor saved(3, m * hw);
  Tensor out(m, hw);
  detail::dispatch_width(hw, in, [&](auto hc) {
    detail::gru_forward_rows<decltype(hc)::value>(raw, hv.data(), xv.data(), out.data(),
                                                  saved.data(), m, hw, in);
  });

  bool any = t.requires_grad(h.id) || t.requires_grad(x.id);
  for (Var v : {p.w_r, p.w_z, p.w_h, p.b_r, p.b_z, p.b_h}) any = any || t.requires_grad(v.id);
  if (!any) return t.push(std::move(out), false, nullptr);

  const std::size_t ih = h.id, ix = x.id;
  auto backward = [ih, ix, p, hw, in, saved = std::move(saved)](Tape& tp, std::size_t self) {
    auto grad_or_null = [&tp](std::size_t id) {
      return tp.requires_grad(id) ? tp.grad_ref(id).data() : nullptr;
    };
    const detail::GruRaw w{tp.value(p.w_r.id).data(), tp.value(p.w_z.id).data(),
                           tp.value(p.w_h.id).data(), nullptr, nullptr, nullptr};
    const detail::GruGradRaw g{grad_or_null(ih),     grad_or_null(ix),     grad_or_null(p.w_r.id),
                               grad_or_null(p.w_z.id), grad_or_null(p.w_h.id), grad_or_null(p.b_r.id),
                               grad_or_null(p.b_z.id), grad_or_null(p.b_h.id)};
    const Tensor& go = tp.grad_ref(self);
    const std::size_t rows = go.rows();
    detail::dispatch_width(hw, in, [&](auto hc) {
      detail::gru_backward_rows<decltype(hc)::value>(w, tp.value(ih).data(), tp.value(ix).data(),
                                                     saved.data(), go.data(), g, rows, hw, in);
    });
  };
  return t.push(std::move(out), true, std::move(backward));
}

/// Same cell assembled from primitive ops; used to cross-check the fused
/// backward.
inline Var gru_cell_composed(const GruVars& p, Var h, Var x) {
  Var hx = concat_cols(h, x);
  Var r = sigmoid(row_broadcast_add(matmul(hx, p.w_r), p.b_r));
  Var z = sigmoid(row_broadcast_add(matmul(hx, p.w_z), p.b_z));
  Var rhx = concat_cols(mul_elem(r, h), x);
  Var hh = tanh_act(row_broadcast_add(matmul(rhx, p.w_h), p.b_h));
  // (1 - z) h + z hh = h + z (hh - h)
  return add(h, mul_elem(z, sub(hh, h)));
}

}  // namespace amgru::ad
