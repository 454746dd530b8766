#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// A Tape records every primitive as a node holding its value and a backward
// closure. Nodes are appended in evaluation order, so walking ids downwards
// from the root is a valid reverse topological order and visits each node
// once.

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nexop/error.hpp"
#include "nexop/fft.hpp"
#include "nexop/tensor.hpp"

namespace nexop::ad {

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is wanted.
  Var variable(Tensor value) { return push(std::move(value), true, {}); }
  /// Leaf treated as data.
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  Var record(Tensor value, std::initializer_list<Var> parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
  }
  Var record(Tensor value, std::span<const Var> parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad_accum(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  void backward(const Var& root) {
    if (root.size() != 1) throw ConfigError("backward needs a scalar root, got " + shape_string(root.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    grad_accum(root.id())[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  /// Gradient w.r.t. a node after backward(); zeros when nothing flowed into it.
  Tensor gradient(const Var& v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, Backward fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
}

// Adds g·f(i) into the gradient of `target` if it participates.
template <class F>
void accumulate(Tape& t, const Var& target, std::size_t n, F&& f) {
  if (!t.requires_grad(target)) return;
  auto& g = t.grad_accum(target.id()).vec();
  for (std::size_t i = 0; i < n; ++i) g[i] += f(i);
}

template <class Fwd, class Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return a.tape().record(std::move(out), {a}, [a, deriv](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& x = t.value(a.id()).vec();
    const auto& y = t.value(self).vec();
    accumulate(t, a, g.size(), [&](std::size_t i) { return g[i] * deriv(x[i], y[i]); });
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    detail::accumulate(t, a, g.size(), [&](std::size_t i) { return g[i]; });
    detail::accumulate(t, b, g.size(), [&](std::size_t i) { return g[i]; });
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    detail::accumulate(t, a, g.size(), [&](std::size_t i) { return g[i]; });
    detail::accumulate(t, b, g.size(), [&](std::size_t i) { return -g[i]; });
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& av = t.value(a.id()).vec();
    const auto& bv = t.value(b.id()).vec();
    detail::accumulate(t, a, g.size(), [&](std::size_t i) { return g[i] * bv[i]; });
    detail::accumulate(t, b, g.size(), [&](std::size_t i) { return g[i] * av[i]; });
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "div");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& bv = t.value(b.id()).vec();
    const auto& y = t.value(self).vec();
    detail::accumulate(t, a, g.size(), [&](std::size_t i) { return g[i] / bv[i]; });
    detail::accumulate(t, b, g.size(), [&](std::size_t i) { return -g[i] * y[i] / bv[i]; });
  });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a,
      [](double x) {
        // Split on sign so neither branch overflows.
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var log(const Var& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// max(a, c) elementwise; the gradient flows only where a > c.
inline Var clamp_min(const Var& a, double c) {
  return detail::unary(
      a, [c](double x) { return x > c ? x : c; }, [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

inline Var sum(const Var& a) {
  return a.tape().record(Tensor::scalar(a.value().sum()), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    detail::accumulate(t, a, a.size(), [g](std::size_t) { return g; });
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.size());
  return a.tape().record(Tensor::scalar(a.value().sum() / n), {a}, [a, n](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / n;
    detail::accumulate(t, a, a.size(), [g](std::size_t) { return g; });
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    detail::accumulate(t, a, g.size(), [&](std::size_t i) { return g[i]; });
  });
}

/// Rows [begin, begin+count) along the leading dimension.
inline Var slice(const Var& a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (begin + count > av.dim(0)) throw ConfigError("slice out of range");
  const std::size_t inner = av.size() / av.dim(0);
  Shape shape = av.shape();
  shape[0] = count;
  Storage data(av.vec().begin() + begin * inner, av.vec().begin() + (begin + count) * inner);
  return a.tape().record(Tensor(std::move(shape), std::move(data)), {a},
                         [a, off = begin * inner](Tape& t, std::size_t self) {
                           const auto& g = t.grad(self).vec();
                           auto& ga = t.grad_accum(a.id()).vec();
                           for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
                         });
}

/// Concatenation along the leading dimension.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat of nothing");
  Shape shape = parts[0].shape();
  shape[0] = 0;
  Storage data;
  for (const Var& p : parts) {
    Shape ps = p.shape();
    shape[0] += ps[0];
    ps[0] = shape[0];
    if (ps != shape) throw ConfigError("concat: trailing shapes differ");
    data.insert(data.end(), p.value().vec().begin(), p.value().vec().end());
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape().record(Tensor(std::move(shape), std::move(data)), parts,
                                [ps](Tape& t, std::size_t self) {
                                  const auto& g = t.grad(self).vec();
                                  std::size_t off = 0;
                                  for (const Var& p : ps) {
                                    detail::accumulate(t, p, p.size(), [&](std::size_t i) { return g[off + i]; });
                                    off += p.size();
                                  }
                                });
}

/// out[dst_index[k]] += src[src_index[k]] into a zero tensor of `shape`.
inline Var scatter(const Var& src, std::vector<std::size_t> src_index, std::vector<std::size_t> dst_index,
                   Shape shape) {
  if (src_index.size() != dst_index.size()) throw ConfigError("scatter: index lists differ in length");
  Tensor out(std::move(shape));
  const Tensor& sv = src.value();
  for (std::size_t k = 0; k < src_index.size(); ++k) out[dst_index[k]] += sv[src_index[k]];
  return src.tape().record(std::move(out), {src},
                           [src, si = std::move(src_index), di = std::move(dst_index)](Tape& t, std::size_t self) {
                             const auto& g = t.grad(self).vec();
                             auto& gs = t.grad_accum(src.id()).vec();
                             for (std::size_t k = 0; k < si.size(); ++k) gs[si[k]] += g[di[k]];
                           });
}

/// Mean over the leading dimension: [N, ...] -> [...].
inline Var mean0(const Var& a) {
  const Tensor& av = a.value();
  const std::size_t n = av.dim(0), inner = av.size() / n;
  Shape shape(av.shape().begin() + 1, av.shape().end());
  Tensor out(shape);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < inner; ++i) out[i] += av[k * inner + i];
  out *= 1.0 / static_cast<double>(n);
  return a.tape().record(std::move(out), {a}, [a, n, inner](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const double s = 1.0 / static_cast<double>(n);
    detail::accumulate(t, a, n * inner, [&](std::size_t i) { return g[i % inner] * s; });
  });
}

/// Forward value `hard`, backward identity into `soft` (straight-through).
inline Var straight_through(const Var& soft, Tensor hard) {
  if (hard.shape() != soft.shape()) throw ConfigError("straight_through: shape mismatch");
  return soft.tape().record(std::move(hard), {soft}, [soft](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    detail::accumulate(t, soft, g.size(), [&](std::size_t i) { return g[i]; });
  });
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// Zero-padded patch matrix [C·k·k, H·W] for a "same" convolution.
inline void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k, double* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((ci * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          double* out = row + y * w;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* in = x + ci * hw + static_cast<std::size_t>(sy) * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + dx;
            out[xx] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) ? 0.0 : in[sx];
          }
        }
      }
}

inline void col2im_add(const double* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k, double* x) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((ci * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          double* dst = x + ci * hw + static_cast<std::size_t>(sy) * w;
          const double* src = row + y * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + dx;
            if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(w)) dst[sx] += src[xx];
          }
        }
      }
}

}  // namespace detail

/// "Same" 2D convolution (cross-correlation) with zero padding and odd kernel.
/// x: [Ci,H,W], weight: [Co,Ci,k,k], bias: [Co] -> [Co,H,W].
inline Var conv2d(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0) || wv.dim(2) != wv.dim(3) ||
      wv.dim(2) % 2 == 0 || bias.size() != wv.dim(0))
    throw ConfigError("conv2d: incompatible shapes " + shape_string(xv.shape()) + " * " +
                      shape_string(wv.shape()));
  const std::size_t ci = xv.dim(0), h = xv.dim(1), w = xv.dim(2), co = wv.dim(0), k = wv.dim(2);
  const std::size_t hw = h * w, rows = ci * k * k;
  auto cols = std::make_shared<Storage>(rows * hw);
  detail::im2col(xv.vec().data(), ci, h, w, k, cols->data());
  Tensor out({co, h, w});
  {
    detail::MatMap o(out.vec().data(), co, hw);
    o.noalias() = detail::ConstMatMap(wv.vec().data(), co, rows) * detail::ConstMatMap(cols->data(), rows, hw);
    for (std::size_t c = 0; c < co; ++c) o.row(c).array() += bias.value()[c];
  }
  return x.tape().record(std::move(out), {x, weight, bias},
                         [x, weight, bias, cols, ci, h, w, co, k, hw, rows](Tape& t, std::size_t self) {
                           detail::ConstMatMap g(t.grad(self).vec().data(), co, hw);
                           if (t.requires_grad(weight)) {
                             detail::MatMap gw(t.grad_accum(weight.id()).vec().data(), co, rows);
                             gw.noalias() += g * detail::ConstMatMap(cols->data(), rows, hw).transpose();
                           }
                           if (t.requires_grad(bias)) {
                             auto& gb = t.grad_accum(bias.id()).vec();
                             for (std::size_t c = 0; c < co; ++c) gb[c] += g.row(c).sum();
                           }
                           if (t.requires_grad(x)) {
                             detail::RowMatrix gcols =
                                 detail::ConstMatMap(t.value(weight.id()).vec().data(), co, rows).transpose() * g;
                             detail::col2im_add(gcols.data(), ci, h, w, k, t.grad_accum(x.id()).vec().data());
                           }
                         });
}

/// Centered unitary FFT of every complex plane pair of a planar [N,2,H,W] tensor.
inline Var fft2c(const Var& x) {
  return x.tape().record(fft2c_planar(x.value(), false), {x}, [x](Tape& t, std::size_t self) {
    const Tensor back = fft2c_planar(t.grad(self), true);
    detail::accumulate(t, x, back.size(), [&](std::size_t i) { return back[i]; });
  });
}

inline Var ifft2c(const Var& y) {
  return y.tape().record(fft2c_planar(y.value(), true), {y}, [y](Tape& t, std::size_t self) {
    const Tensor back = fft2c_planar(t.grad(self), false);
    detail::accumulate(t, y, back.size(), [&](std::size_t i) { return back[i]; });
  });
}

/// √(re²+im²+δ) for planar [N,2,H,W] -> [N,H,W]. With δ = 0 the gradient at
/// the origin is taken as zero.
inline Var magnitude(const Var& x, double delta) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || xv.dim(1) != 2) throw ConfigError("magnitude expects [N,2,H,W]");
  const std::size_t n = xv.dim(0), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, xv.dim(2), xv.dim(3)});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < hw; ++i) {
      const double re = xv[2 * k * hw + i], im = xv[(2 * k + 1) * hw + i];
      out[k * hw + i] = std::sqrt(re * re + im * im + delta);
    }
  return x.tape().record(std::move(out), {x}, [x, n, hw](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& y = t.value(self).vec();
    const auto& xv = t.value(x.id()).vec();
    auto& gx = t.grad_accum(x.id()).vec();
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < hw; ++i) {
        const double m = y[k * hw + i];
        if (m == 0.0) continue;
        const double s = g[k * hw + i] / m;
        gx[2 * k * hw + i] += s * xv[2 * k * hw + i];
        gx[(2 * k + 1) * hw + i] += s * xv[(2 * k + 1) * hw + i];
      }
  });
}

/// Complex planar [N,2,H,W] scaled per pixel by a real [N,H,W] factor.
inline Var cscale(const Var& x, const Var& r) {
  const Tensor& xv = x.value();
  const Tensor& rv = r.value();
  if (xv.rank() != 4 || xv.dim(1) != 2 || rv.size() * 2 != xv.size())
    throw ConfigError("cscale: expected [N,2,H,W] and [N,H,W], got " + shape_string(xv.shape()) + " and " +
                      shape_string(rv.shape()));
  const std::size_t n = xv.dim(0), hw = xv.dim(2) * xv.dim(3);
  Tensor out(xv.shape());
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t p = 0; p < 2; ++p)
      for (std::size_t i = 0; i < hw; ++i) out[(2 * k + p) * hw + i] = xv[(2 * k + p) * hw + i] * rv[k * hw + i];
  return x.tape().record(std::move(out), {x, r}, [x, r, n, hw](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& xv = t.value(x.id()).vec();
    const auto& rv = t.value(r.id()).vec();
    if (t.requires_grad(x)) {
      auto& gx = t.grad_accum(x.id()).vec();
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t p = 0; p < 2; ++p)
          for (std::size_t i = 0; i < hw; ++i) gx[(2 * k + p) * hw + i] += g[(2 * k + p) * hw + i] * rv[k * hw + i];
    }
    if (t.requires_grad(r)) {
      auto& gr = t.grad_accum(r.id()).vec();
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < hw; ++i)
          gr[k * hw + i] += g[2 * k * hw + i] * xv[2 * k * hw + i] + g[(2 * k + 1) * hw + i] * xv[(2 * k + 1) * hw + i];
    }
  });
}

inline Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t probes = 0;
  bool finite = true;
  std::string failure;

  bool ok(double tol) const { return finite && max_rel_error < tol; }
};

/// Program evaluated on a fresh tape: builds leaves for the inputs it is
/// handed and returns a scalar. Any randomness must be fixed by the caller.
using Program = std::function<Var(Tape&, std::span<const Var>)>;

/// Coordinate (input index, flat element index) to probe.
using Probe = std::pair<std::size_t, std::size_t>;

/// Compares reverse-mode gradients with central differences. The error per
/// coordinate is |analytic − numeric| / max(1, |numeric|).
inline GradCheckResult grad_check(const Program& f, const std::vector<Tensor>& inputs, double h,
                                  std::vector<Probe> probes = {}) {
  if (!(h >= 1e-6 && h <= 1e-3)) throw ConfigError("grad_check step must lie in [1e-6, 1e-3]");
  if (probes.empty())
    for (std::size_t a = 0; a < inputs.size(); ++a)
      for (std::size_t i = 0; i < inputs[a].size(); ++i) probes.emplace_back(a, i);

  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& x : xs) leaves.push_back(tape.variable(x));
    Var out = f(tape, leaves);
    const double v = out.value()[0];
    if (grads) {
      tape.backward(out);
      for (const auto& l : leaves) grads->push_back(tape.gradient(l));
    }
    return v;
  };

  GradCheckResult result;
  std::vector<Tensor> analytic;
  const double f0 = evaluate(inputs, &analytic);
  if (!std::isfinite(f0)) {
    result.finite = false;
    result.failure = "non-finite value at the base point";
    return result;
  }
  std::vector<Tensor> xs = inputs;
  for (const auto& [a, i] : probes) {
    const double orig = xs[a][i];
    xs[a][i] = orig + h;
    const double fp = evaluate(xs, nullptr);
    xs[a][i] = orig - h;
    const double fm = evaluate(xs, nullptr);
    xs[a][i] = orig;
    ++result.probes;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      result.finite = false;
      result.worst_input = a;
      result.worst_index = i;
      result.failure = "non-finite value probing input " + std::to_string(a) + " coordinate " + std::to_string(i);
      return result;
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[a][i] - numeric) / std::max(1.0, std::abs(numeric));
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_input = a;
      result.worst_index = i;
    }
  }
  return result;
}

inline GradCheckResult grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x, double h) {
  return grad_check([&](Tape& t, std::span<const Var> v) { return f(t, v[0]); }, std::vector<Tensor>{x}, h);
}

}  // namespace nexop::ad
