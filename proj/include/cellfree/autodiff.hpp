#pragma once

/// \file autodiff.hpp
/// Reverse-mode differentiation over complex tensors.
///
/// Every node stores a cogradient G = dL/dRe(z) + i dL/dIm(z) for a real scalar
/// loss L. For a holomorphic local map y = f(x) the adjoint is
/// G_x += conj(f'(x)) * G_y; nodes flagged real drop the imaginary part of the
/// accumulated G before propagating. G equals 2 dL/dz̄, and the public `grad`
/// accessor returns the Wirtinger conjugate-cogradient dL/dz̄ = G / 2, so a
/// descent step is simply  z <- z - lr * grad.
///
/// A tape records one forward pass; `backward` walks the recorded nodes once,
/// in reverse creation order.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cellfree/scenario.hpp"
#include "cellfree/tensor.hpp"

namespace cellfree::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  inline const Tensor& value() const;
  inline const Shape& shape() const;
  inline bool is_real() const;

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable input; its gradient survives `backward` and accumulates across calls.
  Var leaf(Tensor value, bool real = false) {
    nodes_.push_back(Node{std::move(value), {}, real, true, true, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value, bool real = false) {
    nodes_.push_back(Node{std::move(value), {}, real, false, false, {}});
    return Var(this, nodes_.size() - 1);
  }

  /// Appends an operation node. `parents` decide whether the node needs a gradient;
  /// `bw` receives the node's completed cogradient.
  Var record(Tensor value, bool real, std::initializer_list<Var> parents, Backward bw) {
    bool needs = false;
    for (const auto& p : parents) {
      if (p.tape_ != this) throw std::invalid_argument("autodiff: operands belong to different tapes");
      needs = needs || nodes_[p.id_].requires_grad;
    }
    if (real) project_real(value);
    nodes_.push_back(Node{std::move(value), {}, real, needs, false, needs ? std::move(bw) : Backward{}});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool is_real(std::size_t id) const { return nodes_.at(id).real; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Mutable cogradient slot of a node that needs one, or nullptr.
  Tensor* grad_slot(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }
  Tensor* grad_slot(const Var& v) { return grad_slot(v.id()); }

  /// Propagates from a real scalar loss. Leaf gradients accumulate; intermediate
  /// gradients are reset first.
  void backward(const Var& loss) {
    if (loss.tape_ != this) throw std::invalid_argument("backward: loss from another tape");
    const auto& ln = nodes_[loss.id_];
    if (ln.value.size() != 1 || !ln.real) throw std::invalid_argument("backward: loss must be a real scalar");
    for (auto& n : nodes_)
      if (!n.is_leaf) n.grad = Tensor{};
    visits_ = 0;
    if (!ln.requires_grad) return;
    grad_slot(loss.id_)->fill(1.0);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.real) project_real(n.grad);
      if (n.backward) {
        ++visits_;
        // parents always precede the node, so its own slot is final here
        const Tensor g = std::move(n.grad);
        n.grad = Tensor{};
        n.backward(*this, g);
      }
    }
  }

  std::size_t last_backward_visits() const { return visits_; }

  /// dL/dRe + i dL/dIm of a leaf (zeros if it never received a gradient).
  Tensor cogradient(const Var& v) const {
    const auto& n = nodes_.at(v.id());
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  /// Wirtinger conjugate-cogradient dL/dz̄.
  Tensor grad(const Var& v) const { return cogradient(v) * cplx(0.5); }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor{};
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool real = false;
    bool requires_grad = false;
    bool is_leaf = false;
    Backward backward;
  };

  static void project_real(Tensor& t) {
    for (auto& z : t.data()) z = cplx(z.real(), 0.0);
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Shape& Var::shape() const { return tape_->value(id_).shape(); }
inline bool Var::is_real() const { return tape_->is_real(id_); }

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

inline bool all_real(const Tensor& t) {
  for (const auto& z : t.data())
    if (z.imag() != 0.0) return false;
  return true;
}

// (outer, axis, inner) decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw std::invalid_argument("axis out of range");
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tape& t = a.tape();
  Tensor y = a.value();
  y += b.value();
  const auto ia = a.id(), ib = b.id();
  return t.record(std::move(y), a.is_real() && b.is_real(), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia)) *ga += g;
    if (auto* gb = tp.grad_slot(ib)) *gb += g;
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tape& t = a.tape();
  Tensor y = a.value();
  y -= b.value();
  const auto ia = a.id(), ib = b.id();
  return t.record(std::move(y), a.is_real() && b.is_real(), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia)) *ga += g;
    if (auto* gb = tp.grad_slot(ib)) *gb -= g;
  });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tape& t = a.tape();
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  const auto ia = a.id(), ib = b.id();
  return t.record(std::move(y), a.is_real() && b.is_real(), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(ia);
    const auto& bv = tp.value(ib);
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += std::conj(bv[i]) * g[i];
    if (auto* gb = tp.grad_slot(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += std::conj(av[i]) * g[i];
  });
}

inline Var conj(const Var& a) {
  Tape& t = a.tape();
  Tensor y = a.value();
  for (auto& z : y.data()) z = std::conj(z);
  const auto ia = a.id();
  return t.record(std::move(y), a.is_real(), {a}, [ia](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += std::conj(g[i]);
  });
}

/// Re(a), flagged real.
inline Var real_part(const Var& a) {
  Tensor y(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i].real();
  const auto ia = a.id();
  return a.tape().record(std::move(y), true, {a}, [ia](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i].real();
  });
}

inline Var scale(const Var& a, double s) {
  Tape& t = a.tape();
  Tensor y = a.value();
  y *= s;
  const auto ia = a.id();
  return t.record(std::move(y), a.is_real(), {a}, [ia, s](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
  });
}

inline Var add_scalar(const Var& a, double c) {
  Tape& t = a.tape();
  Tensor y = a.value();
  for (auto& z : y.data()) z += c;
  const auto ia = a.id();
  return t.record(std::move(y), a.is_real(), {a}, [ia](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia)) *ga += g;
  });
}

/// Elementwise product with a constant tensor.
inline Var mul_const(const Var& a, Tensor c) {
  if (a.shape() != c.shape()) throw std::invalid_argument("mul_const: shape mismatch");
  Tape& t = a.tape();
  const auto& av = a.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * c[i];
  const bool real = a.is_real() && detail::all_real(c);
  const auto ia = a.id();
  return t.record(std::move(y), real, {a}, [ia, c = std::move(c)](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += std::conj(c[i]) * g[i];
  });
}

/// Multiplies by v broadcast along `axis` of a: y[..., i, ...] = a[..., i, ...] * v[i].
inline Var mul_axis(const Var& a, const Var& v, std::size_t axis) {
  const auto sp = detail::split(a.shape(), axis);
  if (v.value().size() != sp.len) throw std::invalid_argument("mul_axis: vector length mismatch");
  Tape& t = a.tape();
  const auto& av = a.value();
  const auto& vv = v.value();
  Tensor y(av.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.len; ++i)
      for (std::size_t j = 0; j < sp.inner; ++j) {
        const std::size_t idx = (o * sp.len + i) * sp.inner + j;
        y[idx] = av[idx] * vv[i];
      }
  const auto ia = a.id(), iv = v.id();
  return t.record(std::move(y), a.is_real() && v.is_real(), {a, v}, [ia, iv, sp](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(ia);
    const auto& vv = tp.value(iv);
    auto* ga = tp.grad_slot(ia);
    auto* gv = tp.grad_slot(iv);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.len; ++i)
        for (std::size_t j = 0; j < sp.inner; ++j) {
          const std::size_t idx = (o * sp.len + i) * sp.inner + j;
          if (ga) (*ga)[idx] += std::conj(vv[i]) * g[idx];
          if (gv) (*gv)[i] += std::conj(av[idx]) * g[idx];
        }
  });
}

/// Feature-axis matrix product: a[..., p] * w[p, q] -> [..., q].
inline Var matmul(const Var& a, const Var& w) {
  const auto& as = a.shape();
  const auto& ws = w.shape();
  if (as.empty() || ws.size() != 2 || as.back() != ws[0])
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(as) + " x " + shape_str(ws));
  const std::size_t p = ws[0], q = ws[1], rows = a.value().size() / p;
  Shape ys = as;
  ys.back() = q;
  Tensor y(ys);
  const auto& av = a.value();
  const auto& wv = w.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < p; ++i) {
      const cplx x = av[r * p + i];
      if (x == cplx{}) continue;
      for (std::size_t j = 0; j < q; ++j) y[r * q + j] += x * wv[i * q + j];
    }
  const auto ia = a.id(), iw = w.id();
  return a.tape().record(std::move(y), false, {a, w}, [ia, iw, p, q, rows](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(ia);
    const auto& wv = tp.value(iw);
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < p; ++i) {
          cplx acc{};
          for (std::size_t j = 0; j < q; ++j) acc += std::conj(wv[i * q + j]) * g[r * q + j];
          (*ga)[r * p + i] += acc;
        }
    if (auto* gw = tp.grad_slot(iw))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < p; ++i) {
          const cplx x = std::conj(av[r * p + i]);
          if (x == cplx{}) continue;
          for (std::size_t j = 0; j < q; ++j) (*gw)[i * q + j] += x * g[r * q + j];
        }
  });
}

/// Batched matrix product: a[B, p, q] * b[B, q, r] -> [B, p, r].
inline Var bmm(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
  const std::size_t B = as[0], P = as[1], Q = as[2], R = bs[2];
  Tensor y({B, P, R});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t k = 0; k < Q; ++k) {
        const cplx x = av[(n * P + i) * Q + k];
        for (std::size_t j = 0; j < R; ++j) y[(n * P + i) * R + j] += x * bv[(n * Q + k) * R + j];
      }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(y), false, {a, b}, [ia, ib, B, P, Q, R](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(ia);
    const auto& bv = tp.value(ib);
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < P; ++i)
          for (std::size_t k = 0; k < Q; ++k) {
            cplx acc{};
            for (std::size_t j = 0; j < R; ++j) acc += g[(n * P + i) * R + j] * std::conj(bv[(n * Q + k) * R + j]);
            (*ga)[(n * P + i) * Q + k] += acc;
          }
    if (auto* gb = tp.grad_slot(ib))
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < P; ++i)
          for (std::size_t k = 0; k < Q; ++k) {
            const cplx x = std::conj(av[(n * P + i) * Q + k]);
            for (std::size_t j = 0; j < R; ++j) (*gb)[(n * Q + k) * R + j] += x * g[(n * P + i) * R + j];
          }
  });
}

/// Sum over one axis, which is removed.
inline Var sum_axis(const Var& a, std::size_t axis) {
  const auto sp = detail::split(a.shape(), axis);
  Shape ys = a.shape();
  ys.erase(ys.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor y(ys);
  const auto& av = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.len; ++i)
      for (std::size_t j = 0; j < sp.inner; ++j) y[o * sp.inner + j] += av[(o * sp.len + i) * sp.inner + j];
  const auto ia = a.id();
  return a.tape().record(std::move(y), a.is_real(), {a}, [ia, sp](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.len; ++i)
          for (std::size_t j = 0; j < sp.inner; ++j) (*ga)[(o * sp.len + i) * sp.inner + j] += g[o * sp.inner + j];
  });
}

/// Inserts a new axis of length n at `axis`, repeating the values.
inline Var expand(const Var& a, std::size_t axis, std::size_t n) {
  Shape ys = a.shape();
  if (axis > ys.size()) throw std::invalid_argument("expand: axis out of range");
  ys.insert(ys.begin() + static_cast<std::ptrdiff_t>(axis), n);
  const auto sp = detail::split(ys, axis);
  Tensor y(ys);
  const auto& av = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.len; ++i)
      for (std::size_t j = 0; j < sp.inner; ++j) y[(o * sp.len + i) * sp.inner + j] = av[o * sp.inner + j];
  const auto ia = a.id();
  return a.tape().record(std::move(y), a.is_real(), {a}, [ia, sp](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.len; ++i)
          for (std::size_t j = 0; j < sp.inner; ++j) (*ga)[o * sp.inner + j] += g[(o * sp.len + i) * sp.inner + j];
  });
}

inline Var sum_all(const Var& a) {
  cplx s{};
  for (const auto& z : a.value().data()) s += z;
  const auto ia = a.id();
  return a.tape().record(Tensor(Shape{}, s), a.is_real(), {a}, [ia](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (auto& z : ga->data()) z += g[0];
  });
}

/// y has shape a.shape()[axes[i]] along axis i.
inline Var permute(const Var& a, std::vector<std::size_t> axes) {
  const auto& as = a.shape();
  const std::size_t r = as.size();
  if (axes.size() != r) throw std::invalid_argument("permute: axes rank mismatch");
  Shape ys(r);
  for (std::size_t i = 0; i < r; ++i) ys[i] = as.at(axes[i]);
  // stride in a of each output axis
  std::vector<std::size_t> astride(r, 1), src_stride(r);
  for (std::size_t i = r; i-- > 1;) astride[i - 1] = astride[i] * as[i];
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = astride[axes[i]];
  const std::size_t total = shape_size(ys);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t lin = 0; lin < total; ++lin) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * src_stride[i];
    map[lin] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < ys[i]) break;
      idx[i] = 0;
    }
  }
  Tensor y(ys);
  const auto& av = a.value();
  for (std::size_t lin = 0; lin < total; ++lin) y[lin] = av[map[lin]];
  const auto ia = a.id();
  return a.tape().record(std::move(y), a.is_real(), {a}, [ia, map = std::move(map)](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t lin = 0; lin < map.size(); ++lin) (*ga)[map[lin]] += g[lin];
  });
}

inline Var reshape(const Var& a, Shape s) {
  Tensor y = a.value().reshaped(std::move(s));
  const auto ia = a.id();
  return a.tape().record(std::move(y), a.is_real(), {a}, [ia](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

/// |a|^2 elementwise, real output.
inline Var abs2(const Var& a) {
  Tensor y(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::norm(av[i]);
  const auto ia = a.id();
  return a.tape().record(std::move(y), true, {a}, [ia](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(ia);
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += 2.0 * av[i] * g[i].real();
  });
}

/// Elementwise real function with derivative, applied to a real node.
inline Var unary_real(const Var& a, const std::function<double(double)>& f,
                      const std::function<double(double)>& df) {
  if (!a.is_real()) throw std::invalid_argument("unary_real: operand must be real");
  Tensor y(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i].real());
  const auto ia = a.id();
  return a.tape().record(std::move(y), true, {a}, [ia, df](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(ia);
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += df(av[i].real()) * g[i].real();
  });
}

inline Var log1p(const Var& a) {
  return unary_real(
      a, [](double x) { return std::log1p(x); }, [](double x) { return 1.0 / (1.0 + x); });
}

/// Elementwise a / b for real nodes.
inline Var div(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "div");
  if (!a.is_real() || !b.is_real()) throw std::invalid_argument("div: operands must be real");
  Tensor y(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i].real() / bv[i].real();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(y), true, {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(ia);
    const auto& bv = tp.value(ib);
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i].real() / bv[i].real();
    if (auto* gb = tp.grad_slot(ib))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double bi = bv[i].real();
        (*gb)[i] -= g[i].real() * av[i].real() / (bi * bi);
      }
  });
}

/// Leaky rectifier applied separately to real and imaginary parts.
inline Var leaky_relu(const Var& a, double slope) {
  auto f = [slope](double x) { return x >= 0.0 ? x : slope * x; };
  Tensor y(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = cplx(f(av[i].real()), f(av[i].imag()));
  const auto ia = a.id();
  return a.tape().record(std::move(y), a.is_real(), {a}, [ia, slope](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(ia);
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double sr = av[i].real() >= 0.0 ? 1.0 : slope;
        const double si = av[i].imag() >= 0.0 ? 1.0 : slope;
        (*ga)[i] += cplx(sr * g[i].real(), si * g[i].imag());
      }
  });
}

/// Multiplies each (k, m) block of a K x M x ... tensor by d_km, or by 1 - d_km
/// when `complement` is set.
inline Var mask_assoc(const Var& a, const Association& d, bool complement = false) {
  const auto& as = a.shape();
  if (as.size() < 2 || as[0] != d.ues() || as[1] != d.aps()) throw std::invalid_argument("mask_assoc: shape mismatch");
  const std::size_t km = d.ues() * d.aps(), inner = a.value().size() / km;
  std::vector<double> w(km);
  for (std::size_t k = 0; k < d.ues(); ++k)
    for (std::size_t m = 0; m < d.aps(); ++m) {
      const double dk = d.mask(k, m);
      w[k * d.aps() + m] = complement ? 1.0 - dk : dk;
    }
  Tensor y(as);
  const auto& av = a.value();
  for (std::size_t b = 0; b < km; ++b)
    if (w[b] != 0.0)
      for (std::size_t j = 0; j < inner; ++j) y[b * inner + j] = av[b * inner + j];
  const auto ia = a.id();
  return a.tape().record(std::move(y), a.is_real(), {a}, [ia, w = std::move(w), inner](Tape& tp, const Tensor& g) {
    if (auto* ga = tp.grad_slot(ia))
      for (std::size_t b = 0; b < w.size(); ++b)
        if (w[b] != 0.0)
          for (std::size_t j = 0; j < inner; ++j) (*ga)[b * inner + j] += g[b * inner + j];
  });
}

/// sum over `axis` of conj(a) * b.
inline Var inner(const Var& a, const Var& b, std::size_t axis) { return sum_axis(mul(conj(a), b), axis); }

// ---------------------------------------------------------------------------

/// Builds a real scalar loss on a fresh tape from leaves holding `params`.
using TapeFunction = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;  // max |analytic - numeric| / max |numeric|
  double max_abs_error = 0.0;
  double grad_scale = 0.0;     // max |numeric|
  std::vector<Tensor> analytic;  // dL/dz̄ per parameter
};

inline double evaluate(const TapeFunction& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& p : params) leaves.push_back(tape.constant(p));
  return f(tape, leaves).value()[0].real();
}

/// Compares analytic gradients with central differences, perturbing real and
/// imaginary parts of every coordinate separately.
inline GradCheckResult grad_check(const TapeFunction& f, const std::vector<Tensor>& params, double eps = 1e-6) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  GradCheckResult res;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    const Var loss = f(tape, leaves);
    tape.backward(loss);
    for (const auto& l : leaves) res.analytic.push_back(tape.grad(l));
  }
  auto work = params;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      const cplx orig = work[p][i];
      for (int part = 0; part < 2; ++part) {
        const cplx step = part == 0 ? cplx(eps, 0.0) : cplx(0.0, eps);
        work[p][i] = orig + step;
        const double up = evaluate(f, work);
        work[p][i] = orig - step;
        const double down = evaluate(f, work);
        work[p][i] = orig;
        const double numeric = (up - down) / (2.0 * eps);
        // cogradient component = 2 * dL/dz̄ component
        const cplx g = 2.0 * res.analytic[p][i];
        const double analytic = part == 0 ? g.real() : g.imag();
        res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic - numeric));
        res.grad_scale = std::max(res.grad_scale, std::abs(numeric));
      }
    }
  }
  res.max_rel_error = res.grad_scale > 0.0 ? res.max_abs_error / res.grad_scale : res.max_abs_error;
  return res;
}

}  // namespace cellfree::ad
