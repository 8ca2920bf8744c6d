#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "o3n/sparse_map.hpp"
#include "o3n/tensor.hpp"

// Minimal reverse-mode differentiation over the fixed operation set the
// occupancy model needs. One Tape per forward pass; nodes are appended in
// execution order, so recording order is a topological order.
namespace o3n::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var variable(Tensor value) { return push(std::move(value), true, {}); }
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Records an op. The node requires grad iff any input does; otherwise the
  /// backward closure is dropped.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }
  Var record(Tensor value, std::span<const Var> inputs, Backward fn) {
    bool rg = false;
    for (const Var& v : inputs) {
      if (v.tape() != this) throw Error("autodiff: input recorded on a different tape");
      rg = rg || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : Backward{});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }
  /// Accumulation target for input `v`, or nullptr when v needs no gradient.
  double* accum(const Var& v) { return requires_grad(v.id()) ? grad_buffer(v.id()).data() : nullptr; }

  void backward(const Var& loss) {
    if (loss.tape() != this) throw Error("backward: loss belongs to a different tape");
    if (nodes_[loss.id()].value.size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!nodes_[loss.id()].requires_grad) throw Error("backward: loss is detached from every variable");
    grad_buffer(loss.id())[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() != n.value.size()) continue;
      n.backward(*this, i);
    }
  }

  /// Gradient w.r.t. v after backward(); zeros for constants and for nodes
  /// the loss does not depend on.
  Tensor grad(const Var& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.size() == n.value.size()) return n.grad;
    return Tensor(n.value.shape());
  }

  bool has_grad(const Var& v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad.size() == n.value.size();
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor value, bool rg, Backward fn) {
    nodes_.push_back(Node{std::move(value), Tensor{}, rg, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Unary elementwise op with derivative expressed through input and output.
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape()->record(std::move(y), {a}, [a, df](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(a.id());
    const Tensor& y = t.value(self);
    double* dx = t.accum(a);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return a.tape()->record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    for (const Var& v : {a, b})
      if (double* d = t.accum(v))
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.tape()->record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (double* d = t.accum(a))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    if (double* d = t.accum(b))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape()->record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& av = t.value(a.id());
    const Tensor& bv = t.value(b.id());
    if (double* d = t.accum(a))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    if (double* d = t.accum(b))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
  });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var elu(const Var& a) {
  return detail::unary(a, detail::elu, [](double x, double) { return detail::elu_grad(x); });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, detail::sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape()->record(Tensor({1}, s), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0];
    double* d = t.accum(a);
    for (std::size_t i = 0; i < t.value(a.id()).size(); ++i) d[i] += g;
  });
}

inline Var mean(const Var& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Sum of scalars (all shape [1]).
inline Var add_all(std::span<const Var> terms) {
  if (terms.empty()) throw ShapeError("add_all: no terms");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

/// y = x + bias broadcast along `axis` (bias has x.dim(axis) entries).
inline Var add_channel_bias(const Var& x, const Var& bias, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size() || bias.size() != s[axis]) throw ShapeError("add_channel_bias: bias extent mismatch");
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  const std::size_t C = s[axis];
  Tensor y = x.value();
  const Tensor& b = bias.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      double* p = y.data() + (o * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
    }
  return x.tape()->record(std::move(y), {x, bias}, [x, bias, outer, C, inner](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (double* d = t.accum(x))
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    if (double* d = t.accum(bias))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < C; ++c) {
          const double* p = g.data() + (o * C + c) * inner;
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
          d[c] += acc;
        }
  });
}

// ---------------------------------------------------------------- layout

inline Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape()->record(std::move(y), {a}, [a](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    double* d = t.accum(a);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

inline Var permute(const Var& a, std::vector<std::size_t> axes) {
  Tensor y = o3n::permute(a.value(), axes);
  return a.tape()->record(std::move(y), {a}, [a, axes](Tape& t, std::size_t self) {
    const std::vector<std::size_t> inv = inverse_axes(axes);
    const Tensor back = o3n::permute(t.grad_buffer(self), inv);
    double* d = t.accum(a);
    for (std::size_t i = 0; i < back.size(); ++i) d[i] += back[i];
  });
}

/// Concatenation along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape s = parts[0].shape();
  if (axis >= s.size()) throw ShapeError("concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  std::vector<std::size_t> ext;
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != s.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t a = 0; a < s.size(); ++a)
      if (a != axis && ps[a] != s[a]) throw ShapeError("concat: extent mismatch");
    ext.push_back(ps[axis]);
    total += ps[axis];
  }
  s[axis] = total;
  Tensor y(s);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const double* src = parts[k].value().data() + o * ext[k] * inner;
      std::copy(src, src + ext[k] * inner, y.data() + (o * total + off) * inner);
      off += ext[k];
    }
  }
  return parts[0].tape()->record(std::move(y), std::span<const Var>(parts),
                                 [parts, ext, outer, inner, total](Tape& t, std::size_t self) {
                                   const Tensor& g = t.grad_buffer(self);
                                   std::size_t off = 0;
                                   for (std::size_t k = 0; k < parts.size(); ++k) {
                                     if (double* d = t.accum(parts[k]))
                                       for (std::size_t o = 0; o < outer; ++o) {
                                         const double* src = g.data() + (o * total + off) * inner;
                                         double* dst = d + o * ext[k] * inner;
                                         for (std::size_t i = 0; i < ext[k] * inner; ++i) dst[i] += src[i];
                                       }
                                     off += ext[k];
                                   }
                                 });
}

/// Rows of a [N, d] tensor.
inline Var select_rows(const Var& x, std::vector<std::size_t> rows) {
  if (x.shape().size() != 2) throw ShapeError("select_rows expects [N, d]");
  const std::size_t d = x.shape()[1];
  Tensor y({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.shape()[0]) throw ShapeError("select_rows: row index out of range");
    std::copy_n(x.value().data() + rows[r] * d, d, y.data() + r * d);
  }
  return x.tape()->record(std::move(y), {x}, [x, rows, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    double* dx = t.accum(x);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) dx[rows[r] * d + c] += g[r * d + c];
  });
}

/// Flat gather: y.flat[i] = x.flat[index[i]], reshaped to out_shape.
inline Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  if (shape_size(out_shape) != index->size()) throw ShapeError("gather: index count does not match output shape");
  Tensor y(std::move(out_shape));
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < index->size(); ++i) {
    if ((*index)[i] >= xv.size()) throw ShapeError("gather: index out of range");
    y[i] = xv[(*index)[i]];
  }
  return x.tape()->record(std::move(y), {x}, [x, index](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    double* dx = t.accum(x);
    for (std::size_t i = 0; i < index->size(); ++i) dx[(*index)[i]] += g[i];
  });
}

/// Channel-wise application of a fixed sparse map: x [C, in] -> [C, out],
/// reshaped to out_shape. Adjoint is the transposed scatter-add.
inline Var sparse_apply(const Var& x, std::shared_ptr<const SparseMap> map, Shape out_shape) {
  const std::size_t C = map->channel_count(x.value());
  Tensor y = map->apply(x.value()).reshaped(std::move(out_shape));
  return x.tape()->record(std::move(y), {x}, [x, map, C](Tape& t, std::size_t self) {
    map->accumulate_transpose(t.grad_buffer(self).data(), t.accum(x), C);
  });
}

inline Var sparse_apply(const Var& x, const SparseMap& map, Shape out_shape) {
  return sparse_apply(x, std::make_shared<const SparseMap>(map), std::move(out_shape));
}

/// Mean over the last axis: [..., S] -> [...].
inline Var mean_last(const Var& x) {
  const Shape& s = x.shape();
  const std::size_t S = s.back();
  Shape os(s.begin(), s.end() - 1);
  if (os.empty()) os = {1};
  Tensor y(os);
  for (std::size_t o = 0; o < y.size(); ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < S; ++i) acc += x.value()[o * S + i];
    y[o] = acc / static_cast<double>(S);
  }
  return x.tape()->record(std::move(y), {x}, [x, S](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    double* d = t.accum(x);
    for (std::size_t o = 0; o < g.size(); ++o)
      for (std::size_t i = 0; i < S; ++i) d[o * S + i] += g[o] / static_cast<double>(S);
  });
}

/// Repeats along a new trailing axis: [...] -> [..., S].
inline Var broadcast_last(const Var& x, std::size_t S) {
  Shape s = x.shape();
  s.push_back(S);
  Tensor y(s);
  for (std::size_t o = 0; o < x.size(); ++o)
    for (std::size_t i = 0; i < S; ++i) y[o * S + i] = x.value()[o];
  return x.tape()->record(std::move(y), {x}, [x, S](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    double* d = t.accum(x);
    for (std::size_t o = 0; o < t.value(x.id()).size(); ++o)
      for (std::size_t i = 0; i < S; ++i) d[o] += g[o * S + i];
  });
}

// ---------------------------------------------------------------- dense

/// x [..., in] times w [in, out] -> [..., out].
inline Var linear(const Var& x, const Var& w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() != 2 || xs.empty() || xs.back() != ws[0])
    throw ShapeError("linear: " + shape_str(xs) + " x " + shape_str(ws));
  const std::size_t in = ws[0], out = ws[1], N = x.size() / in;
  Shape ys = xs;
  ys.back() = out;
  Tensor y(ys);
  detail::MapRM(y.data(), N, out).noalias() =
      detail::CMapRM(x.value().data(), N, in) * detail::CMapRM(w.value().data(), in, out);
  return x.tape()->record(std::move(y), {x, w}, [x, w, N, in, out](Tape& t, std::size_t self) {
    detail::CMapRM g(t.grad_buffer(self).data(), N, out);
    if (double* dx = t.accum(x))
      detail::MapRM(dx, N, in).noalias() += g * detail::CMapRM(t.value(w.id()).data(), in, out).transpose();
    if (double* dw = t.accum(w))
      detail::MapRM(dw, in, out).noalias() += detail::CMapRM(t.value(x.id()).data(), N, in).transpose() * g;
  });
}

namespace detail {

struct Conv3dGeom {
  std::size_t cin, cout, H, W, D, k, dil;
  std::size_t spatial() const { return H * W * D; }
  std::size_t taps() const { return k * k * k; }
};

// cols[(c * taps + tap) * S + s] = x[c, s + offset(tap)] (zero outside).
inline void im2col3d(const double* x, const Conv3dGeom& g, double* cols) {
  const long r = static_cast<long>(g.k / 2);
  const long H = g.H, W = g.W, D = g.D;
  const std::size_t S = g.spatial();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const double* xc = x + c * S;
    for (long a = -r; a <= r; ++a)
      for (long b = -r; b <= r; ++b)
        for (long e = -r; e <= r; ++e, ++row) {
          double* out = cols + row * S;
          const long da = a * static_cast<long>(g.dil), db = b * static_cast<long>(g.dil),
                     de = e * static_cast<long>(g.dil);
          for (long i = 0; i < H; ++i) {
            const long ii = i + da;
            for (long j = 0; j < W; ++j) {
              const long jj = j + db;
              double* o = out + (i * W + j) * D;
              if (ii < 0 || ii >= H || jj < 0 || jj >= W) {
                std::fill(o, o + D, 0.0);
                continue;
              }
              const double* src = xc + (ii * W + jj) * D;
              for (long k = 0; k < D; ++k) {
                const long kk = k + de;
                o[k] = (kk >= 0 && kk < D) ? src[kk] : 0.0;
              }
            }
          }
        }
  }
}

inline void col2im3d(const double* cols, const Conv3dGeom& g, double* dx) {
  const long r = static_cast<long>(g.k / 2);
  const long H = g.H, W = g.W, D = g.D;
  const std::size_t S = g.spatial();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* dc = dx + c * S;
    for (long a = -r; a <= r; ++a)
      for (long b = -r; b <= r; ++b)
        for (long e = -r; e <= r; ++e, ++row) {
          const double* in = cols + row * S;
          const long da = a * static_cast<long>(g.dil), db = b * static_cast<long>(g.dil),
                     de = e * static_cast<long>(g.dil);
          for (long i = 0; i < H; ++i) {
            const long ii = i + da;
            if (ii < 0 || ii >= H) continue;
            for (long j = 0; j < W; ++j) {
              const long jj = j + db;
              if (jj < 0 || jj >= W) continue;
              const double* o = in + (i * W + j) * D;
              double* dst = dc + (ii * W + jj) * D;
              for (long k = 0; k < D; ++k) {
                const long kk = k + de;
                if (kk >= 0 && kk < D) dst[kk] += o[k];
              }
            }
          }
        }
  }
}

}  // namespace detail

/// Same-size 3D convolution, zero padding, odd cubic kernel with dilation.
/// x [G, Cin, H, W, D], w [Cout, Cin, k, k, k] -> [G, Cout, H, W, D].
/// The G groups share weights (used for per-class cost slices).
inline Var conv3d(const Var& x, const Var& w, std::size_t dilation = 1) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 5 || ws.size() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] % 2 == 0)
    throw ShapeError("conv3d: input " + shape_str(xs) + " weight " + shape_str(ws));
  const detail::Conv3dGeom geo{xs[1], ws[0], xs[2], xs[3], xs[4], ws[2], dilation};
  const std::size_t G = xs[0], S = geo.spatial(), K = geo.cin * geo.taps();
  Tensor y({G, geo.cout, geo.H, geo.W, geo.D});
  std::vector<double> cols(geo.k == 1 ? 0 : K * S);
  detail::CMapRM wm(w.value().data(), geo.cout, K);
  for (std::size_t g = 0; g < G; ++g) {
    const double* xg = x.value().data() + g * geo.cin * S;
    const double* cp = xg;
    if (geo.k != 1) {
      detail::im2col3d(xg, geo, cols.data());
      cp = cols.data();
    }
    detail::MapRM(y.data() + g * geo.cout * S, geo.cout, S).noalias() = wm * detail::CMapRM(cp, K, S);
  }
  return x.tape()->record(std::move(y), {x, w}, [x, w, geo, G, S, K](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad_buffer(self);
    double* dx = t.accum(x);
    double* dw = t.accum(w);
    detail::CMapRM wm(t.value(w.id()).data(), geo.cout, K);
    std::vector<double> cols(geo.k == 1 ? 0 : K * S);
    std::vector<double> dcols(geo.k == 1 ? 0 : K * S);
    for (std::size_t g = 0; g < G; ++g) {
      detail::CMapRM gg(gy.data() + g * geo.cout * S, geo.cout, S);
      const double* xg = t.value(x.id()).data() + g * geo.cin * S;
      if (dw) {
        const double* cp = xg;
        if (geo.k != 1) {
          detail::im2col3d(xg, geo, cols.data());
          cp = cols.data();
        }
        detail::MapRM(dw, geo.cout, K).noalias() += gg * detail::CMapRM(cp, K, S).transpose();
      }
      if (dx) {
        double* dxg = dx + g * geo.cin * S;
        if (geo.k == 1) {
          detail::MapRM(dxg, K, S).noalias() += wm.transpose() * gg;
        } else {
          detail::MapRM(dcols.data(), K, S).noalias() = wm.transpose() * gg;
          detail::col2im3d(dcols.data(), geo, dxg);
        }
      }
    }
  });
}

/// 3x3 panorama convolution with padding 1: columns wrap around the seam,
/// rows clamp to the edge. x [Cin, H, W], w [Cout, Cin, 3, 3] ->
/// [Cout, ceil(H/stride), ceil(W/stride)].
inline Var conv2d_panoramic(const Var& x, const Var& w, std::size_t stride) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0] || ws[2] != 3 || ws[3] != 3 || stride < 1)
    throw ShapeError("conv2d_panoramic: input " + shape_str(xs) + " weight " + shape_str(ws));
  const std::size_t cin = xs[0], H = xs[1], W = xs[2], cout = ws[0];
  const std::size_t Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
  // Source pixel of every (output pixel, tap), shared by forward and backward.
  std::vector<std::size_t> src(Ho * Wo * 9);
  for (std::size_t oy = 0; oy < Ho; ++oy)
    for (std::size_t ox = 0; ox < Wo; ++ox)
      for (long ky = 0; ky < 3; ++ky)
        for (long kx = 0; kx < 3; ++kx) {
          const long iy = std::clamp(static_cast<long>(oy * stride) + ky - 1, 0L, static_cast<long>(H) - 1);
          const long ix =
              ((static_cast<long>(ox * stride) + kx - 1) % static_cast<long>(W) + static_cast<long>(W)) %
              static_cast<long>(W);
          src[(oy * Wo + ox) * 9 + ky * 3 + kx] = static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
        }
  const std::size_t P = Ho * Wo, K = cin * 9;
  auto gather = [cin, H, W, P](const std::vector<std::size_t>& src, const double* xv, std::vector<double>& cols) {
    cols.assign(cin * 9 * P, 0.0);
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t tap = 0; tap < 9; ++tap)
        for (std::size_t p = 0; p < P; ++p) cols[(c * 9 + tap) * P + p] = xv[c * H * W + src[p * 9 + tap]];
  };
  std::vector<double> cols;
  gather(src, x.value().data(), cols);
  Tensor y({cout, Ho, Wo});
  detail::MapRM(y.data(), cout, P).noalias() =
      detail::CMapRM(w.value().data(), cout, K) * detail::CMapRM(cols.data(), K, P);
  return x.tape()->record(std::move(y), {x, w}, [x, w, src, cin, H, W, cout, P, K, gather](Tape& t, std::size_t self) {
    detail::CMapRM g(t.grad_buffer(self).data(), cout, P);
    if (double* dw = t.accum(w)) {
      std::vector<double> cols;
      gather(src, t.value(x.id()).data(), cols);
      detail::MapRM(dw, cout, K).noalias() += g * detail::CMapRM(cols.data(), K, P).transpose();
    }
    if (double* dx = t.accum(x)) {
      detail::RowMat dcols = detail::CMapRM(t.value(w.id()).data(), cout, K).transpose() * g;
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t tap = 0; tap < 9; ++tap)
          for (std::size_t p = 0; p < P; ++p) dx[c * H * W + src[p * 9 + tap]] += dcols(c * 9 + tap, p);
    }
  });
}

// ---------------------------------------------------------------- normalisation

/// Softmax over the last axis.
inline Var softmax(const Var& x) {
  const std::size_t K = x.shape().back(), N = x.size() / K;
  Tensor y(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const double* r = x.value().data() + n * K;
    double* o = y.data() + n * K;
    const double mx = *std::max_element(r, r + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += (o[k] = std::exp(r[k] - mx));
    for (std::size_t k = 0; k < K; ++k) o[k] /= z;
  }
  return x.tape()->record(std::move(y), {x}, [x, K, N](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& y = t.value(self);
    double* d = t.accum(x);
    for (std::size_t n = 0; n < N; ++n) {
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += g[n * K + k] * y[n * K + k];
      for (std::size_t k = 0; k < K; ++k) d[n * K + k] += y[n * K + k] * (g[n * K + k] - dot);
    }
  });
}

namespace detail {
inline std::vector<double> row_norms(const double* x, std::size_t rows, std::size_t d) {
  std::vector<double> n(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += x[r * d + c] * x[r * d + c];
    n[r] = std::sqrt(s);
  }
  return n;
}
inline RowMat normalized_rows(const double* x, const std::vector<double>& norms, std::size_t d) {
  RowMat m = CMapRM(x, static_cast<Eigen::Index>(norms.size()), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < norms.size(); ++r) m.row(r) *= norms[r] > 0.0 ? 1.0 / norms[r] : 0.0;
  return m;
}
// Adjoint of row normalisation: d(x/|x|) -> dx.
inline void normalize_adjoint(const RowMat& xn, const RowMat& dxn, const std::vector<double>& norms, double* dx) {
  const auto d = xn.cols();
  for (Eigen::Index r = 0; r < xn.rows(); ++r) {
    if (norms[r] == 0.0) continue;
    const double dot = xn.row(r).dot(dxn.row(r));
    for (Eigen::Index c = 0; c < d; ++c) dx[r * d + c] += (dxn(r, c) - dot * xn(r, c)) / norms[r];
  }
}
}  // namespace detail

/// Pairwise cosine similarity: X [N, d], T [L, d] -> [N, L]. Rows with zero
/// norm give similarity 0.
inline Var cosine_rows(const Var& X, const Var& T) {
  if (X.shape().size() != 2 || T.shape().size() != 2 || X.shape()[1] != T.shape()[1])
    throw ShapeError("cosine_rows: " + shape_str(X.shape()) + " vs " + shape_str(T.shape()));
  const std::size_t N = X.shape()[0], L = T.shape()[0], d = X.shape()[1];
  const auto nx = detail::row_norms(X.value().data(), N, d);
  const auto nt = detail::row_norms(T.value().data(), L, d);
  const detail::RowMat xn = detail::normalized_rows(X.value().data(), nx, d);
  const detail::RowMat tn = detail::normalized_rows(T.value().data(), nt, d);
  Tensor y({N, L});
  detail::MapRM(y.data(), N, L).noalias() = xn * tn.transpose();
  return X.tape()->record(std::move(y), {X, T}, [X, T, N, L, d](Tape& t, std::size_t self) {
    detail::CMapRM g(t.grad_buffer(self).data(), N, L);
    const auto nx = detail::row_norms(t.value(X.id()).data(), N, d);
    const auto nt = detail::row_norms(t.value(T.id()).data(), L, d);
    const detail::RowMat xn = detail::normalized_rows(t.value(X.id()).data(), nx, d);
    const detail::RowMat tn = detail::normalized_rows(t.value(T.id()).data(), nt, d);
    if (double* dx = t.accum(X)) detail::normalize_adjoint(xn, g * tn, nx, dx);
    if (double* dt = t.accum(T)) detail::normalize_adjoint(tn, g.transpose() * xn, nt, dt);
  });
}

/// Row-wise cosine between matching rows: A, B [N, d] -> [N].
inline Var cosine_pairs(const Var& A, const Var& B) {
  detail::require_same_shape(A, B, "cosine_pairs");
  if (A.shape().size() != 2) throw ShapeError("cosine_pairs expects [N, d]");
  const std::size_t N = A.shape()[0], d = A.shape()[1];
  const auto na = detail::row_norms(A.value().data(), N, d);
  const auto nb = detail::row_norms(B.value().data(), N, d);
  const detail::RowMat an = detail::normalized_rows(A.value().data(), na, d);
  const detail::RowMat bn = detail::normalized_rows(B.value().data(), nb, d);
  Tensor y({N});
  for (std::size_t r = 0; r < N; ++r) y[r] = an.row(r).dot(bn.row(r));
  return A.tape()->record(std::move(y), {A, B}, [A, B, N, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const auto na = detail::row_norms(t.value(A.id()).data(), N, d);
    const auto nb = detail::row_norms(t.value(B.id()).data(), N, d);
    const detail::RowMat an = detail::normalized_rows(t.value(A.id()).data(), na, d);
    const detail::RowMat bn = detail::normalized_rows(t.value(B.id()).data(), nb, d);
    Eigen::Map<const Eigen::VectorXd> gv(g.data(), static_cast<Eigen::Index>(N));
    if (double* da = t.accum(A)) detail::normalize_adjoint(an, gv.asDiagonal() * bn, na, da);
    if (double* db = t.accum(B)) detail::normalize_adjoint(bn, gv.asDiagonal() * an, nb, db);
  });
}

// ---------------------------------------------------------------- attention

/// Linear attention with feature map ψ(x) = elu(x) + 1, independently per
/// group: Q, K [G, N, dk], V [G, N, dv] -> [G, N, dv],
/// out_i = ψ(q_i)ᵀ Σ_j ψ(k_j) v_jᵀ / (ψ(q_i)ᵀ Σ_j ψ(k_j)).
inline Var linear_attention(const Var& Q, const Var& K, const Var& V) {
  const Shape& qs = Q.shape();
  if (qs.size() != 3 || K.shape() != qs || V.shape().size() != 3 || V.shape()[0] != qs[0] || V.shape()[1] != qs[1])
    throw ShapeError("linear_attention: shape mismatch");
  const std::size_t G = qs[0], N = qs[1], dk = qs[2], dv = V.shape()[2];
  auto psi = [](double x) { return detail::elu(x) + 1.0; };
  Tensor y({G, N, dv});
  std::vector<double> kv(dk * dv), z(dk);
  for (std::size_t g = 0; g < G; ++g) {
    const double* q = Q.value().data() + g * N * dk;
    const double* k = K.value().data() + g * N * dk;
    const double* v = V.value().data() + g * N * dv;
    std::fill(kv.begin(), kv.end(), 0.0);
    std::fill(z.begin(), z.end(), 0.0);
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t a = 0; a < dk; ++a) {
        const double pk = psi(k[j * dk + a]);
        z[a] += pk;
        for (std::size_t b = 0; b < dv; ++b) kv[a * dv + b] += pk * v[j * dv + b];
      }
    for (std::size_t i = 0; i < N; ++i) {
      double den = 0.0;
      double* o = y.data() + (g * N + i) * dv;
      for (std::size_t a = 0; a < dk; ++a) {
        const double pq = psi(q[i * dk + a]);
        den += pq * z[a];
        for (std::size_t b = 0; b < dv; ++b) o[b] += pq * kv[a * dv + b];
      }
      for (std::size_t b = 0; b < dv; ++b) o[b] /= den;
    }
  }
  return Q.tape()->record(std::move(y), {Q, K, V}, [Q, K, V, G, N, dk, dv, psi](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad_buffer(self);
    const Tensor& out = t.value(self);
    double* dQ = t.accum(Q);
    double* dK = t.accum(K);
    double* dV = t.accum(V);
    std::vector<double> kv(dk * dv), z(dk), dkv(dk * dv), dz(dk), dnum(dv);
    for (std::size_t g = 0; g < G; ++g) {
      const double* q = t.value(Q.id()).data() + g * N * dk;
      const double* k = t.value(K.id()).data() + g * N * dk;
      const double* v = t.value(V.id()).data() + g * N * dv;
      std::fill(kv.begin(), kv.end(), 0.0);
      std::fill(z.begin(), z.end(), 0.0);
      std::fill(dkv.begin(), dkv.end(), 0.0);
      std::fill(dz.begin(), dz.end(), 0.0);
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t a = 0; a < dk; ++a) {
          const double pk = psi(k[j * dk + a]);
          z[a] += pk;
          for (std::size_t b = 0; b < dv; ++b) kv[a * dv + b] += pk * v[j * dv + b];
        }
      for (std::size_t i = 0; i < N; ++i) {
        double den = 0.0;
        for (std::size_t a = 0; a < dk; ++a) den += psi(q[i * dk + a]) * z[a];
        const double* go = gy.data() + (g * N + i) * dv;
        const double* o = out.data() + (g * N + i) * dv;
        double dden = 0.0;
        for (std::size_t b = 0; b < dv; ++b) {
          dnum[b] = go[b] / den;
          dden -= go[b] * o[b] / den;
        }
        for (std::size_t a = 0; a < dk; ++a) {
          const double qa = q[i * dk + a];
          const double pq = psi(qa);
          double dpq = z[a] * dden;
          for (std::size_t b = 0; b < dv; ++b) {
            dpq += kv[a * dv + b] * dnum[b];
            dkv[a * dv + b] += pq * dnum[b];
          }
          dz[a] += pq * dden;
          if (dQ) dQ[(g * N + i) * dk + a] += dpq * detail::elu_grad(qa);
        }
      }
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t a = 0; a < dk; ++a) {
          const double ka = k[j * dk + a];
          const double pk = psi(ka);
          double dpk = dz[a];
          for (std::size_t b = 0; b < dv; ++b) {
            dpk += dkv[a * dv + b] * v[j * dv + b];
            if (dV) dV[(g * N + j) * dv + b] += dkv[a * dv + b] * pk;
          }
          if (dK) dK[(g * N + j) * dk + a] += dpk * detail::elu_grad(ka);
        }
    }
  });
}

/// Token assembly for class aggregation: emb [N, L, a], per-class text
/// features [L, b] and per-voxel guidance [N, c] -> [N, L, a + b + c].
inline Var concat_tokens(const Var& emb, const Var& text, const Var& guide) {
  const Shape& es = emb.shape();
  if (es.size() != 3 || text.shape().size() != 2 || guide.shape().size() != 2 || text.shape()[0] != es[1] ||
      guide.shape()[0] != es[0])
    throw ShapeError("concat_tokens: shape mismatch");
  const std::size_t N = es[0], L = es[1], a = es[2], b = text.shape()[1], c = guide.shape()[1], w = a + b + c;
  Tensor y({N, L, w});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t l = 0; l < L; ++l) {
      double* o = y.data() + (n * L + l) * w;
      std::copy_n(emb.value().data() + (n * L + l) * a, a, o);
      std::copy_n(text.value().data() + l * b, b, o + a);
      std::copy_n(guide.value().data() + n * c, c, o + a + b);
    }
  return emb.tape()->record(std::move(y), {emb, text, guide}, [emb, text, guide, N, L, a, b, c, w](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    double* de = t.accum(emb);
    double* dt = t.accum(text);
    double* dg = t.accum(guide);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t l = 0; l < L; ++l) {
        const double* o = g.data() + (n * L + l) * w;
        if (de)
          for (std::size_t i = 0; i < a; ++i) de[(n * L + l) * a + i] += o[i];
        if (dt)
          for (std::size_t i = 0; i < b; ++i) dt[l * b + i] += o[a + i];
        if (dg)
          for (std::size_t i = 0; i < c; ++i) dg[n * c + i] += o[a + b + i];
      }
  });
}

// ---------------------------------------------------------------- losses

/// Mean cross-entropy over rows whose label is >= 0. logits [N, K].
inline Var cross_entropy(const Var& logits, std::vector<int> labels) {
  const std::size_t K = logits.shape().back(), N = logits.size() / K;
  if (labels.size() != N) throw ShapeError("cross_entropy: label count mismatch");
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0) continue;
    if (static_cast<std::size_t>(labels[n]) >= K) throw DomainError("cross_entropy: label out of range");
    const double* r = logits.value().data() + n * K;
    const double mx = *std::max_element(r, r + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(r[k] - mx);
    total += mx + std::log(z) - r[labels[n]];
    ++valid;
  }
  const double denom = valid ? static_cast<double>(valid) : 1.0;
  return logits.tape()->record(Tensor({1}, total / denom), {logits}, [logits, labels, K, N, denom](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0] / denom;
    double* d = t.accum(logits);
    for (std::size_t n = 0; n < N; ++n) {
      if (labels[n] < 0) continue;
      const double* r = t.value(logits.id()).data() + n * K;
      const double mx = *std::max_element(r, r + K);
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) z += std::exp(r[k] - mx);
      for (std::size_t k = 0; k < K; ++k)
        d[n * K + k] += g * (std::exp(r[k] - mx) / z - (static_cast<int>(k) == labels[n] ? 1.0 : 0.0));
    }
  });
}

/// Frustum-proportion term generalised to azimuth sectors: mean over
/// non-empty sectors of KL(gt class mass || predicted class mass).
/// p [N, K] probabilities; sector[n] < 0 or labels[n] < 0 excludes a row.
inline Var sector_kl(const Var& p, std::vector<int> labels, std::vector<int> sector, std::size_t sectors) {
  const std::size_t K = p.shape().back(), N = p.size() / K;
  if (labels.size() != N || sector.size() != N) throw ShapeError("sector_kl: length mismatch");
  std::vector<double> q(sectors * K, 0.0), gt(sectors * K, 0.0), cnt(sectors, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    if (sector[n] < 0 || labels[n] < 0) continue;
    const auto s = static_cast<std::size_t>(sector[n]);
    cnt[s] += 1.0;
    gt[s * K + static_cast<std::size_t>(labels[n])] += 1.0;
    for (std::size_t k = 0; k < K; ++k) q[s * K + k] += p.value()[n * K + k];
  }
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t s = 0; s < sectors; ++s) {
    if (cnt[s] == 0.0) continue;
    ++used;
    for (std::size_t k = 0; k < K; ++k) {
      q[s * K + k] /= cnt[s];
      gt[s * K + k] /= cnt[s];
      if (gt[s * K + k] > 0.0) total += gt[s * K + k] * std::log(gt[s * K + k] / q[s * K + k]);
    }
  }
  const double denom = used ? static_cast<double>(used) : 1.0;
  return p.tape()->record(Tensor({1}, total / denom), {p},
                          [p, sector, labels, q, gt, cnt, K, N, denom](Tape& t, std::size_t self) {
                            const double g = t.grad_buffer(self)[0] / denom;
                            double* d = t.accum(p);
                            for (std::size_t n = 0; n < N; ++n) {
                              if (sector[n] < 0 || labels[n] < 0) continue;
                              const auto s = static_cast<std::size_t>(sector[n]);
                              for (std::size_t k = 0; k < K; ++k)
                                if (gt[s * K + k] > 0.0) d[n * K + k] -= g * gt[s * K + k] / (q[s * K + k] * cnt[s]);
                            }
                          });
}

// ---------------------------------------------------------------- checking

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Central-difference check of tape gradients. Relative error per entry is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-4). With
/// max_per_input > 0, that many randomly chosen entries of each input are
/// checked instead of all of them.
inline GradCheckReport grad_check(const ScalarFn& fn, const std::vector<Tensor>& inputs, double epsilon = 1e-5,
                                  std::size_t max_per_input = 0, std::uint64_t seed = 7) {
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<Var> vs;
    for (const Tensor& x : xs) vs.push_back(t.constant(x));
    return fn(t, vs).value()[0];
  };
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& x : inputs) vars.push_back(tape.variable(x));
  const Var out = fn(tape, vars);
  tape.backward(out);

  GradCheckReport rep;
  std::mt19937_64 rng(seed);
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    std::vector<std::size_t> idx(inputs[k].size());
    std::iota(idx.begin(), idx.end(), 0);
    if (max_per_input > 0 && idx.size() > max_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_input);
    }
    for (std::size_t i : idx) {
      const double x0 = probe[k][i];
      probe[k][i] = x0 + epsilon;
      const double fp = evaluate(probe);
      probe[k][i] = x0 - epsilon;
      const double fm = evaluate(probe);
      probe[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
      rep.max_rel_error = std::max(rep.max_rel_error, err);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace o3n::ad
