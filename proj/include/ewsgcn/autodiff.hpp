#pragma once

// Reverse-mode automatic differentiation over dense Tensors.
//
// A Tape records one forward pass. Every op appends a node whose parents
// already live on the tape, so node ids are a topological order and backward
// is a single reverse sweep. Params are owned by models; the tape only keeps
// pointers to them and flushes leaf gradients into Param::grad at the end of
// backward().

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ewsgcn/tensor.hpp"

namespace ewsgcn {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;

  Param() = default;
  Param(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  std::size_t numel() const noexcept { return value.size(); }
  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the gradient flowing into a node and pushes it to the parents.
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, nullptr); }

  /// Leaf that requires a gradient but is not tied to a Param.
  Var variable(Tensor value) { return push(std::move(value), {}, nullptr, true, nullptr); }

  /// Leaf bound to a Param. With track=false it is recorded as a constant and
  /// receives no gradient. The leaf reads p.value in place, so the Param must
  /// not change while the tape is alive.
  Var param(Param& p, bool track = true) {
    nodes_.push_back(Node{Tensor{}, Tensor{}, {}, nullptr, track, track ? &p : nullptr, &p.value});
    return Var(this, nodes_.size() - 1);
  }

  /// Appends an op node. The node requires grad iff any parent does; the
  /// backward closure is dropped otherwise.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool rg = false;
    for (std::size_t p : parents) rg = rg || nodes_[p].requires_grad;
    if (!rg) return push(std::move(value), {}, nullptr, false, nullptr);
    return push(std::move(value), std::move(parents), std::move(fn), true, nullptr);
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, zero-initialised on first use. Returns nullptr
  /// for nodes that do not require a gradient.
  Tensor* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    const Tensor& v = n.borrowed ? *n.borrowed : n.value;
    if (n.grad.size() != v.size() || n.grad.shape() != v.shape()) n.grad = Tensor(v.shape());
    return &n.grad;
  }

  /// Accumulated gradient of a node after backward (empty if none reached it).
  const Tensor& grad(const Var& v) const { return nodes_[v.id()].grad; }

  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("loss belongs to another tape");
    if (loss.value().size() != 1) {
      throw DimensionError("backward requires a scalar loss, got shape " +
                           to_string(loss.shape()));
    }
    if (consumed_) throw std::logic_error("tape already consumed by backward()");
    consumed_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())->fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) {
        Param& p = *n.param;
        if (p.grad.shape() != p.value.shape()) p.zero_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    Param* param = nullptr;
    const Tensor* borrowed = nullptr;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, bool rg,
           Param* p) {
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(parents), std::move(fn), rg, p});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline MapMat as_mat(Tensor& t) {
  return MapMat(t.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}
inline CMapMat as_mat(const Tensor& t) {
  return CMapMat(t.data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::invalid_argument("operands live on different tapes");
  }
  return *a.tape();
}

inline void require_matrix(const Var& v, const char* op) {
  if (v.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         to_string(v.shape()));
  }
}

inline void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

// df receives (input, output) of the forward map.
template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const std::size_t xid = x.id();
  const std::size_t yid = tape.size();
  return tape.record(std::move(y), {xid}, [xid, yid, df](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(xid);
    const Tensor& yv = t.value(yid);
    Tensor* gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * df(xv[i], yv[i]);
  });
}

enum class BinaryKind { add, sub, mul };

inline Var binary(const Var& a, const Var& b, BinaryKind kind, const char* name) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool a_scalar = av.size() == 1 && bv.size() != 1;
  const bool b_scalar = bv.size() == 1 && av.size() != 1;
  const bool both_single = av.size() == 1 && bv.size() == 1;
  if (!a_scalar && !b_scalar && !both_single && av.shape() != bv.shape()) {
    throw DimensionError(std::string(name) + ": incompatible shapes " + to_string(av.shape()) +
                         " and " + to_string(bv.shape()));
  }
  const Tensor& big = a_scalar ? bv : av;
  Tensor y(big.shape());
  auto ai = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  for (std::size_t i = 0; i < y.size(); ++i) {
    switch (kind) {
      case BinaryKind::add: y[i] = ai(i) + bi(i); break;
      case BinaryKind::sub: y[i] = ai(i) - bi(i); break;
      case BinaryKind::mul: y[i] = ai(i) * bi(i); break;
    }
  }
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  return tape.record(std::move(y), {aid, bid},
                     [aid, bid, kind, a_scalar, b_scalar](Tape& t, const Tensor& g) {
                       const Tensor& av = t.value(aid);
                       const Tensor& bv = t.value(bid);
                       if (Tensor* ga = t.grad_buffer(aid)) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           double d = g[i];
                           if (kind == BinaryKind::mul) d *= b_scalar ? bv[0] : bv[i];
                           (*ga)[a_scalar ? 0 : i] += d;
                         }
                       }
                       if (Tensor* gb = t.grad_buffer(bid)) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           double d = g[i];
                           if (kind == BinaryKind::sub) d = -d;
                           if (kind == BinaryKind::mul) d *= a_scalar ? av[0] : av[i];
                           (*gb)[b_scalar ? 0 : i] += d;
                         }
                       }
                     });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) { return detail::binary(a, b, detail::BinaryKind::add, "add"); }
inline Var sub(const Var& a, const Var& b) { return detail::binary(a, b, detail::BinaryKind::sub, "sub"); }
inline Var mul(const Var& a, const Var& b) { return detail::binary(a, b, detail::BinaryKind::mul, "mul"); }

/// y = c * x.
inline Var scale(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

/// y = x + c.
inline Var add_scalar(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

/// Subgradient at exactly 0 is 0.
inline Var relu(const Var& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  return detail::unary(x, sigmoid_value, [](double, double s) { return s * (1.0 - s); });
}

inline Var tanh(const Var& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double t) { return 1.0 - t * t; });
}

inline Var exp(const Var& x) {
  return detail::unary(x, [](double v) { return std::exp(v); },
                       [](double, double y) { return y; });
}

inline Var log(const Var& x) {
  return detail::unary(x, [](double v) { return std::log(v); },
                       [](double v, double) { return 1.0 / v; });
}

inline Var elu(const Var& x, double alpha = 1.0) {
  return detail::unary(x, [alpha](double v) { return v > 0.0 ? v : alpha * std::expm1(v); },
                       [alpha](double v, double y) { return v > 0.0 ? 1.0 : y + alpha; });
}

inline Var leaky_relu(const Var& x, double slope = 0.2) {
  return detail::unary(x, [slope](double v) { return v > 0.0 ? v : slope * v; },
                       [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(av.shape()) + " x " +
                         to_string(bv.shape()));
  }
  Tensor c(Shape{av.rows(), bv.cols()});
  if (c.size() > 0 && av.cols() > 0) detail::as_mat(c).noalias() = detail::as_mat(av) * detail::as_mat(bv);
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  return tape.record(std::move(c), {aid, bid}, [aid, bid](Tape& t, const Tensor& g) {
    if (g.size() == 0) return;
    const auto gm = detail::as_mat(g);
    if (Tensor* ga = t.grad_buffer(aid); ga && ga->size() > 0) {
      detail::as_mat(*ga).noalias() += gm * detail::as_mat(t.value(bid)).transpose();
    }
    if (Tensor* gb = t.grad_buffer(bid); gb && gb->size() > 0) {
      detail::as_mat(*gb).noalias() += detail::as_mat(t.value(aid)).transpose() * gm;
    }
  });
}

/// Row-wise bias: y[r, c] = a[r, c] + b[c].
inline Var add_bias(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_matrix(a, "add_bias");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (bv.size() != av.cols()) {
    throw DimensionError("add_bias: bias " + to_string(bv.shape()) + " vs input " +
                         to_string(av.shape()));
  }
  Tensor y = av;
  const std::size_t n = av.rows(), m = av.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) y(r, c) += bv[c];
  const std::size_t aid = a.id(), bid = b.id();
  return tape.record(std::move(y), {aid, bid}, [aid, bid, n, m](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(aid)) detail::add_into(*ga, g);
    if (Tensor* gb = t.grad_buffer(bid)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) (*gb)[c] += g[r * m + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum of all elements, as a scalar.
inline Var sum(const Var& x) {
  Tape& tape = *x.tape();
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t xid = x.id();
  return tape.record(Tensor::scalar(s), {xid}, [xid](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[0];
  });
}

inline Var mean(const Var& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

namespace detail {

inline Var reduce_axis(const Var& x, std::size_t axis, bool average) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const double w = average ? (len ? 1.0 / static_cast<double>(len) : 0.0) : 1.0;
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor y(os);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += w * xv[(o * len + k) * inner + i];
  const std::size_t xid = x.id();
  return x.tape()->record(std::move(y), {xid}, [=](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) (*gx)[(o * len + k) * inner + i] += w * g[o * inner + i];
  });
}

}  // namespace detail

inline Var sum(const Var& x, std::size_t axis) { return detail::reduce_axis(x, axis, false); }
inline Var mean(const Var& x, std::size_t axis) { return detail::reduce_axis(x, axis, true); }

// ---------------------------------------------------------------------------
// Row indexing

/// y[r] = x[index[r]].
inline Var gather_rows(const Var& x, std::vector<std::size_t> index) {
  detail::require_matrix(x, "gather_rows");
  const Tensor& xv = x.value();
  const std::size_t m = xv.cols();
  Tensor y(Shape{index.size(), m});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= xv.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(index[r]) + " out of range " +
                           std::to_string(xv.rows()));
    }
    std::copy_n(xv.data() + index[r] * m, m, y.data() + r * m);
  }
  const std::size_t xid = x.id();
  return x.tape()->record(std::move(y), {xid}, [xid, m, index = std::move(index)](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_buffer(xid);
    for (std::size_t r = 0; r < index.size(); ++r) {
      double* d = gx->data() + index[r] * m;
      const double* s = g.data() + r * m;
      for (std::size_t c = 0; c < m; ++c) d[c] += s[c];
    }
  });
}

/// y[index[r]] += x[r]; y has `rows` rows.
inline Var scatter_add_rows(const Var& x, std::vector<std::size_t> index, std::size_t rows) {
  detail::require_matrix(x, "scatter_add_rows");
  const Tensor& xv = x.value();
  if (index.size() != xv.rows()) {
    throw DimensionError("scatter_add_rows: " + std::to_string(index.size()) + " indices for " +
                         std::to_string(xv.rows()) + " rows");
  }
  const std::size_t m = xv.cols();
  Tensor y(Shape{rows, m});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) throw DimensionError("scatter_add_rows: index out of range");
    double* d = y.data() + index[r] * m;
    const double* s = xv.data() + r * m;
    for (std::size_t c = 0; c < m; ++c) d[c] += s[c];
  }
  const std::size_t xid = x.id();
  return x.tape()->record(std::move(y), {xid}, [xid, m, index = std::move(index)](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_buffer(xid);
    for (std::size_t r = 0; r < index.size(); ++r) {
      double* d = gx->data() + r * m;
      const double* s = g.data() + index[r] * m;
      for (std::size_t c = 0; c < m; ++c) d[c] += s[c];
    }
  });
}

/// Rows [begin, end).
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_rows");
  const Tensor& xv = x.value();
  if (begin > end || end > xv.rows()) throw DimensionError("slice_rows: bad range");
  const std::size_t m = xv.cols();
  Tensor y(Shape{end - begin, m},
           std::vector<double>(xv.data() + begin * m, xv.data() + end * m));
  const std::size_t xid = x.id();
  return x.tape()->record(std::move(y), {xid}, [xid, begin, m](Tape& t, const Tensor& g) {
    Tensor* gx = t.grad_buffer(xid);
    double* d = gx->data() + begin * m;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  std::size_t rows = 0;
  const std::size_t m = parts.front().value().cols();
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::require_matrix(p, "concat_rows");
    detail::same_tape(parts.front(), p);
    if (p.value().cols() != m) throw DimensionError("concat_rows: column counts differ");
    rows += p.value().rows();
    ids.push_back(p.id());
  }
  std::vector<double> data;
  data.reserve(rows * m);
  for (const Var& p : parts) data.insert(data.end(), p.value().values().begin(), p.value().values().end());
  return parts.front().tape()->record(Tensor(Shape{rows, m}, std::move(data)), ids,
                                      [ids](Tape& t, const Tensor& g) {
                                        std::size_t off = 0;
                                        for (std::size_t id : ids) {
                                          const std::size_t n = t.value(id).size();
                                          if (Tensor* gp = t.grad_buffer(id)) {
                                            for (std::size_t i = 0; i < n; ++i) (*gp)[i] += g[off + i];
                                          }
                                          off += n;
                                        }
                                      });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts.front().value().rows();
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_matrix(p, "concat_cols");
    detail::same_tape(parts.front(), p);
    if (p.value().rows() != n) {
      throw DimensionError("concat_cols: row counts differ, " + to_string(parts.front().shape()) +
                           " vs " + to_string(p.shape()));
    }
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor y(Shape{n, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(pv.data() + r * widths[k], widths[k], y.data() + r * total + off);
    off += widths[k];
  }
  return parts.front().tape()->record(std::move(y), ids, [ids, widths, n, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = t.grad_buffer(ids[k])) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) (*gp)[r * widths[k] + c] += g[r * total + off + c];
      }
      off += widths[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Segment ops: rows of x are grouped by segment[r] in [0, segments).

/// Per column, y[r] = x[r] / sum of x over the rows of the same segment.
/// Segments whose column sum is 0 yield 0 (and pass zero gradient). Inputs
/// are expected to be nonnegative.
inline Var segment_normalize(const Var& x, std::vector<std::size_t> segment, std::size_t segments) {
  detail::require_matrix(x, "segment_normalize");
  const Tensor& xv = x.value();
  if (segment.size() != xv.rows()) throw DimensionError("segment_normalize: segment size mismatch");
  const std::size_t m = xv.cols();
  Tensor denom(Shape{segments, m});
  for (std::size_t r = 0; r < segment.size(); ++r)
    for (std::size_t c = 0; c < m; ++c) denom(segment[r], c) += xv(r, c);
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < segment.size(); ++r)
    for (std::size_t c = 0; c < m; ++c) {
      const double d = denom(segment[r], c);
      y(r, c) = d > 0.0 ? xv(r, c) / d : 0.0;
    }
  const std::size_t xid = x.id();
  Tape& tape = *x.tape();
  const std::size_t yid = tape.size();
  return tape.record(std::move(y), {xid},
                     [xid, yid, m, segments, segment = std::move(segment), denom = std::move(denom)](
                         Tape& t, const Tensor& g) {
                       const Tensor& yv = t.value(yid);
                       // dL/dx_r = (g_r - sum_{r' in seg} g_r' y_r') / denom
                       Tensor dot(Shape{segments, m});
                       for (std::size_t r = 0; r < segment.size(); ++r)
                         for (std::size_t c = 0; c < m; ++c) dot(segment[r], c) += g[r * m + c] * yv(r, c);
                       Tensor* gx = t.grad_buffer(xid);
                       for (std::size_t r = 0; r < segment.size(); ++r)
                         for (std::size_t c = 0; c < m; ++c) {
                           const double d = denom(segment[r], c);
                           if (d > 0.0) (*gx)(r, c) += (g[r * m + c] - dot(segment[r], c)) / d;
                         }
                     });
}

/// Per column softmax over the rows of each segment.
inline Var segment_softmax(const Var& x, std::vector<std::size_t> segment, std::size_t segments) {
  detail::require_matrix(x, "segment_softmax");
  const Tensor& xv = x.value();
  if (segment.size() != xv.rows()) throw DimensionError("segment_softmax: segment size mismatch");
  const std::size_t m = xv.cols();
  Tensor mx(Shape{segments, m}, -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < segment.size(); ++r)
    for (std::size_t c = 0; c < m; ++c) mx(segment[r], c) = std::max(mx(segment[r], c), xv(r, c));
  Tensor y(xv.shape());
  Tensor denom(Shape{segments, m});
  for (std::size_t r = 0; r < segment.size(); ++r)
    for (std::size_t c = 0; c < m; ++c) {
      y(r, c) = std::exp(xv(r, c) - mx(segment[r], c));
      denom(segment[r], c) += y(r, c);
    }
  for (std::size_t r = 0; r < segment.size(); ++r)
    for (std::size_t c = 0; c < m; ++c) y(r, c) /= denom(segment[r], c);
  const std::size_t xid = x.id();
  Tape& tape = *x.tape();
  const std::size_t yid = tape.size();
  return tape.record(std::move(y), {xid},
                     [xid, yid, m, segments, segment = std::move(segment)](Tape& t, const Tensor& g) {
                       const Tensor& yv = t.value(yid);
                       Tensor dot(Shape{segments, m});
                       for (std::size_t r = 0; r < segment.size(); ++r)
                         for (std::size_t c = 0; c < m; ++c) dot(segment[r], c) += g[r * m + c] * yv(r, c);
                       Tensor* gx = t.grad_buffer(xid);
                       for (std::size_t r = 0; r < segment.size(); ++r)
                         for (std::size_t c = 0; c < m; ++c)
                           (*gx)(r, c) += yv(r, c) * (g[r * m + c] - dot(segment[r], c));
                     });
}

// ---------------------------------------------------------------------------
// Training helpers

/// Inverted dropout: zero each element with probability p, scale survivors by
/// 1/(1-p).
template <class Rng>
Var dropout(const Var& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  Tensor mask(x.shape());
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? s : 0.0;
  return mul(x, x.tape()->constant(std::move(mask)));
}

/// Mean binary cross-entropy over a vector of logits, computed stably.
inline Var bce_with_logits(const Var& logits, std::span<const double> labels) {
  const Tensor& z = logits.value();
  if (z.size() != labels.size() || z.size() == 0) {
    throw DimensionError("bce_with_logits: " + std::to_string(z.size()) + " logits for " +
                         std::to_string(labels.size()) + " labels");
  }
  const double n = static_cast<double>(z.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    // log(1 + e^v) - y v
    loss += std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))) - labels[i] * v;
  }
  const std::size_t zid = logits.id();
  std::vector<double> y(labels.begin(), labels.end());
  return logits.tape()->record(Tensor::scalar(loss / n), {zid},
                               [zid, n, y = std::move(y)](Tape& t, const Tensor& g) {
                                 const Tensor& zv = t.value(zid);
                                 Tensor* gz = t.grad_buffer(zid);
                                 for (std::size_t i = 0; i < y.size(); ++i)
                                   (*gz)[i] += g[0] * (sigmoid_value(zv[i]) - y[i]) / n;
                               });
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Compares analytic gradients of `loss_fn` with central differences over
/// every coordinate of `params`. The error of one coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckResult grad_check_detailed(const std::function<Var(Tape&)>& loss_fn,
                                           std::span<Param* const> params, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check step must be positive");
  for (Param* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    if (!std::isfinite(loss.value().item())) throw NumericalError("grad_check: non-finite loss");
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape tape;
    const double v = loss_fn(tape).value().item();
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss");
    return v;
  };
  GradCheckResult res;
  for (Param* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double fp = eval();
      p->value[i] = saved - h;
      const double fm = eval();
      p->value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p->grad[i];
      if (!std::isfinite(analytic)) throw NumericalError("grad_check: non-finite gradient");
      const double err = std::abs(analytic - numeric) /
                         std::max({1.0, std::abs(analytic), std::abs(numeric)});
      ++res.coordinates;
      if (err > res.max_relative_error) {
        res.max_relative_error = err;
        res.worst_param = p->name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

inline double grad_check(const std::function<Var(Tape&)>& loss_fn, std::span<Param* const> params,
                         double h = 1e-5) {
  return grad_check_detailed(loss_fn, params, h).max_relative_error;
}

}  // namespace ewsgcn
