#include "lgcaps/tape.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "lgcaps/kernels.hpp"

namespace lgcaps {

namespace {

Tape& same_tape(Ref a, Ref b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw TapeError(std::string(op) + ": operands live on different tapes");
  return *a.tape;
}

std::size_t n_elems(const Tensor& t) { return static_cast<std::size_t>(t.numel()); }

}  // namespace

Ref Tape::leaf(const Tensor& t) { return leaf(t, t.requires_grad); }

Ref Tape::leaf(const Tensor& t, bool requires_grad) {
  if (!t.defined()) throw TapeError("leaf: undefined tensor");
  Node n;
  n.value = t;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Ref{this, static_cast<int>(nodes_.size()) - 1};
}

Ref Tape::push(Tensor value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Ref{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad.defined()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Ref loss) {
  if (loss.tape != this) throw TapeError("backward: loss from a different tape");
  if (nodes_.empty()) throw TapeError("backward: tape is empty");
  const Tensor& lv = value(loss);
  if (lv.numel() != 1)
    throw TapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
  grad_buf(loss.id).at(0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && n.grad.defined()) n.backward(*this, n.grad);
  }
}

void Tape::clear() { nodes_.clear(); }

// ---- helpers ----

namespace {

// Accumulate g into node id's grad buffer (same shape).
void acc(Tape& t, int id, const Tensor& g) {
  Tensor& dst = t.grad_buf(id);
  kernels::axpy(1.0, g.data(), dst.data(), n_elems(g));
}

template <typename Fwd, typename Bwd>
Ref unary_elementwise(Ref a, const char* /*op*/, Fwd fwd, Bwd dfdy_or_x) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  Tensor out(av.shape());
  const std::size_t n = n_elems(av);
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(av.data()[i]);
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  const int aid = a.id;
  Tensor y = out;  // shared data, cheap
  Tensor x = av;
  return t.push(std::move(out), true, [aid, y, x, dfdy_or_x](Tape& tp, const Tensor& g) {
    Tensor& da = tp.grad_buf(aid);
    const std::size_t n = n_elems(y);
    for (std::size_t i = 0; i < n; ++i)
      da.data()[i] += g.data()[i] * dfdy_or_x(y.data()[i], x.data()[i]);
  });
}

}  // namespace

// ---- elementwise ----

Ref add(Ref a, Ref b) {
  Tape& t = same_tape(a, b, "add");
  const Tensor &av = t.value(a), &bv = t.value(b);
  require_same_shape(av, bv, "add");
  Tensor out(av.shape());
  kernels::add(av.data(), bv.data(), out.data(), n_elems(av));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int aid = a.id, bid = b.id;
  return t.push(std::move(out), true, [aid, bid](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(aid)) acc(tp, aid, g);
    if (tp.requires_grad(bid)) acc(tp, bid, g);
  });
}

Ref sub(Ref a, Ref b) {
  Tape& t = same_tape(a, b, "sub");
  const Tensor &av = t.value(a), &bv = t.value(b);
  require_same_shape(av, bv, "sub");
  Tensor out(av.shape());
  kernels::sub(av.data(), bv.data(), out.data(), n_elems(av));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int aid = a.id, bid = b.id;
  return t.push(std::move(out), true, [aid, bid](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(aid)) acc(tp, aid, g);
    if (tp.requires_grad(bid)) kernels::axpy(-1.0, g.data(), tp.grad_buf(bid).data(), n_elems(g));
  });
}

Ref mul(Ref a, Ref b) {
  Tape& t = same_tape(a, b, "mul");
  const Tensor &av = t.value(a), &bv = t.value(b);
  require_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  kernels::mul(av.data(), bv.data(), out.data(), n_elems(av));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int aid = a.id, bid = b.id;
  Tensor ac = av, bc = bv;
  return t.push(std::move(out), true, [aid, bid, ac, bc](Tape& tp, const Tensor& g) {
    const std::size_t n = n_elems(g);
    if (tp.requires_grad(aid)) {
      Tensor& da = tp.grad_buf(aid);
      for (std::size_t i = 0; i < n; ++i) da.data()[i] += g.data()[i] * bc.data()[i];
    }
    if (tp.requires_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (std::size_t i = 0; i < n; ++i) db.data()[i] += g.data()[i] * ac.data()[i];
    }
  });
}

Ref add_scalar(Ref a, double c) {
  return unary_elementwise(
      a, "add_scalar", [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

Ref mul_scalar(Ref a, double c) {
  return unary_elementwise(
      a, "mul_scalar", [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

Ref one_minus(Ref a) {
  return unary_elementwise(
      a, "one_minus", [](double x) { return 1.0 - x; },
      [](double, double) { return -1.0; });
}

Ref relu(Ref a) {
  return unary_elementwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double, double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Ref tanh(Ref a) {
  return unary_elementwise(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double y, double) { return 1.0 - y * y; });
}

Ref sigmoid(Ref a) {
  return unary_elementwise(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double y, double) { return y * (1.0 - y); });
}

// ---- reductions & shape ----

Ref sum(Ref a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  Tensor out = Tensor::scalar(kernels::sum(av.data(), n_elems(av)));
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  const int aid = a.id;
  return t.push(std::move(out), true, [aid](Tape& tp, const Tensor& g) {
    Tensor& da = tp.grad_buf(aid);
    const double gs = g.at(0);
    const std::size_t n = n_elems(da);
    for (std::size_t i = 0; i < n; ++i) da.data()[i] += gs;
  });
}

Ref reshape(Ref a, Shape shape) {
  Tape& t = *a.tape;
  Tensor out = t.value(a).reshaped(std::move(shape));
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  const int aid = a.id;
  return t.push(std::move(out), true, [aid](Tape& tp, const Tensor& g) {
    Tensor& da = tp.grad_buf(aid);
    kernels::axpy(1.0, g.data(), da.data(), n_elems(g));
  });
}

Ref transpose(Ref a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw ShapeError("transpose: want rank 2, got " + shape_str(av.shape()));
  const int r = av.dim(0), c = av.dim(1);
  Tensor out(Shape{c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  const int aid = a.id;
  return t.push(std::move(out), true, [aid, r, c](Tape& tp, const Tensor& g) {
    Tensor& da = tp.grad_buf(aid);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) da.at(i, j) += g.at(j, i);
  });
}

Ref row(Ref a, int i) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 2) throw ShapeError("row: want rank 2, got " + shape_str(av.shape()));
  if (i < 0 || i >= av.dim(0)) throw ShapeError("row: index " + std::to_string(i) +
                                                " out of range for " + shape_str(av.shape()));
  const int c = av.dim(1);
  Tensor out(Shape{c});
  std::copy_n(av.data() + static_cast<std::size_t>(i) * c, c, out.data());
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  const int aid = a.id;
  return t.push(std::move(out), true, [aid, i, c](Tape& tp, const Tensor& g) {
    Tensor& da = tp.grad_buf(aid);
    kernels::axpy(1.0, g.data(), da.data() + static_cast<std::size_t>(i) * c, c);
  });
}

Ref rows_select(Ref table, std::vector<int> idx) {
  Tape& t = *table.tape;
  const Tensor& tv = t.value(table);
  if (tv.rank() != 2)
    throw ShapeError("rows_select: want rank 2, got " + shape_str(tv.shape()));
  const int c = tv.dim(1);
  for (int i : idx)
    if (i < 0 || i >= tv.dim(0))
      throw ShapeError("rows_select: index " + std::to_string(i) + " out of range for " +
                       shape_str(tv.shape()));
  Tensor out(Shape{static_cast<int>(idx.size()), c});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(tv.data() + static_cast<std::size_t>(idx[r]) * c, c,
                out.data() + r * static_cast<std::size_t>(c));
  if (!t.requires_grad(table)) return t.push(std::move(out), false, nullptr);
  const int tid = table.id;
  return t.push(std::move(out), true, [tid, idx = std::move(idx), c](Tape& tp, const Tensor& g) {
    Tensor& dt = tp.grad_buf(tid);
    for (std::size_t r = 0; r < idx.size(); ++r)
      kernels::axpy(1.0, g.data() + r * static_cast<std::size_t>(c),
                    dt.data() + static_cast<std::size_t>(idx[r]) * c, c);
  });
}

Ref concat(const std::vector<Ref>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = *parts[0].tape;
  const Tensor& first = t.value(parts[0]);
  const int rank = first.rank();
  if (axis != 0 && !(axis == 1 && rank == 2))
    throw ShapeError("concat: unsupported axis " + std::to_string(axis) + " for rank " +
                     std::to_string(rank));
  Shape out_shape = first.shape();
  bool rg = false;
  int total = 0;
  for (Ref p : parts) {
    const Tensor& pv = t.value(p);
    if (pv.rank() != rank)
      throw ShapeError("concat: rank mismatch " + shape_str(first.shape()) + " vs " +
                       shape_str(pv.shape()));
    for (int d = 0; d < rank; ++d)
      if (d != axis && pv.dim(d) != first.dim(d))
        throw ShapeError("concat: shape mismatch " + shape_str(first.shape()) + " vs " +
                         shape_str(pv.shape()));
    total += pv.dim(axis);
    rg = rg || t.requires_grad(p);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor out(out_shape);

  if (axis == 0) {
    std::size_t off = 0;
    for (Ref p : parts) {
      const Tensor& pv = t.value(p);
      std::copy_n(pv.data(), n_elems(pv), out.data() + off);
      off += n_elems(pv);
    }
  } else {  // axis == 1, rank 2
    const int r = first.dim(0);
    std::size_t col_off = 0;
    for (Ref p : parts) {
      const Tensor& pv = t.value(p);
      const int c = pv.dim(1);
      for (int i = 0; i < r; ++i)
        std::copy_n(pv.data() + static_cast<std::size_t>(i) * c, c,
                    out.data() + static_cast<std::size_t>(i) * total + col_off);
      col_off += static_cast<std::size_t>(c);
    }
  }

  if (!rg) return t.push(std::move(out), false, nullptr);
  std::vector<int> ids;
  std::vector<int> sizes;  // extent along axis
  for (Ref p : parts) {
    ids.push_back(p.id);
    sizes.push_back(t.value(p).dim(axis));
  }
  const int rows = (axis == 1) ? first.dim(0) : 0;
  return t.push(std::move(out), true,
                [ids, sizes, axis, total, rows](Tape& tp, const Tensor& g) {
    if (axis == 0) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (tp.requires_grad(ids[k])) {
          Tensor& d = tp.grad_buf(ids[k]);
          kernels::axpy(1.0, g.data() + off, d.data(), n_elems(d));
          off += n_elems(d);
        } else {
          off += n_elems(tp.value(ids[k]));
        }
      }
    } else {
      std::size_t col_off = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        const int c = sizes[k];
        if (tp.requires_grad(ids[k])) {
          Tensor& d = tp.grad_buf(ids[k]);
          for (int i = 0; i < rows; ++i)
            kernels::axpy(1.0, g.data() + static_cast<std::size_t>(i) * total + col_off,
                          d.data() + static_cast<std::size_t>(i) * c, c);
        }
        col_off += static_cast<std::size_t>(c);
      }
    }
  });
}

// ---- linear algebra ----

Ref matmul(Ref a, Ref b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor &av = t.value(a), &bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  for (int i = 0; i < m; ++i) {
    double* out_i = out.data() + static_cast<std::size_t>(i) * n;
    const double* a_i = av.data() + static_cast<std::size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk)
      kernels::axpy(a_i[kk], bv.data() + static_cast<std::size_t>(kk) * n, out_i, n);
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int aid = a.id, bid = b.id;
  Tensor ac = av, bc = bv;
  return t.push(std::move(out), true, [aid, bid, ac, bc, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(aid)) {
      Tensor& da = tp.grad_buf(aid);
      for (int i = 0; i < m; ++i) {
        const double* g_i = g.data() + static_cast<std::size_t>(i) * n;
        double* da_i = da.data() + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk)
          da_i[kk] += kernels::dot(g_i, bc.data() + static_cast<std::size_t>(kk) * n, n);
      }
    }
    if (tp.requires_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (int i = 0; i < m; ++i) {
        const double* g_i = g.data() + static_cast<std::size_t>(i) * n;
        const double* a_i = ac.data() + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk)
          kernels::axpy(a_i[kk], g_i, db.data() + static_cast<std::size_t>(kk) * n, n);
      }
    }
  });
}

Ref vecmat(Ref v, Ref m) {
  Tape& t = same_tape(v, m, "vecmat");
  const Tensor &vv = t.value(v), &mv = t.value(m);
  if (vv.rank() != 1 || mv.rank() != 2 || vv.dim(0) != mv.dim(0))
    throw ShapeError("vecmat: incompatible shapes " + shape_str(vv.shape()) + " vs " +
                     shape_str(mv.shape()));
  const int k = vv.dim(0), n = mv.dim(1);  // snapshot: push() below may move nodes
  Ref v2 = reshape(v, Shape{1, k});
  Ref y = matmul(v2, m);
  return reshape(y, Shape{n});
}

Ref add_rowvec(Ref m, Ref v) {
  Tape& t = same_tape(m, v, "add_rowvec");
  const Tensor &mv = t.value(m), &vv = t.value(v);
  if (mv.rank() != 2 || vv.rank() != 1 || mv.dim(1) != vv.dim(0))
    throw ShapeError("add_rowvec: incompatible shapes " + shape_str(mv.shape()) + " vs " +
                     shape_str(vv.shape()));
  const int r = mv.dim(0), c = mv.dim(1);
  Tensor out(mv.shape());
  for (int i = 0; i < r; ++i)
    kernels::add(mv.data() + static_cast<std::size_t>(i) * c, vv.data(),
                 out.data() + static_cast<std::size_t>(i) * c, c);
  const bool rg = t.requires_grad(m) || t.requires_grad(v);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int mid = m.id, vid = v.id;
  return t.push(std::move(out), true, [mid, vid, r, c](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(mid)) acc(tp, mid, g);
    if (tp.requires_grad(vid)) {
      Tensor& dv = tp.grad_buf(vid);
      for (int i = 0; i < r; ++i)
        kernels::axpy(1.0, g.data() + static_cast<std::size_t>(i) * c, dv.data(), c);
    }
  });
}

Ref add_chan_bias(Ref x, Ref b) {
  Tape& t = same_tape(x, b, "add_chan_bias");
  const Tensor &xv = t.value(x), &bv = t.value(b);
  if (xv.rank() != 3 || bv.rank() != 1 || xv.dim(0) != bv.dim(0))
    throw ShapeError("add_chan_bias: incompatible shapes " + shape_str(xv.shape()) + " vs " +
                     shape_str(bv.shape()));
  const int c = xv.dim(0);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out(xv.shape());
  for (int ch = 0; ch < c; ++ch) {
    const double* src = xv.data() + ch * hw;
    double* dst = out.data() + ch * hw;
    const double bias = bv.at(ch);
    for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int xid = x.id, bid = b.id;
  return t.push(std::move(out), true, [xid, bid, c, hw](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(xid)) acc(tp, xid, g);
    if (tp.requires_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (int ch = 0; ch < c; ++ch) db.at(ch) += kernels::sum(g.data() + ch * hw, hw);
    }
  });
}

Ref broadcast_chan(Ref v, int h, int w) {
  Tape& t = *v.tape;
  const Tensor& vv = t.value(v);
  if (vv.rank() != 1) throw ShapeError("broadcast_chan: want rank 1, got " + shape_str(vv.shape()));
  const int c = vv.dim(0);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out(Shape{c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    double* dst = out.data() + ch * hw;
    const double val = vv.at(ch);
    for (std::size_t i = 0; i < hw; ++i) dst[i] = val;
  }
  if (!t.requires_grad(v)) return t.push(std::move(out), false, nullptr);
  const int vid = v.id;
  return t.push(std::move(out), true, [vid, c, hw](Tape& tp, const Tensor& g) {
    Tensor& dv = tp.grad_buf(vid);
    for (int ch = 0; ch < c; ++ch) dv.at(ch) += kernels::sum(g.data() + ch * hw, hw);
  });
}

Ref add_colvec(Ref m, Ref v) {
  Tape& t = same_tape(m, v, "add_colvec");
  const Tensor &mv = t.value(m), &vv = t.value(v);
  if (mv.rank() != 2 || vv.rank() != 1 || mv.dim(0) != vv.dim(0))
    throw ShapeError("add_colvec: incompatible shapes " + shape_str(mv.shape()) + " vs " +
                     shape_str(vv.shape()));
  const int r = mv.dim(0), c = mv.dim(1);
  Tensor out(mv.shape());
  for (int i = 0; i < r; ++i) {
    const double* src = mv.data() + static_cast<std::size_t>(i) * c;
    double* dst = out.data() + static_cast<std::size_t>(i) * c;
    const double bias = vv.at(i);
    for (int j = 0; j < c; ++j) dst[j] = src[j] + bias;
  }
  const bool rg = t.requires_grad(m) || t.requires_grad(v);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int mid = m.id, vid = v.id;
  return t.push(std::move(out), true, [mid, vid, r, c](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(mid)) acc(tp, mid, g);
    if (tp.requires_grad(vid)) {
      Tensor& dv = tp.grad_buf(vid);
      for (int i = 0; i < r; ++i)
        dv.at(i) += kernels::sum(g.data() + static_cast<std::size_t>(i) * c, c);
    }
  });
}

namespace {

Shape drop_last(const Shape& s) {
  Shape out(s.begin(), s.end() - 1);
  return out;
}

}  // namespace

Ref max_lastdim(Ref x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() < 2 || xv.rank() > 3)
    throw ShapeError("max_lastdim: want rank 2 or 3, got " + shape_str(xv.shape()));
  const int n = xv.dim(xv.rank() - 1);
  const std::size_t outer = static_cast<std::size_t>(xv.numel()) / n;
  Tensor out(drop_last(xv.shape()));
  std::vector<std::size_t> arg(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = xv.data() + o * n;
    std::size_t best = 0;
    for (int i = 1; i < n; ++i)
      if (src[i] > src[best]) best = i;
    arg[o] = best;
    out.data()[o] = src[best];
  }
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  const int xid = x.id;
  return t.push(std::move(out), true,
                [xid, n, outer, arg = std::move(arg)](Tape& tp, const Tensor& g) {
                  Tensor& dx = tp.grad_buf(xid);
                  for (std::size_t o = 0; o < outer; ++o) dx.data()[o * n + arg[o]] += g.data()[o];
                });
}

Ref mean_lastdim(Ref x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() < 2 || xv.rank() > 3)
    throw ShapeError("mean_lastdim: want rank 2 or 3, got " + shape_str(xv.shape()));
  const int n = xv.dim(xv.rank() - 1);
  const std::size_t outer = static_cast<std::size_t>(xv.numel()) / n;
  Tensor out(drop_last(xv.shape()));
  for (std::size_t o = 0; o < outer; ++o) out.data()[o] = kernels::sum(xv.data() + o * n, n) / n;
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  const int xid = x.id;
  return t.push(std::move(out), true, [xid, n, outer](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buf(xid);
    for (std::size_t o = 0; o < outer; ++o) {
      const double gi = g.data()[o] / n;
      double* dst = dx.data() + o * n;
      for (int i = 0; i < n; ++i) dst[i] += gi;
    }
  });
}

// ---- convolution & pooling ----

namespace {

struct ConvDims {
  int ci, h, w, co, kh, kw, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, int stride, int pad) {
  if (x.rank() != 3 || k.rank() != 4 || x.dim(0) != k.dim(1))
    throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) + " vs " +
                     shape_str(k.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  ConvDims d;
  d.ci = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.co = k.dim(0);
  d.kh = k.dim(2);
  d.kw = k.dim(3);
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.kh > d.h + 2 * pad || d.kw > d.w + 2 * pad)
    throw ShapeError("conv2d: kernel " + shape_str(k.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  return d;
}

// Unrolled patches, one row per (ci,kh,kw), one column per output location.
Tensor im2col(const Tensor& x, const ConvDims& d, int stride, int pad) {
  const int rows = d.ci * d.kh * d.kw;
  const int cols = d.ho * d.wo;
  Tensor m(Shape{rows, cols});
  double* mp = m.data();
  const double* xp = x.data();
  int r = 0;
  for (int ci = 0; ci < d.ci; ++ci) {
    const double* xc = xp + static_cast<std::size_t>(ci) * d.h * d.w;
    for (int kh = 0; kh < d.kh; ++kh) {
      for (int kw = 0; kw < d.kw; ++kw, ++r) {
        double* mr = mp + static_cast<std::size_t>(r) * cols;
        for (int ho = 0; ho < d.ho; ++ho) {
          const int hi = ho * stride + kh - pad;
          double* mrow = mr + static_cast<std::size_t>(ho) * d.wo;
          if (hi < 0 || hi >= d.h) continue;  // stays zero
          const double* xrow = xc + static_cast<std::size_t>(hi) * d.w;
          for (int wo = 0; wo < d.wo; ++wo) {
            const int wi = wo * stride + kw - pad;
            if (wi >= 0 && wi < d.w) mrow[wo] = xrow[wi];
          }
        }
      }
    }
  }
  return m;
}

void col2im_acc(const Tensor& dm, const ConvDims& d, int stride, int pad, Tensor& dx) {
  const int cols = d.ho * d.wo;
  const double* mp = dm.data();
  double* xp = dx.data();
  int r = 0;
  for (int ci = 0; ci < d.ci; ++ci) {
    double* xc = xp + static_cast<std::size_t>(ci) * d.h * d.w;
    for (int kh = 0; kh < d.kh; ++kh) {
      for (int kw = 0; kw < d.kw; ++kw, ++r) {
        const double* mr = mp + static_cast<std::size_t>(r) * cols;
        for (int ho = 0; ho < d.ho; ++ho) {
          const int hi = ho * stride + kh - pad;
          if (hi < 0 || hi >= d.h) continue;
          double* xrow = xc + static_cast<std::size_t>(hi) * d.w;
          const double* mrow = mr + static_cast<std::size_t>(ho) * d.wo;
          for (int wo = 0; wo < d.wo; ++wo) {
            const int wi = wo * stride + kw - pad;
            if (wi >= 0 && wi < d.w) xrow[wi] += mrow[wo];
          }
        }
      }
    }
  }
}

}  // namespace

Ref conv2d(Ref x, Ref w, Ref bias, int stride, int pad) {
  Tape& t = *x.tape;
  const Tensor &xv = t.value(x), &wv = t.value(w);
  const ConvDims d = conv_dims(xv, wv, stride, pad);
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Tensor& bv = t.value(bias);
    if (bv.rank() != 1 || bv.dim(0) != d.co)
      throw ShapeError("conv2d: bias shape " + shape_str(bv.shape()) + " does not match kernels " +
                       shape_str(wv.shape()));
  }
  const int rows = d.ci * d.kh * d.kw;
  const int cols = d.ho * d.wo;
  Tensor col = im2col(xv, d, stride, pad);
  Tensor out(Shape{d.co, d.ho, d.wo});
  for (int co = 0; co < d.co; ++co) {
    double* out_c = out.data() + static_cast<std::size_t>(co) * cols;
    if (has_bias) {
      const double b = t.value(bias).at(co);
      for (int i = 0; i < cols; ++i) out_c[i] = b;
    }
    const double* w_c = wv.data() + static_cast<std::size_t>(co) * rows;
    for (int r = 0; r < rows; ++r)
      kernels::axpy(w_c[r], col.data() + static_cast<std::size_t>(r) * cols, out_c, cols);
  }

  bool rg = t.requires_grad(x) || t.requires_grad(w) || (has_bias && t.requires_grad(bias));
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int xid = x.id, wid = w.id, bid = has_bias ? bias.id : -1;
  Tensor wc = wv;
  return t.push(std::move(out), true,
                [xid, wid, bid, wc, col, d, stride, pad, rows, cols](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(wid)) {
      Tensor& dw = tp.grad_buf(wid);
      for (int co = 0; co < d.co; ++co) {
        const double* g_c = g.data() + static_cast<std::size_t>(co) * cols;
        double* dw_c = dw.data() + static_cast<std::size_t>(co) * rows;
        for (int r = 0; r < rows; ++r)
          dw_c[r] += kernels::dot(g_c, col.data() + static_cast<std::size_t>(r) * cols, cols);
      }
    }
    if (bid >= 0 && tp.requires_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (int co = 0; co < d.co; ++co)
        db.at(co) += kernels::sum(g.data() + static_cast<std::size_t>(co) * cols, cols);
    }
    if (tp.requires_grad(xid)) {
      Tensor dcol(Shape{rows, cols});
      for (int co = 0; co < d.co; ++co) {
        const double* g_c = g.data() + static_cast<std::size_t>(co) * cols;
        const double* w_c = wc.data() + static_cast<std::size_t>(co) * rows;
        for (int r = 0; r < rows; ++r)
          kernels::axpy(w_c[r], g_c, dcol.data() + static_cast<std::size_t>(r) * cols, cols);
      }
      col2im_acc(dcol, d, stride, pad, tp.grad_buf(xid));
    }
  });
}

namespace {

struct PoolDims {
  int c, h, w, ho, wo;
};

PoolDims pool_dims(const Tensor& x, int k, int stride, const char* op) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": want rank 3, got " + shape_str(x.shape()));
  if (k < 1 || stride < 1) throw ShapeError(std::string(op) + ": bad window/stride");
  if (k > x.dim(1) || k > x.dim(2))
    throw ShapeError(std::string(op) + ": window " + std::to_string(k) + " larger than input " +
                     shape_str(x.shape()));
  PoolDims d;
  d.c = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.ho = (d.h - k) / stride + 1;
  d.wo = (d.w - k) / stride + 1;
  return d;
}

}  // namespace

Ref maxpool2d(Ref x, int k, int stride) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const PoolDims d = pool_dims(xv, k, stride, "maxpool2d");
  Tensor out(Shape{d.c, d.ho, d.wo});
  std::vector<int> arg(static_cast<std::size_t>(d.c) * d.ho * d.wo);
  std::size_t o = 0;
  for (int c = 0; c < d.c; ++c) {
    const double* xc = xv.data() + static_cast<std::size_t>(c) * d.h * d.w;
    for (int ho = 0; ho < d.ho; ++ho)
      for (int wo = 0; wo < d.wo; ++wo, ++o) {
        double best = -1e300;
        int best_i = 0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            const int flat = (ho * stride + i) * d.w + wo * stride + j;
            if (xc[flat] > best) {
              best = xc[flat];
              best_i = flat;
            }
          }
        out.data()[o] = best;
        arg[o] = best_i;
      }
  }
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  const int xid = x.id;
  const std::size_t chw = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t out_hw = static_cast<std::size_t>(d.ho) * d.wo;
  return t.push(std::move(out), true,
                [xid, arg = std::move(arg), c = d.c, chw, out_hw](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buf(xid);
    std::size_t o = 0;
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < out_hw; ++i, ++o)
        dx.data()[ch * chw + static_cast<std::size_t>(arg[o])] += g.data()[o];
  });
}

Ref avgpool2d(Ref x, int k, int stride) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const PoolDims d = pool_dims(xv, k, stride, "avgpool2d");
  const double inv = 1.0 / (static_cast<double>(k) * k);
  Tensor out(Shape{d.c, d.ho, d.wo});
  std::size_t o = 0;
  for (int c = 0; c < d.c; ++c) {
    const double* xc = xv.data() + static_cast<std::size_t>(c) * d.h * d.w;
    for (int ho = 0; ho < d.ho; ++ho)
      for (int wo = 0; wo < d.wo; ++wo, ++o) {
        double s = 0.0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) s += xc[(ho * stride + i) * d.w + wo * stride + j];
        out.data()[o] = s * inv;
      }
  }
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  const int xid = x.id;
  return t.push(std::move(out), true, [xid, d, k, stride, inv](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buf(xid);
    std::size_t o = 0;
    for (int c = 0; c < d.c; ++c) {
      double* xc = dx.data() + static_cast<std::size_t>(c) * d.h * d.w;
      for (int ho = 0; ho < d.ho; ++ho)
        for (int wo = 0; wo < d.wo; ++wo, ++o) {
          const double gv = g.data()[o] * inv;
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) xc[(ho * stride + i) * d.w + wo * stride + j] += gv;
        }
    }
  });
}

Ref global_max_pool(Ref x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() != 3)
    throw ShapeError("global_max_pool: want rank 3, got " + shape_str(xv.shape()));
  const int c = xv.dim(0);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out(Shape{c});
  std::vector<int> arg(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = xv.data() + ch * hw;
    int best = 0;
    for (std::size_t i = 1; i < hw; ++i)
      if (xc[i] > xc[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    out.at(ch) = xc[static_cast<std::size_t>(best)];
    arg[static_cast<std::size_t>(ch)] = best;
  }
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  const int xid = x.id;
  return t.push(std::move(out), true, [xid, arg = std::move(arg), c, hw](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buf(xid);
    for (int ch = 0; ch < c; ++ch)
      dx.data()[ch * hw + static_cast<std::size_t>(arg[static_cast<std::size_t>(ch)])] += g.at(ch);
  });
}

Ref global_avg_pool(Ref x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() != 3)
    throw ShapeError("global_avg_pool: want rank 3, got " + shape_str(xv.shape()));
  const int c = xv.dim(0);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  const double inv = 1.0 / static_cast<double>(hw);
  Tensor out(Shape{c});
  for (int ch = 0; ch < c; ++ch) out.at(ch) = kernels::sum(xv.data() + ch * hw, hw) * inv;
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  const int xid = x.id;
  return t.push(std::move(out), true, [xid, c, hw, inv](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buf(xid);
    for (int ch = 0; ch < c; ++ch) {
      double* d = dx.data() + ch * hw;
      const double gv = g.at(ch) * inv;
      for (std::size_t i = 0; i < hw; ++i) d[i] += gv;
    }
  });
}

// ---- softmax & loss ----

Ref softmax(Ref a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (av.rank() != 1 && av.rank() != 2)
    throw ShapeError("softmax: want rank 1 or 2, got " + shape_str(av.shape()));
  const int cols = av.dim(av.rank() - 1);
  const int rows = static_cast<int>(av.numel()) / cols;
  Tensor out(av.shape());
  for (int r = 0; r < rows; ++r) {
    const double* x = av.data() + static_cast<std::size_t>(r) * cols;
    double* y = out.data() + static_cast<std::size_t>(r) * cols;
    const double m = kernels::max(x, static_cast<std::size_t>(cols));
    double s = 0.0;
    for (int i = 0; i < cols; ++i) {
      y[i] = std::exp(x[i] - m);
      s += y[i];
    }
    const double inv = 1.0 / s;
    for (int i = 0; i < cols; ++i) y[i] *= inv;
  }
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  const int aid = a.id;
  Tensor y = out;
  return t.push(std::move(out), true, [aid, y, rows, cols](Tape& tp, const Tensor& g) {
    Tensor& da = tp.grad_buf(aid);
    for (int r = 0; r < rows; ++r) {
      const double* yr = y.data() + static_cast<std::size_t>(r) * cols;
      const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
      double* dr = da.data() + static_cast<std::size_t>(r) * cols;
      const double dot = kernels::dot(gr, yr, static_cast<std::size_t>(cols));
      for (int i = 0; i < cols; ++i) dr[i] += yr[i] * (gr[i] - dot);
    }
  });
}

Ref cross_entropy(Ref logits, int target) {
  Tape& t = *logits.tape;
  const Tensor& lv = t.value(logits);
  if (lv.rank() != 1)
    throw ShapeError("cross_entropy: want rank 1 logits, got " + shape_str(lv.shape()));
  const int n = lv.dim(0);
  if (target < 0 || target >= n)
    throw ShapeError("cross_entropy: target " + std::to_string(target) + " out of range for " +
                     shape_str(lv.shape()));
  const double m = kernels::max(lv.data(), static_cast<std::size_t>(n));
  double s = 0.0;
  Tensor p(Shape{n});
  for (int i = 0; i < n; ++i) {
    p.at(i) = std::exp(lv.at(i) - m);
    s += p.at(i);
  }
  const double inv = 1.0 / s;
  for (int i = 0; i < n; ++i) p.at(i) *= inv;
  Tensor out = Tensor::scalar(m + std::log(s) - lv.at(target));
  if (!t.requires_grad(logits)) return t.push(std::move(out), false, nullptr);
  const int lid = logits.id;
  return t.push(std::move(out), true, [lid, p, target, n](Tape& tp, const Tensor& g) {
    Tensor& dl = tp.grad_buf(lid);
    const double gs = g.at(0);
    for (int i = 0; i < n; ++i) dl.at(i) += gs * (p.at(i) - (i == target ? 1.0 : 0.0));
  });
}

}  // namespace lgcaps
