#include "lgcaps/routing.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>

#include "lgcaps/kernels.hpp"

namespace lgcaps {

namespace {

Tape& same_tape(Ref a, Ref b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw TapeError(std::string(op) + ": operands live on different tapes");
  return *a.tape;
}

// (n_in, n_out) constant with active rows filled by `fill`.
Tensor row_mask_tensor(const std::vector<char>& mask, int n_out, double fill) {
  const int n_in = static_cast<int>(mask.size());
  Tensor m(Shape{n_in, n_out});
  for (int i = 0; i < n_in; ++i)
    if (mask[static_cast<std::size_t>(i)])
      for (int j = 0; j < n_out; ++j) m.at(i, j) = fill;
  return m;
}

// (n, n) constant: 1 where both ends are active, optionally zero diagonal.
Tensor pair_mask_tensor(const std::vector<char>& mask, bool zero_diag) {
  const int n = static_cast<int>(mask.size());
  Tensor m(Shape{n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (zero_diag && i == j) continue;
      if (mask[static_cast<std::size_t>(i)] && mask[static_cast<std::size_t>(j)])
        m.at(i, j) = 1.0;
    }
  return m;
}

// Shared pooled-feature head: (n, ch, h, w) -> global max pool -> (n, ch).
Ref pooled_features(Ref X) {
  Tape& t = *X.tape;
  const Tensor& xv = t.value(X);
  if (xv.rank() != 4)
    throw ShapeError("pooled_features: want rank-4 capsules, got " + shape_str(xv.shape()));
  const int n = xv.dim(0), ch = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  return max_lastdim(reshape(X, Shape{n, ch, hw}));
}

}  // namespace

int CapsuleState::n() const { return X.tape->value(X).dim(0); }
int CapsuleState::ch() const { return X.tape->value(X).dim(1); }

RouteMode route_mode_from_string(const std::string& s) {
  if (s == "baseline") return RouteMode::kBaseline;
  if (s == "unary") return RouteMode::kUnary;
  if (s == "unary+binary" || s == "unary+binary-learned") return RouteMode::kUnaryBinary;
  if (s == "full") return RouteMode::kFull;
  throw ConfigError("unknown mode '" + s + "' (want baseline, unary, unary+binary, full)");
}

std::string to_string(RouteMode m) {
  switch (m) {
    case RouteMode::kBaseline: return "baseline";
    case RouteMode::kUnary: return "unary";
    case RouteMode::kUnaryBinary: return "unary+binary";
    case RouteMode::kFull: return "full";
  }
  return "?";
}

void register_capsule_layer(ParamStore& store, const std::string& prefix, int n_in, int n_out,
                            int ch, RouteMode mode) {
  store.add(prefix + ".W", Shape{n_in, n_out, ch, ch}, ch);
  store.add(prefix + ".u1.w", Shape{ch, ch}, ch);
  store.add(prefix + ".u1.b", Shape{ch}, 0);
  store.add(prefix + ".u2.w", Shape{ch, n_out}, ch);
  store.add(prefix + ".u2.b", Shape{n_out}, 0);
  if (mode == RouteMode::kUnaryBinary) {
    const int hidden = 16;
    store.add(prefix + ".pair.w1", Shape{2 * ch, hidden}, 2 * ch);
    store.add(prefix + ".pair.b1", Shape{hidden}, 0);
    store.add(prefix + ".pair.w2", Shape{hidden, 1}, hidden);
    store.add(prefix + ".pair.b2", Shape{1}, 0);
  }
}

Ref votes(Ref X, Ref W, const std::vector<char>& mask) {
  Tape& t = same_tape(X, W, "votes");
  const Tensor &xv = t.value(X), &wv = t.value(W);
  if (xv.rank() != 4 || wv.rank() != 4)
    throw ShapeError("votes: want rank-4 X and W, got " + shape_str(xv.shape()) + " and " +
                     shape_str(wv.shape()));
  const int n_in = xv.dim(0), ch = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const int n_out = wv.dim(1);
  if (wv.dim(0) != n_in || wv.dim(2) != ch || wv.dim(3) != ch)
    throw ShapeError("votes: W " + shape_str(wv.shape()) + " does not match X " +
                     shape_str(xv.shape()));
  if (static_cast<int>(mask.size()) != n_in)
    throw ShapeError("votes: mask size " + std::to_string(mask.size()) + " vs n_in " +
                     std::to_string(n_in));

  const std::size_t shw = static_cast<std::size_t>(hw);
  const std::size_t chch = static_cast<std::size_t>(ch) * ch;
  Tensor out(Shape{n_in, n_out, ch, hw});
  for (int i = 0; i < n_in; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const double* xi = xv.data() + static_cast<std::size_t>(i) * ch * shw;
    for (int j = 0; j < n_out; ++j) {
      const double* wij = wv.data() + (static_cast<std::size_t>(i) * n_out + j) * chch;
      double* vij = out.data() + (static_cast<std::size_t>(i) * n_out + j) * ch * shw;
      for (int co = 0; co < ch; ++co)
        for (int ci = 0; ci < ch; ++ci)
          kernels::axpy(wij[static_cast<std::size_t>(co) * ch + ci], xi + ci * shw,
                        vij + co * shw, shw);
    }
  }

  const bool rg = t.requires_grad(X) || t.requires_grad(W);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int xid = X.id, wid = W.id;
  Tensor xcap = xv, wcap = wv;  // shared data
  return t.push(std::move(out), true,
                [xid, wid, xcap, wcap, mask, n_in, n_out, ch, shw, chch](Tape& tp,
                                                                         const Tensor& g) {
                  const bool dx = tp.requires_grad(xid), dw = tp.requires_grad(wid);
                  double* dxd = dx ? tp.grad_buf(xid).data() : nullptr;
                  double* dwd = dw ? tp.grad_buf(wid).data() : nullptr;
                  for (int i = 0; i < n_in; ++i) {
                    if (!mask[static_cast<std::size_t>(i)]) continue;
                    const double* xi = xcap.data() + static_cast<std::size_t>(i) * ch * shw;
                    double* dxi = dx ? dxd + static_cast<std::size_t>(i) * ch * shw : nullptr;
                    for (int j = 0; j < n_out; ++j) {
                      const std::size_t pair = static_cast<std::size_t>(i) * n_out + j;
                      const double* gij = g.data() + pair * ch * shw;
                      const double* wij = wcap.data() + pair * chch;
                      for (int co = 0; co < ch; ++co) {
                        const double* gco = gij + co * shw;
                        for (int ci = 0; ci < ch; ++ci) {
                          if (dw)
                            dwd[pair * chch + co * ch + ci] += kernels::dot(gco, xi + ci * shw,
                                                                            shw);
                          if (dx)
                            kernels::axpy(wij[static_cast<std::size_t>(co) * ch + ci], gco,
                                          dxi + ci * shw, shw);
                        }
                      }
                    }
                  }
                });
}

Ref unary_potential(BoundParams& P, const std::string& prefix, Ref X,
                    const std::vector<char>& mask, int n_out) {
  Ref pooled = pooled_features(X);
  Ref h = relu(add_rowvec(matmul(pooled, P[prefix + ".u1.w"]), P[prefix + ".u1.b"]));
  Ref u = add_rowvec(matmul(h, P[prefix + ".u2.w"]), P[prefix + ".u2.b"]);
  // zero logits on masked rows = uniform distribution after softmax
  Ref rows = P.tape->constant(row_mask_tensor(mask, n_out, 1.0));
  return mul(u, rows);
}

Ref binary_potential(Ref C, const Tensor& gp) {
  Tape& t = *C.tape;
  const Tensor& cv = t.value(C);
  if (cv.rank() != 2 || gp.rank() != 2 || gp.dim(0) != gp.dim(1) || cv.dim(1) != gp.dim(0))
    throw ShapeError("binary_potential: C " + shape_str(cv.shape()) + " vs G' " +
                     shape_str(gp.shape()));
  Ref g = t.constant(gp);
  return matmul(matmul(C, g), transpose(C));
}

Ref learned_binary_potential(BoundParams& P, const std::string& prefix, Ref X,
                             const std::vector<char>& mask) {
  Tape& t = *P.tape;
  Ref pooled = pooled_features(X);
  const int n = t.value(pooled).dim(0);
  Ref w1 = P[prefix + ".pair.w1"], b1 = P[prefix + ".pair.b1"];
  Ref w2 = P[prefix + ".pair.w2"], b2 = P[prefix + ".pair.b2"];
  std::vector<Ref> cells;
  cells.reserve(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      Ref pij = concat({row(pooled, i), row(pooled, j)}, 0);
      Ref hidden = relu(add(vecmat(pij, w1), b1));
      cells.push_back(add(vecmat(hidden, w2), b2));
    }
  Ref phi = reshape(concat(cells, 0), Shape{n, n});
  Ref sym = mul_scalar(add(phi, transpose(phi)), 0.5);
  return mul(sym, t.constant(pair_mask_tensor(mask, /*zero_diag=*/false)));
}

Ref meanfield_route(Ref U, Ref phi, const std::vector<char>& mask, int iters, double w_pair) {
  Tape& t = same_tape(U, phi, "meanfield_route");
  const Tensor &uv = t.value(U), &pv = t.value(phi);
  if (uv.rank() != 2 || pv.rank() != 2 || pv.dim(0) != pv.dim(1) || pv.dim(0) != uv.dim(0))
    throw ShapeError("meanfield_route: U " + shape_str(uv.shape()) + " vs Phi " +
                     shape_str(pv.shape()));
  if (static_cast<int>(mask.size()) != uv.dim(0))
    throw ShapeError("meanfield_route: mask size " + std::to_string(mask.size()) + " vs n_in " +
                     std::to_string(uv.dim(0)));
  if (iters < 1) throw ConfigError("meanfield_route: need at least 1 iteration");
  if (w_pair < 0.0) throw ConfigError("meanfield_route: w_pair must be >= 0");
  if (!uv.all_finite() || !pv.all_finite())
    throw Error("meanfield_route: non-finite potentials");

  Ref pair = t.constant(pair_mask_tensor(mask, /*zero_diag=*/true));
  Ref phi_eff = mul(phi, pair);
  Ref q = softmax(U);
  for (int step = 0; step < iters; ++step)
    q = softmax(add(U, mul_scalar(matmul(phi_eff, q), w_pair)));
  Ref rows = t.constant(row_mask_tensor(mask, uv.dim(1), 1.0));
  return mul(q, rows);
}

Ref apply_routing(Ref V, Ref R, int h, int w) {
  Tape& t = same_tape(V, R, "apply_routing");
  const Tensor &vv = t.value(V), &rv = t.value(R);
  if (vv.rank() != 4 || rv.rank() != 2 || rv.dim(0) != vv.dim(0) || rv.dim(1) != vv.dim(1) ||
      vv.dim(3) != h * w)
    throw ShapeError("apply_routing: V " + shape_str(vv.shape()) + " vs R " +
                     shape_str(rv.shape()));
  const int n_in = vv.dim(0), n_out = vv.dim(1), ch = vv.dim(2);
  const std::size_t slab = static_cast<std::size_t>(ch) * vv.dim(3);

  Tensor out(Shape{n_out, ch, h, w});
  for (int i = 0; i < n_in; ++i)
    for (int j = 0; j < n_out; ++j) {
      const double r = rv.at(i, j);
      if (r == 0.0) continue;
      kernels::axpy(r, vv.data() + (static_cast<std::size_t>(i) * n_out + j) * slab,
                    out.data() + static_cast<std::size_t>(j) * slab, slab);
    }

  const bool rg = t.requires_grad(V) || t.requires_grad(R);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const int vid = V.id, rid = R.id;
  Tensor vcap = vv, rcap = rv;
  return t.push(std::move(out), true,
                [vid, rid, vcap, rcap, n_in, n_out, slab](Tape& tp, const Tensor& g) {
                  const bool dv = tp.requires_grad(vid), dr = tp.requires_grad(rid);
                  double* dvd = dv ? tp.grad_buf(vid).data() : nullptr;
                  double* drd = dr ? tp.grad_buf(rid).data() : nullptr;
                  for (int j = 0; j < n_out; ++j) {
                    const double* gj = g.data() + static_cast<std::size_t>(j) * slab;
                    for (int i = 0; i < n_in; ++i) {
                      const std::size_t pair = static_cast<std::size_t>(i) * n_out + j;
                      if (dr) drd[pair] += kernels::dot(gj, vcap.data() + pair * slab, slab);
                      if (dv) {
                        const double r = rcap.data()[pair];
                        if (r != 0.0) kernels::axpy(r, gj, dvd + pair * slab, slab);
                      }
                    }
                  }
                });
}

Ref propagate_field(Ref R, Ref C) { return matmul(transpose(R), C); }

CapsuleState capsule_layer_forward(BoundParams& P, const std::string& prefix,
                                   const CapsuleState& in, const Tensor& gp, RouteMode mode,
                                   int iters, double w_pair, LayerTrace* trace) {
  Tape& t = *P.tape;
  Ref W = P[prefix + ".W"];
  const Tensor& wv = t.value(W);
  const int n_out = wv.dim(1);
  const Tensor& xv = t.value(in.X);
  const int h = xv.dim(2), w = xv.dim(3);

  Ref V = votes(in.X, W, in.mask);
  Ref R;
  switch (mode) {
    case RouteMode::kBaseline:
      R = t.constant(row_mask_tensor(in.mask, n_out, 1.0 / n_out));
      break;
    case RouteMode::kUnary: {
      Ref u = unary_potential(P, prefix, in.X, in.mask, n_out);
      R = mul(softmax(u), t.constant(row_mask_tensor(in.mask, n_out, 1.0)));
      break;
    }
    case RouteMode::kUnaryBinary: {
      Ref u = unary_potential(P, prefix, in.X, in.mask, n_out);
      Ref phi = learned_binary_potential(P, prefix, in.X, in.mask);
      R = meanfield_route(u, phi, in.mask, iters, w_pair);
      break;
    }
    case RouteMode::kFull: {
      Ref u = unary_potential(P, prefix, in.X, in.mask, n_out);
      Ref phi = binary_potential(in.C, gp);
      R = meanfield_route(u, phi, in.mask, iters, w_pair);
      break;
    }
  }

  CapsuleState out;
  out.X = apply_routing(V, R, h, w);
  out.C = propagate_field(R, in.C);
  out.mask.assign(static_cast<std::size_t>(n_out), 1);
  if (trace != nullptr) {
    trace->R = t.value(R).clone();
    trace->C_next = t.value(out.C).clone();
  }
  return out;
}

CrfMapResult brute_force_crf_map(const Tensor& u, const Tensor& phi, double w_pair) {
  if (u.rank() != 2 || phi.rank() != 2 || phi.dim(0) != phi.dim(1) || phi.dim(0) != u.dim(0))
    throw ShapeError("brute_force_crf_map: U " + shape_str(u.shape()) + " vs Phi " +
                     shape_str(phi.shape()));
  const int n = u.dim(0), k = u.dim(1);
  double combos = 1.0;
  for (int i = 0; i < n; ++i) {
    combos *= k;
    if (combos > 1e6)
      throw Error("brute_force_crf_map: instance too large (" + std::to_string(k) + "^" +
                  std::to_string(n) + " labelings)");
  }

  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  CrfMapResult best;
  double second = -std::numeric_limits<double>::infinity();
  bool first = true;
  while (true) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += u.at(i, labels[static_cast<std::size_t>(i)]);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)])
          s += w_pair * phi.at(i, j);

    if (first || s > best.score) {
      if (!first) second = std::max(second, best.score);
      best.labels = labels;
      best.score = s;
      first = false;
    } else {
      second = std::max(second, s);
    }

    // lexicographic successor: bump the last digit, carry leftward
    int pos = n - 1;
    while (pos >= 0 && labels[static_cast<std::size_t>(pos)] == k - 1) {
      labels[static_cast<std::size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
    ++labels[static_cast<std::size_t>(pos)];
  }
  best.margin = best.score - second;
  return best;
}

}  // namespace lgcaps
