#pragma once

#include <string>
#include <vector>

#include "lgcaps/params.hpp"
#include "lgcaps/tape.hpp"
#include "lgcaps/tensor.hpp"

namespace lgcaps {

// Ablation modes for a capsule layer. "unary+binary" swaps the graph-derived
// pairwise term for a learned MLP head; "full" uses the parse-derived one.
enum class RouteMode { kBaseline, kUnary, kUnaryBinary, kFull };

RouteMode route_mode_from_string(const std::string& s);
std::string to_string(RouteMode m);

// One layer's worth of capsules living on a tape.
//   X: (n, ch, h, w) feature maps, masked capsules all-zero
//   C: (n, n_q) perception scores in [0,1], masked rows all-zero
struct CapsuleState {
  Ref X;
  Ref C;
  std::vector<char> mask;  // 1 = active

  int n() const;
  int ch() const;
};

// Registers the parameters of one capsule layer under `prefix`:
//   .W           (n_in, n_out, ch, ch)  per-pair 1x1 conv banks
//   .u1.w/.u1.b  (ch, ch), (ch)         unary MLP hidden
//   .u2.w/.u2.b  (ch, n_out), (n_out)   unary logits
//   .pair.*      learned pairwise MLP head, unary+binary mode only
void register_capsule_layer(ParamStore& store, const std::string& prefix, int n_in, int n_out,
                            int ch, RouteMode mode);

// V(i,j) = W_ij * X(i) as a 1x1 convolution; spatial dims flattened, so the
// node's value has shape (n_in, n_out, ch, h*w). Masked capsules are skipped
// and leave zero slabs.
Ref votes(Ref X, Ref W, const std::vector<char>& mask);

// u_i = FC2(relu(FC1(globalmaxpool(X_i)))); weights shared across i. Masked
// rows come back all-zero, i.e. uniform logits.
Ref unary_potential(BoundParams& P, const std::string& prefix, Ref X,
                    const std::vector<char>& mask, int n_out);

// Phi = C * Gp * C^T; symmetric whenever Gp is.
Ref binary_potential(Ref C, const Tensor& gp);

// Phi(i,j) from an MLP on the concatenated pooled features of i and j,
// symmetrized as (Phi + Phi^T)/2; masked pairs zeroed.
Ref learned_binary_potential(BoundParams& P, const std::string& prefix, Ref X,
                             const std::vector<char>& mask);

// Unrolled mean-field: Q0 = softmax(U); T steps of
//   e_i(k) = u_i(k) + w_pair * sum_{j != i, active} Phi(i,j) Q_j(k)
// then R = Q^T with masked rows zeroed. Differentiable end to end.
Ref meanfield_route(Ref U, Ref phi, const std::vector<char>& mask, int iters, double w_pair);

// X'(j) = sum_i R(i,j) V(i,j), reshaped back to (n_out, ch, h, w).
Ref apply_routing(Ref V, Ref R, int h, int w);

// C' = R^T C.
Ref propagate_field(Ref R, Ref C);

// Routing trace for one layer (values, detached) for the route-dump CLI.
struct LayerTrace {
  Tensor R;       // (n_in, n_out)
  Tensor C_next;  // (n_out, n_q)
};

// Full layer: votes -> mode-dependent R -> apply_routing + propagate_field.
// Gp is the group-correlation matrix for the next level (ignored except in
// full mode). The returned state has all capsules active.
CapsuleState capsule_layer_forward(BoundParams& P, const std::string& prefix,
                                   const CapsuleState& in, const Tensor& gp, RouteMode mode,
                                   int iters, double w_pair, LayerTrace* trace = nullptr);

// Exhaustive CRF MAP over all n_out^n_in labelings of
//   score(k) = sum_i U(i, k_i) + w_pair * sum_{i<j} Phi(i,j) [k_i == k_j].
// Ties go to the lexicographically smallest labeling. `margin` is the gap to
// the best score among labelings differing from the argmax.
struct CrfMapResult {
  std::vector<int> labels;
  double score = 0.0;
  double margin = 0.0;
};

CrfMapResult brute_force_crf_map(const Tensor& u, const Tensor& phi, double w_pair);

}  // namespace lgcaps
