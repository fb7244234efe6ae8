#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "lgcaps/tensor.hpp"

// Define-by-run reverse-mode differentiation. A Tape records one forward
// pass; nodes are appended in evaluation order, so reverse node order is a
// valid topological order for the backward sweep. Tapes are rebuilt every
// forward pass and are confined to one thread.

namespace lgcaps {

class Tape;

struct Ref {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Closure signature: receives the tape and the node's own output gradient,
// accumulates into the input nodes' gradient buffers.
using BackwardFn = std::function<void(Tape&, const Tensor&)>;

class Tape {
 public:
  // Leaf holding an externally owned value. requires_grad defaults to the
  // tensor's own flag.
  Ref leaf(const Tensor& t);
  Ref leaf(const Tensor& t, bool requires_grad);
  Ref constant(const Tensor& t) { return leaf(t, false); }

  // Appends a computed node. The backward closure is dropped when
  // requires_grad is false.
  Ref push(Tensor value, bool requires_grad, BackwardFn backward);

  const Tensor& value(Ref r) const { return nodes_[static_cast<std::size_t>(r.id)].value; }
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(Ref r) const { return nodes_[static_cast<std::size_t>(r.id)].requires_grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // Gradient buffer for a node, zero-allocated on first touch.
  Tensor& grad_buf(int id);
  // Gradient of a node after backward(); zeros if the node was never reached.
  const Tensor& grad(Ref r) { return grad_buf(r.id); }

  // Seeds d(loss)/d(loss) = 1 and runs the reverse sweep. The loss must be a
  // scalar (one element) and the tape must not be empty.
  void backward(Ref loss);

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  // deque: references into nodes_ stay valid while ops push new nodes
  std::deque<Node> nodes_;
};

// ---- Primitive operations ----
// All ops validate shapes up front and throw ShapeError naming both shapes.

Ref add(Ref a, Ref b);
Ref sub(Ref a, Ref b);
Ref mul(Ref a, Ref b);  // elementwise
Ref add_scalar(Ref a, double c);
Ref mul_scalar(Ref a, double c);
Ref one_minus(Ref a);  // 1 - a

Ref relu(Ref a);
Ref tanh(Ref a);
Ref sigmoid(Ref a);

Ref sum(Ref a);  // -> scalar
Ref reshape(Ref a, Shape shape);
Ref transpose(Ref a);                               // 2D
Ref row(Ref a, int i);                              // 2D -> 1D copy of row i
Ref rows_select(Ref table, std::vector<int> idx);   // 2D gather of rows
Ref concat(const std::vector<Ref>& parts, int axis);

Ref matmul(Ref a, Ref b);  // [m,k] x [k,n]
Ref vecmat(Ref v, Ref m);  // [k] x [k,n] -> [n]

Ref add_rowvec(Ref m, Ref v);    // [r,c] + [c] broadcast over rows
Ref add_colvec(Ref m, Ref v);    // [r,c] + [r] broadcast over columns
Ref add_chan_bias(Ref x, Ref b);  // [c,h,w] + [c]
Ref broadcast_chan(Ref v, int h, int w);  // [c] -> [c,h,w]

Ref max_lastdim(Ref x);   // rank 2 or 3 -> drops the last axis (argmax backward)
Ref mean_lastdim(Ref x);  // rank 2 or 3 -> drops the last axis

// x: [ci,h,w], w: [co,ci,kh,kw]; bias optional (invalid Ref to skip).
Ref conv2d(Ref x, Ref w, Ref bias, int stride, int pad);
Ref maxpool2d(Ref x, int k, int stride);
Ref avgpool2d(Ref x, int k, int stride);
Ref global_max_pool(Ref x);  // [c,h,w] -> [c]
Ref global_avg_pool(Ref x);  // [c,h,w] -> [c]

Ref softmax(Ref a);  // over last dim; rank 1 or 2
Ref cross_entropy(Ref logits, int target);  // 1D logits -> scalar

inline Ref operator+(Ref a, Ref b) { return add(a, b); }
inline Ref operator-(Ref a, Ref b) { return sub(a, b); }
inline Ref operator*(Ref a, Ref b) { return mul(a, b); }

}  // namespace lgcaps
