#pragma once

#include <functional>
#include <vector>

#include "dacm/tensor.hpp"

namespace dacm::ad {

class Graph;

// Lightweight handle to a node in a Graph.  Values are computed eagerly as
// ops are recorded; gradients appear after Graph::backward.
class Var {
 public:
  Var() = default;
  bool valid() const { return graph_ != nullptr; }
  const Tensor& value() const;
  const Tensor& grad() const;
  Graph* graph() const { return graph_; }
  int id() const { return id_; }

 private:
  friend class Graph;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

// Wengert-list reverse-mode tape over dense double tensors.  Creation order
// is the topological order; backward sweeps it in reverse.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return make(std::move(value), false); }
  Var param(Tensor value) { return make(std::move(value), true); }

  // Seeds d(root)/d(root) = cotangent (ones for a scalar root when omitted)
  // and accumulates gradients into every node with requires_grad.
  void backward(Var root);
  void backward(Var root, const Tensor& cotangent);

  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)].value; }
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)].requires_grad; }
  // True once backward has touched this node.
  bool has_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)].grad_ready; }
  Tensor grad_or_zero(Var v) const {
    return has_grad(v) ? nodes_[static_cast<std::size_t>(v.id_)].grad
                       : Tensor(nodes_[static_cast<std::size_t>(v.id_)].value.dims());
  }

  void clear();
  std::size_t node_count() const { return nodes_.size(); }

  // --- ops -------------------------------------------------------------
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);                     // elementwise
  Var scale(Var a, double c);
  Var relu(Var a);
  Var tanh(Var a);
  Var matmul(Var a, Var b);                  // (n,k) x (k,m)
  Var transpose(Var a);                      // (n,m) -> (m,n)
  Var reshape(Var a, std::vector<int> dims); // same numel
  Var slice_cols(Var a, int start, int len); // (n,m) -> (n,len)
  Var concat_cols(const std::vector<Var>& parts);
  Var add_rowvec(Var a, Var b);              // (n,m) + (m,) broadcast
  Var slice_channels(Var a, int start, int len);  // (c,h,w) -> (len,h,w)
  Var concat_channels(const std::vector<Var>& parts);
  Var sum_all(Var a);                        // -> (1,)

  // 2D cross-correlation with zero same-padding; w is (co,ci,k,k), odd k.
  // Pass an invalid Var for no bias.
  Var conv2d(Var x, Var w, Var b);

  // grid (c,h,w), coords (2,ho,wo) with row 0 = y, row 1 = x in [-1,1]
  // normalized coordinates ((-1,-1) top-left).  Out-of-range coordinates are
  // clamped to the border, which also zeroes their coordinate gradient.
  Var bilinear_sample(Var grid, Var coords);

  // align-corners bilinear resize of (c,h,w) to (c,oh,ow)
  Var upsample_bilinear(Var x, int oh, int ow);

  // softmax over rows of scale * q k^T; q,k are (t,d) -> (t,t)
  Var softmax_qk(Var q, Var k, double scale);

  // (hq,wq,hs,ws) -> (hq,wq), mean over support dims
  Var mean_support(Var c4);

  // out(uq,us) = sum_d ws[d] C(uq, us+d) + sum_d wq[d] C(uq+d, us);
  // ws, wq are (k,k) with odd k, zero padding.
  Var sparse_conv4d(Var c4, Var ws, Var wq);

  Var slice4d_support(Var c4, int uy, int ux);   // -> (1,hs,ws)
  Var slice4d_query(Var c4, int sy, int sx);     // -> (1,hq,wq)
  // slices[uy*wq+ux] is (1,hs,ws); -> (hq,wq,hs,ws)
  Var assemble_support(const std::vector<Var>& slices, int hq, int wq);
  // slices[sy*ws+sx] is (1,hq,wq); -> (hq,wq,hs,ws)
  Var assemble_query(const std::vector<Var>& slices, int hs, int ws);

  // mean over pixels of the 2-class cross entropy of logits (2,h,w) against
  // a 0/1 target map (h,w) -> (1,)
  Var cross_entropy2(Var logits, const Tensor& target);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::function<void(Graph&)> backprop;  // empty for leaves
  };

  Var make(Tensor value, bool requires_grad);
  Var make_op(Tensor value, std::function<void(Graph&)> backprop, bool requires_grad);
  bool any_requires(std::initializer_list<Var> vs) const;
  Tensor& grad_buffer(int id);
  void accumulate(int id, const Tensor& g);

  std::vector<Node> nodes_;
};

}  // namespace dacm::ad
