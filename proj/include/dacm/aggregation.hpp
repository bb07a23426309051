#pragma once

#include <string>
#include <vector>

#include "dacm/autodiff.hpp"
#include "dacm/cost_volume.hpp"
#include "dacm/rng.hpp"
#include "dacm/tensor.hpp"

namespace dacm {

// Parameters of one deformable-attention direction (SDT or QDT).  Cost
// slices are single-channel, so tokens are lifted to c' = heads * head_dim
// channels by a learned 1x1 embedding before the q/k/v projections, and a
// branch output is projected back to one channel by out_w/out_b.
struct AttentionParams {
  int heads = 4;
  int head_dim = 8;
  int offset_hidden = 8;
  double max_offset = 0.5;  // tanh bound on offsets, normalized coordinates

  Tensor embed_w;  // (1, c')
  Tensor embed_b;  // (c')
  Tensor w_q, w_k, w_v;  // (c', c')
  Tensor out_w;    // (c', 1)
  Tensor out_b;    // (1)
  Tensor off_w1;   // (hidden, 1, 3, 3)
  Tensor off_b1;   // (hidden)
  Tensor off_w2;   // (2*heads, hidden, 3, 3)
  Tensor off_b2;   // (2*heads)

  int cprime() const { return heads * head_dim; }

  static AttentionParams init(int heads, int head_dim, int offset_hidden,
                              double max_offset, Rng& rng);

  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  static std::vector<std::string> tensor_names();
};

// Weight-sparsified 4D convolution: one 2D kernel convolving the support
// dimensions and one convolving the query dimensions.
struct Sparse4dConvParams {
  Tensor support_kernel;  // (k, k), odd k
  Tensor query_kernel;    // (k, k)

  static Sparse4dConvParams init(int kernel_size, Rng& rng);

  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  static std::vector<std::string> tensor_names();
};

// Normalized coordinate grid, (2,h,w) with row 0 = y; (-1,-1) is top-left.
Tensor normalized_grid(int h, int w);

// ---- graph builders (used by the forward wrappers and the training loop) --

struct AttentionVars {
  ad::Var embed_w, embed_b, w_q, w_k, w_v, out_w, out_b;
  ad::Var off_w1, off_b1, off_w2, off_b2;
  int heads = 0, head_dim = 0;
  double max_offset = 0.0;
};

AttentionVars attention_vars(ad::Graph& g, const AttentionParams& p, bool requires_grad);

// (2*heads, h, w); head i occupies channels 2i (y) and 2i+1 (x)
ad::Var offset_maps_op(ad::Graph& g, ad::Var slice, const AttentionVars& v);
// tokens after deformable multi-head attention, (h*w, c')
ad::Var attention_tokens_op(ad::Graph& g, ad::Var slice, const AttentionVars& v);
// tokens projected back to a (1,h,w) slice
ad::Var ddt_branch_op(ad::Graph& g, ad::Var slice, const AttentionVars& v);
// SDT over support slices plus QDT over query slices, same 4D shape
ad::Var ddt_op(ad::Graph& g, ad::Var c4, const AttentionVars& sdt, const AttentionVars& qdt);

// ---- plain forward wrappers ----------------------------------------------

// (n, 2, h, w) offsets
Tensor offset_network(const Tensor& slice, const AttentionParams& p);
// (c', h, w) concatenated heads
Tensor deformable_attention_2d(const Tensor& slice, const AttentionParams& p);
// aggregated 4D tensor, same shape as the input volume
Tensor ddt_forward(const Tensor& c4, const AttentionParams& sdt, const AttentionParams& qdt);
Tensor sparse_conv4d(const Tensor& c4, const Sparse4dConvParams& p);

// ---- reverse-mode parameter/input gradients -------------------------------

struct AttentionParamGrads {
  Tensor embed_w, embed_b, w_q, w_k, w_v, out_w, out_b;
  Tensor off_w1, off_b1, off_w2, off_b2;

  std::vector<Tensor*> tensors();
};

struct OffsetNetworkVjp {
  Tensor input_grad;
  AttentionParamGrads params;
};
OffsetNetworkVjp offset_network_vjp(const Tensor& slice, const AttentionParams& p,
                                    const Tensor& upstream);

struct AttentionVjp {
  Tensor input_grad;
  AttentionParamGrads params;
};
AttentionVjp deformable_attention_2d_vjp(const Tensor& slice, const AttentionParams& p,
                                         const Tensor& upstream);

struct DdtVjp {
  Tensor input_grad;
  AttentionParamGrads sdt;
  AttentionParamGrads qdt;
};
DdtVjp ddt_forward_vjp(const Tensor& c4, const AttentionParams& sdt,
                       const AttentionParams& qdt, const Tensor& upstream);

struct SparseConv4dVjp {
  Tensor input_grad;
  Tensor support_kernel;
  Tensor query_kernel;
};
SparseConv4dVjp sparse_conv4d_vjp(const Tensor& c4, const Sparse4dConvParams& p,
                                  const Tensor& upstream);

}  // namespace dacm
