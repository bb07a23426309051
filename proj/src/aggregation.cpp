#include "dacm/aggregation.hpp"

#include <cmath>

#include "dacm/errors.hpp"

namespace dacm {

namespace {

Tensor randn(std::vector<int> dims, double stddev, Rng& rng) {
  Tensor t(std::move(dims));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = stddev * rng.normal();
  return t;
}

}  // namespace

AttentionParams AttentionParams::init(int heads, int head_dim, int offset_hidden,
                                      double max_offset, Rng& rng) {
  AttentionParams p;
  p.heads = heads;
  p.head_dim = head_dim;
  p.offset_hidden = offset_hidden;
  p.max_offset = max_offset;
  const int c = p.cprime();
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(c));
  p.embed_w = randn({1, c}, 1.0, rng);
  p.embed_b = randn({c}, 0.5, rng);
  p.w_q = randn({c, c}, proj_std, rng);
  p.w_k = randn({c, c}, proj_std, rng);
  p.w_v = randn({c, c}, proj_std, rng);
  p.out_w = randn({c, 1}, proj_std, rng);
  p.out_b = Tensor({1});
  p.off_w1 = randn({offset_hidden, 1, 3, 3}, 0.3, rng);
  p.off_b1 = Tensor({offset_hidden});
  p.off_w2 = randn({2 * heads, offset_hidden, 3, 3}, 0.1, rng);
  p.off_b2 = Tensor({2 * heads});
  return p;
}

std::vector<Tensor*> AttentionParams::tensors() {
  return {&embed_w, &embed_b, &w_q, &w_k, &w_v, &out_w, &out_b,
          &off_w1, &off_b1, &off_w2, &off_b2};
}

std::vector<const Tensor*> AttentionParams::tensors() const {
  return {&embed_w, &embed_b, &w_q, &w_k, &w_v, &out_w, &out_b,
          &off_w1, &off_b1, &off_w2, &off_b2};
}

std::vector<std::string> AttentionParams::tensor_names() {
  return {"embed_w", "embed_b", "w_q", "w_k", "w_v", "out_w", "out_b",
          "off_w1", "off_b1", "off_w2", "off_b2"};
}

Sparse4dConvParams Sparse4dConvParams::init(int kernel_size, Rng& rng) {
  if (kernel_size % 2 == 0) throw DimensionError("sparse conv kernel must be odd");
  Sparse4dConvParams p;
  p.support_kernel = randn({kernel_size, kernel_size}, 0.05, rng);
  p.query_kernel = randn({kernel_size, kernel_size}, 0.05, rng);
  // near-identity start: each direction passes roughly half the center value
  const int c = kernel_size / 2;
  p.support_kernel.at(c, c) += 0.5;
  p.query_kernel.at(c, c) += 0.5;
  return p;
}

std::vector<Tensor*> Sparse4dConvParams::tensors() {
  return {&support_kernel, &query_kernel};
}

std::vector<const Tensor*> Sparse4dConvParams::tensors() const {
  return {&support_kernel, &query_kernel};
}

std::vector<std::string> Sparse4dConvParams::tensor_names() {
  return {"support_kernel", "query_kernel"};
}

Tensor normalized_grid(int h, int w) {
  Tensor g({2, h, w});
  for (int y = 0; y < h; ++y) {
    const double py = h == 1 ? -1.0 : -1.0 + 2.0 * y / (h - 1);
    for (int x = 0; x < w; ++x) {
      const double px = w == 1 ? -1.0 : -1.0 + 2.0 * x / (w - 1);
      g.at(0, y, x) = py;
      g.at(1, y, x) = px;
    }
  }
  return g;
}

AttentionVars attention_vars(ad::Graph& g, const AttentionParams& p, bool requires_grad) {
  AttentionVars v;
  auto lift = [&](const Tensor& t) { return requires_grad ? g.param(t) : g.constant(t); };
  v.embed_w = lift(p.embed_w);
  v.embed_b = lift(p.embed_b);
  v.w_q = lift(p.w_q);
  v.w_k = lift(p.w_k);
  v.w_v = lift(p.w_v);
  v.out_w = lift(p.out_w);
  v.out_b = lift(p.out_b);
  v.off_w1 = lift(p.off_w1);
  v.off_b1 = lift(p.off_b1);
  v.off_w2 = lift(p.off_w2);
  v.off_b2 = lift(p.off_b2);
  v.heads = p.heads;
  v.head_dim = p.head_dim;
  v.max_offset = p.max_offset;
  return v;
}

ad::Var offset_maps_op(ad::Graph& g, ad::Var slice, const AttentionVars& v) {
  ad::Var h1 = g.tanh(g.conv2d(slice, v.off_w1, v.off_b1));
  ad::Var raw = g.conv2d(h1, v.off_w2, v.off_b2);
  return g.scale(g.tanh(raw), v.max_offset);
}

ad::Var attention_tokens_op(ad::Graph& g, ad::Var slice, const AttentionVars& v) {
  const Tensor& sv = slice.value();
  if (sv.rank() != 3 || sv.dim(0) != 1)
    throw DimensionError("attention slice must be (1,h,w)");
  const int h = sv.dim(1), w = sv.dim(2);
  const int t = h * w;
  const int d = v.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  ad::Var x_col = g.reshape(slice, {t, 1});
  ad::Var x_emb = g.add_rowvec(g.matmul(x_col, v.embed_w), v.embed_b);  // (t, c')
  ad::Var q_all = g.matmul(x_emb, v.w_q);

  ad::Var offsets = offset_maps_op(g, slice, v);
  ad::Var base = g.constant(normalized_grid(h, w));

  std::vector<ad::Var> heads_out;
  heads_out.reserve(static_cast<std::size_t>(v.heads));
  for (int i = 0; i < v.heads; ++i) {
    ad::Var coords = g.add(base, g.slice_channels(offsets, 2 * i, 2));
    ad::Var sampled = g.bilinear_sample(slice, coords);               // (1,h,w)
    ad::Var s_col = g.reshape(sampled, {t, 1});
    ad::Var s_emb = g.add_rowvec(g.matmul(s_col, v.embed_w), v.embed_b);
    ad::Var k_i = g.matmul(s_emb, g.slice_cols(v.w_k, i * d, d));     // (t,d)
    ad::Var v_i = g.matmul(s_emb, g.slice_cols(v.w_v, i * d, d));
    ad::Var q_i = g.slice_cols(q_all, i * d, d);
    ad::Var attn = g.softmax_qk(q_i, k_i, scale);                     // (t,t)
    heads_out.push_back(g.matmul(attn, v_i));                         // (t,d)
  }
  return g.concat_cols(heads_out);                                    // (t, c')
}

ad::Var ddt_branch_op(ad::Graph& g, ad::Var slice, const AttentionVars& v) {
  const int h = slice.value().dim(1), w = slice.value().dim(2);
  ad::Var z = attention_tokens_op(g, slice, v);
  ad::Var out = g.add_rowvec(g.matmul(z, v.out_w), v.out_b);  // (t,1)
  return g.reshape(out, {1, h, w});
}

ad::Var ddt_op(ad::Graph& g, ad::Var c4, const AttentionVars& sdt, const AttentionVars& qdt) {
  const Tensor& v = c4.value();
  if (v.rank() != 4) throw DimensionError("ddt wants a rank-4 volume");
  const int hq = v.dim(0), wq = v.dim(1), hs = v.dim(2), ws = v.dim(3);

  std::vector<ad::Var> sdt_slices;
  sdt_slices.reserve(static_cast<std::size_t>(hq) * wq);
  for (int uy = 0; uy < hq; ++uy)
    for (int ux = 0; ux < wq; ++ux)
      sdt_slices.push_back(ddt_branch_op(g, g.slice4d_support(c4, uy, ux), sdt));

  std::vector<ad::Var> qdt_slices;
  qdt_slices.reserve(static_cast<std::size_t>(hs) * ws);
  for (int sy = 0; sy < hs; ++sy)
    for (int sx = 0; sx < ws; ++sx)
      qdt_slices.push_back(ddt_branch_op(g, g.slice4d_query(c4, sy, sx), qdt));

  return g.add(g.assemble_support(sdt_slices, hq, wq),
               g.assemble_query(qdt_slices, hs, ws));
}

// ---------------------------------------------------------------------------

Tensor offset_network(const Tensor& slice, const AttentionParams& p) {
  ad::Graph g;
  AttentionVars v = attention_vars(g, p, false);
  ad::Var out = offset_maps_op(g, g.constant(slice), v);
  const int h = slice.dim(1), w = slice.dim(2);
  Tensor result = out.value();
  return Tensor({p.heads, 2, h, w}, result.vec());
}

Tensor deformable_attention_2d(const Tensor& slice, const AttentionParams& p) {
  ad::Graph g;
  AttentionVars v = attention_vars(g, p, false);
  ad::Var z = attention_tokens_op(g, g.constant(slice), v);
  ad::Var out = g.reshape(g.transpose(z), {p.cprime(), slice.dim(1), slice.dim(2)});
  return out.value();
}

Tensor ddt_forward(const Tensor& c4, const AttentionParams& sdt, const AttentionParams& qdt) {
  ad::Graph g;
  AttentionVars sv = attention_vars(g, sdt, false);
  AttentionVars qv = attention_vars(g, qdt, false);
  return ddt_op(g, g.constant(c4), sv, qv).value();
}

Tensor sparse_conv4d(const Tensor& c4, const Sparse4dConvParams& p) {
  ad::Graph g;
  return g.sparse_conv4d(g.constant(c4), g.constant(p.support_kernel),
                         g.constant(p.query_kernel)).value();
}

// ---------------------------------------------------------------------------

std::vector<Tensor*> AttentionParamGrads::tensors() {
  return {&embed_w, &embed_b, &w_q, &w_k, &w_v, &out_w, &out_b,
          &off_w1, &off_b1, &off_w2, &off_b2};
}

namespace {

AttentionParamGrads collect_grads(const ad::Graph& g, const AttentionVars& v) {
  AttentionParamGrads out;
  out.embed_w = g.grad_or_zero(v.embed_w);
  out.embed_b = g.grad_or_zero(v.embed_b);
  out.w_q = g.grad_or_zero(v.w_q);
  out.w_k = g.grad_or_zero(v.w_k);
  out.w_v = g.grad_or_zero(v.w_v);
  out.out_w = g.grad_or_zero(v.out_w);
  out.out_b = g.grad_or_zero(v.out_b);
  out.off_w1 = g.grad_or_zero(v.off_w1);
  out.off_b1 = g.grad_or_zero(v.off_b1);
  out.off_w2 = g.grad_or_zero(v.off_w2);
  out.off_b2 = g.grad_or_zero(v.off_b2);
  return out;
}

}  // namespace

OffsetNetworkVjp offset_network_vjp(const Tensor& slice, const AttentionParams& p,
                                    const Tensor& upstream) {
  ad::Graph g;
  AttentionVars v = attention_vars(g, p, true);
  ad::Var in = g.param(slice);
  ad::Var out = offset_maps_op(g, in, v);
  if (upstream.rank() != 4 || upstream.dim(0) != p.heads || upstream.dim(1) != 2)
    throw DimensionError("offset_network upstream must be (n,2,h,w)");
  g.backward(out, Tensor(out.value().dims(), upstream.vec()));
  OffsetNetworkVjp result;
  result.input_grad = g.grad_or_zero(in);
  result.params = collect_grads(g, v);
  return result;
}

AttentionVjp deformable_attention_2d_vjp(const Tensor& slice, const AttentionParams& p,
                                         const Tensor& upstream) {
  ad::Graph g;
  AttentionVars v = attention_vars(g, p, true);
  ad::Var in = g.param(slice);
  ad::Var z = attention_tokens_op(g, in, v);
  ad::Var out = g.reshape(g.transpose(z), {p.cprime(), slice.dim(1), slice.dim(2)});
  g.backward(out, upstream);
  AttentionVjp result;
  result.input_grad = g.grad_or_zero(in);
  result.params = collect_grads(g, v);
  return result;
}

DdtVjp ddt_forward_vjp(const Tensor& c4, const AttentionParams& sdt,
                       const AttentionParams& qdt, const Tensor& upstream) {
  ad::Graph g;
  AttentionVars sv = attention_vars(g, sdt, true);
  AttentionVars qv = attention_vars(g, qdt, true);
  ad::Var in = g.param(c4);
  ad::Var out = ddt_op(g, in, sv, qv);
  g.backward(out, upstream);
  DdtVjp result;
  result.input_grad = g.grad_or_zero(in);
  result.sdt = collect_grads(g, sv);
  result.qdt = collect_grads(g, qv);
  return result;
}

SparseConv4dVjp sparse_conv4d_vjp(const Tensor& c4, const Sparse4dConvParams& p,
                                  const Tensor& upstream) {
  ad::Graph g;
  ad::Var in = g.param(c4);
  ad::Var ws = g.param(p.support_kernel);
  ad::Var wq = g.param(p.query_kernel);
  ad::Var out = g.sparse_conv4d(in, ws, wq);
  g.backward(out, upstream);
  SparseConv4dVjp result;
  result.input_grad = g.grad_or_zero(in);
  result.support_kernel = g.grad_or_zero(ws);
  result.query_kernel = g.grad_or_zero(wq);
  return result;
}

}  // namespace dacm
