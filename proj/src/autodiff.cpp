#include "dacm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dacm::ad {

const Tensor& Var::value() const { return graph_->value(*this); }
const Tensor& Var::grad() const { return graph_->grad(*this); }

const Tensor& Graph::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id_)];
  if (!n.grad_ready) throw NumericalError("gradient not computed for this node");
  return n.grad;
}

void Graph::clear() { nodes_.clear(); }

Var Graph::make(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::make_op(Tensor value, std::function<void(Graph&)> backprop, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

bool Graph::any_requires(std::initializer_list<Var> vs) const {
  for (const Var& v : vs)
    if (v.valid() && nodes_[static_cast<std::size_t>(v.id_)].requires_grad) return true;
  return false;
}

Tensor& Graph::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_ready) {
    n.grad = Tensor(n.value.dims());
    n.grad_ready = true;
  }
  return n.grad;
}

void Graph::accumulate(int id, const Tensor& g) {
  Tensor& buf = grad_buffer(id);
  double* d = buf.data();
  const double* s = g.data();
  const std::int64_t n = buf.numel();
  for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

void Graph::backward(Var root) {
  const Tensor& v = value(root);
  backward(root, Tensor::full(v.dims(), 1.0));
}

void Graph::backward(Var root, const Tensor& cotangent) {
  if (!root.valid() || root.graph_ != this) throw NumericalError("backward on foreign node");
  if (!cotangent.same_dims(value(root)))
    throw DimensionError("cotangent shape mismatch " + cotangent.dims_str());
  for (Node& n : nodes_) n.grad_ready = false;
  accumulate(root.id_, cotangent);
  for (int id = root.id_; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.requires_grad && n.grad_ready && n.backprop) n.backprop(*this);
  }
}

// ---------------------------------------------------------------------------

Var Graph::add(Var a, Var b) {
  if (!value(a).same_dims(value(b))) throw DimensionError("add shape mismatch");
  Tensor out = value(a);
  {
    const double* pb = value(b).data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
  }
  const int aid = a.id_, bid = b.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, bid, oid](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    if (g.nodes_[static_cast<std::size_t>(aid)].requires_grad) g.accumulate(aid, go);
    if (g.nodes_[static_cast<std::size_t>(bid)].requires_grad) g.accumulate(bid, go);
  }, any_requires({a, b}));
}

Var Graph::sub(Var a, Var b) {
  if (!value(a).same_dims(value(b))) throw DimensionError("sub shape mismatch");
  Tensor out = value(a);
  {
    const double* pb = value(b).data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] -= pb[i];
  }
  const int aid = a.id_, bid = b.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, bid, oid](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    if (g.nodes_[static_cast<std::size_t>(aid)].requires_grad) g.accumulate(aid, go);
    if (g.nodes_[static_cast<std::size_t>(bid)].requires_grad) {
      Tensor& gb = g.grad_buffer(bid);
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] -= go[i];
    }
  }, any_requires({a, b}));
}

Var Graph::mul(Var a, Var b) {
  if (!value(a).same_dims(value(b))) throw DimensionError("mul shape mismatch");
  Tensor out = value(a);
  {
    const double* pb = value(b).data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] *= pb[i];
  }
  const int aid = a.id_, bid = b.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, bid, oid](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    const Tensor& va = g.nodes_[static_cast<std::size_t>(aid)].value;
    const Tensor& vb = g.nodes_[static_cast<std::size_t>(bid)].value;
    if (g.nodes_[static_cast<std::size_t>(aid)].requires_grad) {
      Tensor& ga = g.grad_buffer(aid);
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] * vb[i];
    }
    if (g.nodes_[static_cast<std::size_t>(bid)].requires_grad) {
      Tensor& gb = g.grad_buffer(bid);
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] += go[i] * va[i];
    }
  }, any_requires({a, b}));
}

Var Graph::scale(Var a, double c) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  const int aid = a.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, oid, c](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    Tensor& ga = g.grad_buffer(aid);
    for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += c * go[i];
  }, any_requires({a}));
}

Var Graph::relu(Var a) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  const int aid = a.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, oid](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    const Tensor& va = g.nodes_[static_cast<std::size_t>(aid)].value;
    Tensor& ga = g.grad_buffer(aid);
    for (std::int64_t i = 0; i < ga.numel(); ++i)
      if (va[i] > 0.0) ga[i] += go[i];
  }, any_requires({a}));
}

Var Graph::tanh(Var a) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  const int aid = a.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, oid](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    const Tensor& vo = g.nodes_[static_cast<std::size_t>(oid)].value;
    Tensor& ga = g.grad_buffer(aid);
    for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] * (1.0 - vo[i] * vo[i]);
  }, any_requires({a}));
}

namespace {

// C += A(n,k) * B(k,m), all row-major raw buffers
void gemm_acc(const double* A, const double* B, double* C, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* a = A + static_cast<std::int64_t>(i) * k;
    double* c = C + static_cast<std::int64_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      const double* b = B + static_cast<std::int64_t>(p) * m;
      for (int j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

// C += A(n,k) * B(m,k)^T
void gemm_nt_acc(const double* A, const double* B, double* C, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* a = A + static_cast<std::int64_t>(i) * k;
    double* c = C + static_cast<std::int64_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* b = B + static_cast<std::int64_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += a[p] * b[p];
      c[j] += s;
    }
  }
}

// C += A(k,n)^T * B(k,m)
void gemm_tn_acc(const double* A, const double* B, double* C, int n, int k, int m) {
  for (int p = 0; p < k; ++p) {
    const double* a = A + static_cast<std::int64_t>(p) * n;
    const double* b = B + static_cast<std::int64_t>(p) * m;
    for (int i = 0; i < n; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + static_cast<std::int64_t>(i) * m;
      for (int j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

Var Graph::matmul(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
    throw DimensionError("matmul shape mismatch " + va.dims_str() + " x " + vb.dims_str());
  const int n = va.dim(0), k = va.dim(1), m = vb.dim(1);
  Tensor out({n, m});
  gemm_acc(va.data(), vb.data(), out.data(), n, k, m);
  const int aid = a.id_, bid = b.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, bid, oid, n, k, m](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    const Tensor& A = g.nodes_[static_cast<std::size_t>(aid)].value;
    const Tensor& B = g.nodes_[static_cast<std::size_t>(bid)].value;
    if (g.nodes_[static_cast<std::size_t>(aid)].requires_grad)
      gemm_nt_acc(go.data(), B.data(), g.grad_buffer(aid).data(), n, m, k);
    if (g.nodes_[static_cast<std::size_t>(bid)].requires_grad)
      gemm_tn_acc(A.data(), go.data(), g.grad_buffer(bid).data(), k, n, m);
  }, any_requires({a, b}));
}

Var Graph::transpose(Var a) {
  const Tensor& va = value(a);
  if (va.rank() != 2) throw DimensionError("transpose wants rank 2");
  const int n = va.dim(0), m = va.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at(j, i) = va.at(i, j);
  const int aid = a.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, oid, n, m](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    Tensor& ga = g.grad_buffer(aid);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) ga.at(i, j) += go.at(j, i);
  }, any_requires({a}));
}

Var Graph::reshape(Var a, std::vector<int> dims) {
  const Tensor& va = value(a);
  if (Tensor::numel_of(dims) != va.numel()) throw DimensionError("reshape numel mismatch");
  Tensor out(dims, va.vec());
  const int aid = a.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, oid](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    Tensor& ga = g.grad_buffer(aid);
    for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i];
  }, any_requires({a}));
}

Var Graph::slice_cols(Var a, int start, int len) {
  const Tensor& va = value(a);
  if (va.rank() != 2 || start < 0 || start + len > va.dim(1))
    throw DimensionError("slice_cols out of range");
  const int n = va.dim(0), m = va.dim(1);
  Tensor out({n, len});
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data() + static_cast<std::int64_t>(i) * len,
                va.data() + static_cast<std::int64_t>(i) * m + start,
                sizeof(double) * static_cast<std::size_t>(len));
  const int aid = a.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, oid, start, len, n, m](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    Tensor& ga = g.grad_buffer(aid);
    for (int i = 0; i < n; ++i) {
      double* dst = ga.data() + static_cast<std::int64_t>(i) * m + start;
      const double* src = go.data() + static_cast<std::int64_t>(i) * len;
      for (int j = 0; j < len; ++j) dst[j] += src[j];
    }
  }, any_requires({a}));
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const int n = value(parts[0]).dim(0);
  int total = 0;
  for (const Var& p : parts) {
    if (value(p).rank() != 2 || value(p).dim(0) != n)
      throw DimensionError("concat_cols row mismatch");
    total += value(p).dim(1);
  }
  Tensor out({n, total});
  std::vector<int> ids, widths, offsets;
  int off = 0;
  bool req = false;
  for (const Var& p : parts) {
    const int w = value(p).dim(1);
    for (int i = 0; i < n; ++i)
      std::memcpy(out.data() + static_cast<std::int64_t>(i) * total + off,
                  value(p).data() + static_cast<std::int64_t>(i) * w,
                  sizeof(double) * static_cast<std::size_t>(w));
    ids.push_back(p.id_);
    widths.push_back(w);
    offsets.push_back(off);
    off += w;
    req = req || nodes_[static_cast<std::size_t>(p.id_)].requires_grad;
  }
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [ids, widths, offsets, oid, n, total](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      if (!g.nodes_[static_cast<std::size_t>(ids[pi])].requires_grad) continue;
      Tensor& gp = g.grad_buffer(ids[pi]);
      const int w = widths[pi], o = offsets[pi];
      for (int i = 0; i < n; ++i) {
        double* dst = gp.data() + static_cast<std::int64_t>(i) * w;
        const double* src = go.data() + static_cast<std::int64_t>(i) * total + o;
        for (int j = 0; j < w; ++j) dst[j] += src[j];
      }
    }
  }, req);
}

Var Graph::add_rowvec(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 2 || vb.rank() != 1 || vb.dim(0) != va.dim(1))
    throw DimensionError("add_rowvec shape mismatch");
  const int n = va.dim(0), m = va.dim(1);
  Tensor out = va;
  for (int i = 0; i < n; ++i) {
    double* row = out.data() + static_cast<std::int64_t>(i) * m;
    for (int j = 0; j < m; ++j) row[j] += vb[j];
  }
  const int aid = a.id_, bid = b.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, bid, oid, n, m](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    if (g.nodes_[static_cast<std::size_t>(aid)].requires_grad) g.accumulate(aid, go);
    if (g.nodes_[static_cast<std::size_t>(bid)].requires_grad) {
      Tensor& gb = g.grad_buffer(bid);
      for (int i = 0; i < n; ++i) {
        const double* row = go.data() + static_cast<std::int64_t>(i) * m;
        for (int j = 0; j < m; ++j) gb[j] += row[j];
      }
    }
  }, any_requires({a, b}));
}

Var Graph::slice_channels(Var a, int start, int len) {
  const Tensor& va = value(a);
  if (va.rank() != 3 || start < 0 || start + len > va.dim(0))
    throw DimensionError("slice_channels out of range");
  const int h = va.dim(1), w = va.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out({len, h, w});
  std::memcpy(out.data(), va.data() + start * plane,
              sizeof(double) * static_cast<std::size_t>(len * plane));
  const int aid = a.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [aid, oid, start, plane, len](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    Tensor& ga = g.grad_buffer(aid);
    double* dst = ga.data() + start * plane;
    for (std::int64_t i = 0; i < len * plane; ++i) dst[i] += go[i];
  }, any_requires({a}));
}

Var Graph::concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels of nothing");
  const int h = value(parts[0]).dim(1), w = value(parts[0]).dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  int total = 0;
  bool req = false;
  for (const Var& p : parts) {
    if (value(p).rank() != 3 || value(p).dim(1) != h || value(p).dim(2) != w)
      throw DimensionError("concat_channels plane mismatch");
    total += value(p).dim(0);
    req = req || nodes_[static_cast<std::size_t>(p.id_)].requires_grad;
  }
  Tensor out({total, h, w});
  std::vector<int> ids, chans, offsets;
  int off = 0;
  for (const Var& p : parts) {
    const int c = value(p).dim(0);
    std::memcpy(out.data() + off * plane, value(p).data(),
                sizeof(double) * static_cast<std::size_t>(c * plane));
    ids.push_back(p.id_);
    chans.push_back(c);
    offsets.push_back(off);
    off += c;
  }
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [ids, chans, offsets, oid, plane](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      if (!g.nodes_[static_cast<std::size_t>(ids[pi])].requires_grad) continue;
      Tensor& gp = g.grad_buffer(ids[pi]);
      const double* src = go.data() + offsets[pi] * plane;
      for (std::int64_t i = 0; i < chans[pi] * plane; ++i) gp[i] += src[i];
    }
  }, req);
}

Var Graph::sum_all(Var a) {
  const Tensor& va = value(a);
  double s = 0.0;
  for (std::int64_t i = 0; i < va.numel(); ++i) s += va[i];
  const int aid = a.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(Tensor::scalar(s), [aid, oid](Graph& g) {
    const double go = g.nodes_[static_cast<std::size_t>(oid)].grad[0];
    Tensor& ga = g.grad_buffer(aid);
    for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += go;
  }, any_requires({a}));
}

Var Graph::conv2d(Var x, Var w, Var b) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  if (vx.rank() != 3 || vw.rank() != 4) throw DimensionError("conv2d rank mismatch");
  const int ci = vx.dim(0), h = vx.dim(1), wd = vx.dim(2);
  const int co = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
  if (vw.dim(1) != ci) throw DimensionError("conv2d channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d wants odd kernels");
  const int ph = kh / 2, pw = kw / 2;
  const bool has_bias = b.valid();
  if (has_bias && (value(b).rank() != 1 || value(b).dim(0) != co))
    throw DimensionError("conv2d bias length mismatch");

  Tensor out({co, h, wd});
  for (int oc = 0; oc < co; ++oc) {
    const double bias = has_bias ? value(b)[oc] : 0.0;
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < wd; ++xx) {
        double s = bias;
        for (int ic = 0; ic < ci; ++ic) {
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = y + ky - ph;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = xx + kx - pw;
              if (ix < 0 || ix >= wd) continue;
              s += vw.at(oc, ic, ky, kx) * vx.at(ic, iy, ix);
            }
          }
        }
        out.at(oc, y, xx) = s;
      }
    }
  }
  const int xid = x.id_, wid = w.id_, bidv = has_bias ? b.id_ : -1;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out),
                 [xid, wid, bidv, oid, ci, h, wd, co, kh, kw, ph, pw](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    const Tensor& vx = g.nodes_[static_cast<std::size_t>(xid)].value;
    const Tensor& vw = g.nodes_[static_cast<std::size_t>(wid)].value;
    const bool need_x = g.nodes_[static_cast<std::size_t>(xid)].requires_grad;
    const bool need_w = g.nodes_[static_cast<std::size_t>(wid)].requires_grad;
    const bool need_b = bidv >= 0 && g.nodes_[static_cast<std::size_t>(bidv)].requires_grad;
    Tensor* gx = need_x ? &g.grad_buffer(xid) : nullptr;
    Tensor* gw = need_w ? &g.grad_buffer(wid) : nullptr;
    Tensor* gb = need_b ? &g.grad_buffer(bidv) : nullptr;
    for (int oc = 0; oc < co; ++oc) {
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < wd; ++xx) {
          const double gout = go.at(oc, y, xx);
          if (gout == 0.0) continue;
          if (gb) (*gb)[oc] += gout;
          for (int ic = 0; ic < ci; ++ic) {
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = y + ky - ph;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = xx + kx - pw;
                if (ix < 0 || ix >= wd) continue;
                if (gx) gx->at(ic, iy, ix) += vw.at(oc, ic, ky, kx) * gout;
                if (gw) gw->at(oc, ic, ky, kx) += vx.at(ic, iy, ix) * gout;
              }
            }
          }
        }
      }
    }
  }, any_requires({x, w, b}));
}

namespace {

struct Corner {
  int lo = 0;
  double frac = 0.0;   // interpolation weight toward lo+1
  double dnorm = 0.0;  // d(pixel coord)/d(normalized coord), 0 when clamped
};

Corner resolve_axis(double p, int extent) {
  Corner c;
  if (extent == 1) return c;
  double scale = 0.5 * (extent - 1);
  bool clamped = false;
  if (p < -1.0) { p = -1.0; clamped = true; }
  if (p > 1.0) { p = 1.0; clamped = true; }
  double f = (p + 1.0) * scale;
  int lo = static_cast<int>(std::floor(f));
  if (lo > extent - 2) lo = extent - 2;
  if (lo < 0) lo = 0;
  c.lo = lo;
  c.frac = f - lo;
  c.dnorm = clamped ? 0.0 : scale;
  return c;
}

}  // namespace

Var Graph::bilinear_sample(Var grid, Var coords) {
  const Tensor& vg = value(grid);
  const Tensor& vc = value(coords);
  if (vg.rank() != 3 || vc.rank() != 3 || vc.dim(0) != 2)
    throw DimensionError("bilinear_sample shape mismatch");
  const int c = vg.dim(0), h = vg.dim(1), w = vg.dim(2);
  const int oh = vc.dim(1), ow = vc.dim(2);
  Tensor out({c, oh, ow});
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Corner cy = resolve_axis(vc.at(0, oy, ox), h);
      const Corner cx = resolve_axis(vc.at(1, oy, ox), w);
      const int y1 = h == 1 ? cy.lo : cy.lo + 1;
      const int x1 = w == 1 ? cx.lo : cx.lo + 1;
      for (int ch = 0; ch < c; ++ch) {
        const double g00 = vg.at(ch, cy.lo, cx.lo);
        const double g01 = vg.at(ch, cy.lo, x1);
        const double g10 = vg.at(ch, y1, cx.lo);
        const double g11 = vg.at(ch, y1, x1);
        out.at(ch, oy, ox) = (1.0 - cy.frac) * ((1.0 - cx.frac) * g00 + cx.frac * g01) +
                             cy.frac * ((1.0 - cx.frac) * g10 + cx.frac * g11);
      }
    }
  }
  const int gid = grid.id_, cid = coords.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [gid, cid, oid, c, h, w, oh, ow](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    const Tensor& vg = g.nodes_[static_cast<std::size_t>(gid)].value;
    const Tensor& vc = g.nodes_[static_cast<std::size_t>(cid)].value;
    const bool need_g = g.nodes_[static_cast<std::size_t>(gid)].requires_grad;
    const bool need_c = g.nodes_[static_cast<std::size_t>(cid)].requires_grad;
    Tensor* gg = need_g ? &g.grad_buffer(gid) : nullptr;
    Tensor* gc = need_c ? &g.grad_buffer(cid) : nullptr;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Corner cy = resolve_axis(vc.at(0, oy, ox), h);
        const Corner cx = resolve_axis(vc.at(1, oy, ox), w);
        const int y1 = h == 1 ? cy.lo : cy.lo + 1;
        const int x1 = w == 1 ? cx.lo : cx.lo + 1;
        double dy_acc = 0.0, dx_acc = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double gout = go.at(ch, oy, ox);
          if (gout == 0.0) continue;
          const double g00 = vg.at(ch, cy.lo, cx.lo);
          const double g01 = vg.at(ch, cy.lo, x1);
          const double g10 = vg.at(ch, y1, cx.lo);
          const double g11 = vg.at(ch, y1, x1);
          if (gg) {
            gg->at(ch, cy.lo, cx.lo) += (1.0 - cy.frac) * (1.0 - cx.frac) * gout;
            gg->at(ch, cy.lo, x1) += (1.0 - cy.frac) * cx.frac * gout;
            gg->at(ch, y1, cx.lo) += cy.frac * (1.0 - cx.frac) * gout;
            gg->at(ch, y1, x1) += cy.frac * cx.frac * gout;
          }
          dy_acc += gout * ((1.0 - cx.frac) * (g10 - g00) + cx.frac * (g11 - g01));
          dx_acc += gout * ((1.0 - cy.frac) * (g01 - g00) + cy.frac * (g11 - g10));
        }
        if (gc) {
          gc->at(0, oy, ox) += dy_acc * cy.dnorm;
          gc->at(1, oy, ox) += dx_acc * cx.dnorm;
        }
      }
    }
  }, any_requires({grid, coords}));
}

Var Graph::upsample_bilinear(Var x, int oh, int ow) {
  const Tensor& vx = value(x);
  if (vx.rank() != 3) throw DimensionError("upsample wants rank 3");
  const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
  auto axis = [](int out_i, int out_n, int in_n, int* lo, double* frac) {
    if (in_n == 1 || out_n == 1) { *lo = 0; *frac = 0.0; return; }
    const double f = static_cast<double>(out_i) * (in_n - 1) / (out_n - 1);
    int l = static_cast<int>(std::floor(f));
    if (l > in_n - 2) l = in_n - 2;
    *lo = l;
    *frac = f - l;
  };
  Tensor out({c, oh, ow});
  for (int oy = 0; oy < oh; ++oy) {
    int y0; double ay;
    axis(oy, oh, h, &y0, &ay);
    const int y1 = h == 1 ? y0 : y0 + 1;
    for (int ox = 0; ox < ow; ++ox) {
      int x0; double ax;
      axis(ox, ow, w, &x0, &ax);
      const int x1 = w == 1 ? x0 : x0 + 1;
      for (int ch = 0; ch < c; ++ch) {
        out.at(ch, oy, ox) =
            (1.0 - ay) * ((1.0 - ax) * vx.at(ch, y0, x0) + ax * vx.at(ch, y0, x1)) +
            ay * ((1.0 - ax) * vx.at(ch, y1, x0) + ax * vx.at(ch, y1, x1));
      }
    }
  }
  const int xid = x.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [xid, oid, c, h, w, oh, ow, axis](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    Tensor& gx = g.grad_buffer(xid);
    for (int oy = 0; oy < oh; ++oy) {
      int y0; double ay;
      axis(oy, oh, h, &y0, &ay);
      const int y1 = h == 1 ? y0 : y0 + 1;
      for (int ox = 0; ox < ow; ++ox) {
        int x0; double ax;
        axis(ox, ow, w, &x0, &ax);
        const int x1 = w == 1 ? x0 : x0 + 1;
        for (int ch = 0; ch < c; ++ch) {
          const double gout = go.at(ch, oy, ox);
          if (gout == 0.0) continue;
          gx.at(ch, y0, x0) += (1.0 - ay) * (1.0 - ax) * gout;
          gx.at(ch, y0, x1) += (1.0 - ay) * ax * gout;
          gx.at(ch, y1, x0) += ay * (1.0 - ax) * gout;
          gx.at(ch, y1, x1) += ay * ax * gout;
        }
      }
    }
  }, any_requires({x}));
}

Var Graph::softmax_qk(Var q, Var k, double sc) {
  const Tensor& vq = value(q);
  const Tensor& vk = value(k);
  if (vq.rank() != 2 || vk.rank() != 2 || vq.dim(1) != vk.dim(1))
    throw DimensionError("softmax_qk shape mismatch");
  const int tq = vq.dim(0), tk = vk.dim(0), d = vq.dim(1);
  Tensor out({tq, tk});
  std::vector<double> row(static_cast<std::size_t>(tk));
  for (int i = 0; i < tq; ++i) {
    const double* qi = vq.data() + static_cast<std::int64_t>(i) * d;
    double mx = -1e300;
    for (int j = 0; j < tk; ++j) {
      const double* kj = vk.data() + static_cast<std::int64_t>(j) * d;
      double s = 0.0;
      for (int p = 0; p < d; ++p) s += qi[p] * kj[p];
      row[static_cast<std::size_t>(j)] = sc * s;
      mx = std::max(mx, sc * s);
    }
    double norm = 0.0;
    double* orow = out.data() + static_cast<std::int64_t>(i) * tk;
    for (int j = 0; j < tk; ++j) {
      orow[j] = std::exp(row[static_cast<std::size_t>(j)] - mx);
      norm += orow[j];
    }
    const double inv = 1.0 / norm;
    for (int j = 0; j < tk; ++j) orow[j] *= inv;
  }
  const int qid = q.id_, kid = k.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [qid, kid, oid, tq, tk, d, sc](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    const Tensor& W = g.nodes_[static_cast<std::size_t>(oid)].value;
    const Tensor& vq = g.nodes_[static_cast<std::size_t>(qid)].value;
    const Tensor& vk = g.nodes_[static_cast<std::size_t>(kid)].value;
    const bool need_q = g.nodes_[static_cast<std::size_t>(qid)].requires_grad;
    const bool need_k = g.nodes_[static_cast<std::size_t>(kid)].requires_grad;
    Tensor* gq = need_q ? &g.grad_buffer(qid) : nullptr;
    Tensor* gk = need_k ? &g.grad_buffer(kid) : nullptr;
    std::vector<double> ds(static_cast<std::size_t>(tk));
    for (int i = 0; i < tq; ++i) {
      const double* wrow = W.data() + static_cast<std::int64_t>(i) * tk;
      const double* grow = go.data() + static_cast<std::int64_t>(i) * tk;
      double dot = 0.0;
      for (int j = 0; j < tk; ++j) dot += wrow[j] * grow[j];
      for (int j = 0; j < tk; ++j) ds[static_cast<std::size_t>(j)] = wrow[j] * (grow[j] - dot) * sc;
      const double* qi = vq.data() + static_cast<std::int64_t>(i) * d;
      double* gqi = gq ? gq->data() + static_cast<std::int64_t>(i) * d : nullptr;
      for (int j = 0; j < tk; ++j) {
        const double dsj = ds[static_cast<std::size_t>(j)];
        if (dsj == 0.0) continue;
        const double* kj = vk.data() + static_cast<std::int64_t>(j) * d;
        if (gqi)
          for (int p = 0; p < d; ++p) gqi[p] += dsj * kj[p];
        if (gk) {
          double* gkj = gk->data() + static_cast<std::int64_t>(j) * d;
          for (int p = 0; p < d; ++p) gkj[p] += dsj * qi[p];
        }
      }
    }
  }, any_requires({q, k}));
}

Var Graph::mean_support(Var c4) {
  const Tensor& v = value(c4);
  if (v.rank() != 4) throw DimensionError("mean_support wants rank 4");
  const int hq = v.dim(0), wq = v.dim(1);
  const std::int64_t cells = static_cast<std::int64_t>(v.dim(2)) * v.dim(3);
  const double inv = 1.0 / static_cast<double>(cells);
  Tensor out({hq, wq});
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(hq) * wq; ++i) {
    const double* row = v.data() + i * cells;
    double s = 0.0;
    for (std::int64_t j = 0; j < cells; ++j) s += row[j];
    out[i] = s * inv;
  }
  const int cid = c4.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [cid, oid, hq, wq, cells, inv](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    Tensor& gc = g.grad_buffer(cid);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(hq) * wq; ++i) {
      const double gv = go[i] * inv;
      double* row = gc.data() + i * cells;
      for (std::int64_t j = 0; j < cells; ++j) row[j] += gv;
    }
  }, any_requires({c4}));
}

Var Graph::sparse_conv4d(Var c4, Var ws, Var wq) {
  const Tensor& v = value(c4);
  const Tensor& vs = value(ws);
  const Tensor& vq = value(wq);
  if (v.rank() != 4) throw DimensionError("sparse_conv4d wants rank 4");
  if (vs.rank() != 2 || vq.rank() != 2 || vs.dim(0) != vs.dim(1) || vq.dim(0) != vq.dim(1))
    throw DimensionError("sparse_conv4d kernels must be square");
  if (vs.dim(0) % 2 == 0 || vq.dim(0) % 2 == 0)
    throw DimensionError("sparse_conv4d wants odd kernels");
  const int hq = v.dim(0), wqd = v.dim(1), hs = v.dim(2), wsd = v.dim(3);
  const int ks = vs.dim(0), kq = vq.dim(0);
  const int ps = ks / 2, pq = kq / 2;

  Tensor out({hq, wqd, hs, wsd});
  // support-direction convolution on each (qy,qx) slice
  for (int qy = 0; qy < hq; ++qy)
    for (int qx = 0; qx < wqd; ++qx)
      for (int sy = 0; sy < hs; ++sy)
        for (int sx = 0; sx < wsd; ++sx) {
          double acc = 0.0;
          for (int ky = 0; ky < ks; ++ky) {
            const int iy = sy + ky - ps;
            if (iy < 0 || iy >= hs) continue;
            for (int kx = 0; kx < ks; ++kx) {
              const int ix = sx + kx - ps;
              if (ix < 0 || ix >= wsd) continue;
              acc += vs.at(ky, kx) * v.at(qy, qx, iy, ix);
            }
          }
          out.at(qy, qx, sy, sx) = acc;
        }
  // query-direction convolution on each (sy,sx) slice
  for (int sy = 0; sy < hs; ++sy)
    for (int sx = 0; sx < wsd; ++sx)
      for (int qy = 0; qy < hq; ++qy)
        for (int qx = 0; qx < wqd; ++qx) {
          double acc = 0.0;
          for (int ky = 0; ky < kq; ++ky) {
            const int iy = qy + ky - pq;
            if (iy < 0 || iy >= hq) continue;
            for (int kx = 0; kx < kq; ++kx) {
              const int ix = qx + kx - pq;
              if (ix < 0 || ix >= wqd) continue;
              acc += vq.at(ky, kx) * v.at(iy, ix, sy, sx);
            }
          }
          out.at(qy, qx, sy, sx) += acc;
        }

  const int cid = c4.id_, sid = ws.id_, qid = wq.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out),
                 [cid, sid, qid, oid, hq, wqd, hs, wsd, ks, kq, ps, pq](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    const Tensor& v = g.nodes_[static_cast<std::size_t>(cid)].value;
    const Tensor& vs = g.nodes_[static_cast<std::size_t>(sid)].value;
    const Tensor& vq = g.nodes_[static_cast<std::size_t>(qid)].value;
    const bool need_c = g.nodes_[static_cast<std::size_t>(cid)].requires_grad;
    const bool need_s = g.nodes_[static_cast<std::size_t>(sid)].requires_grad;
    const bool need_q = g.nodes_[static_cast<std::size_t>(qid)].requires_grad;
    Tensor* gc = need_c ? &g.grad_buffer(cid) : nullptr;
    Tensor* gs = need_s ? &g.grad_buffer(sid) : nullptr;
    Tensor* gq = need_q ? &g.grad_buffer(qid) : nullptr;
    for (int qy = 0; qy < hq; ++qy)
      for (int qx = 0; qx < wqd; ++qx)
        for (int sy = 0; sy < hs; ++sy)
          for (int sx = 0; sx < wsd; ++sx) {
            const double gout = go.at(qy, qx, sy, sx);
            if (gout == 0.0) continue;
            for (int ky = 0; ky < ks; ++ky) {
              const int iy = sy + ky - ps;
              if (iy < 0 || iy >= hs) continue;
              for (int kx = 0; kx < ks; ++kx) {
                const int ix = sx + kx - ps;
                if (ix < 0 || ix >= wsd) continue;
                if (gc) gc->at(qy, qx, iy, ix) += vs.at(ky, kx) * gout;
                if (gs) gs->at(ky, kx) += v.at(qy, qx, iy, ix) * gout;
              }
            }
            for (int ky = 0; ky < kq; ++ky) {
              const int iy = qy + ky - pq;
              if (iy < 0 || iy >= hq) continue;
              for (int kx = 0; kx < kq; ++kx) {
                const int ix = qx + kx - pq;
                if (ix < 0 || ix >= wqd) continue;
                if (gc) gc->at(iy, ix, sy, sx) += vq.at(ky, kx) * gout;
                if (gq) gq->at(ky, kx) += v.at(iy, ix, sy, sx) * gout;
              }
            }
          }
  }, any_requires({c4, ws, wq}));
}

Var Graph::slice4d_support(Var c4, int uy, int ux) {
  const Tensor& v = value(c4);
  if (v.rank() != 4) throw DimensionError("slice4d_support wants rank 4");
  const int wq = v.dim(1), hs = v.dim(2), ws = v.dim(3);
  const std::int64_t cells = static_cast<std::int64_t>(hs) * ws;
  const std::int64_t base = (static_cast<std::int64_t>(uy) * wq + ux) * cells;
  Tensor out({1, hs, ws});
  std::memcpy(out.data(), v.data() + base, sizeof(double) * static_cast<std::size_t>(cells));
  const int cid = c4.id_;
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [cid, oid, base, cells](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    Tensor& gc = g.grad_buffer(cid);
    double* dst = gc.data() + base;
    for (std::int64_t i = 0; i < cells; ++i) dst[i] += go[i];
  }, any_requires({c4}));
}

Var Graph::slice4d_query(Var c4, int sy, int sx) {
  const Tensor& v = value(c4);
  if (v.rank() != 4) throw DimensionError("slice4d_query wants rank 4");
  const int hq = v.dim(0), wq = v.dim(1), hs = v.dim(2), ws = v.dim(3);
  const std::int64_t cells = static_cast<std::int64_t>(hs) * ws;
  const std::int64_t off = static_cast<std::int64_t>(sy) * ws + sx;
  Tensor out({1, hq, wq});
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(hq) * wq; ++i)
    out[i] = v.data()[i * cells + off];
  const int cid = c4.id_;
  const int oid = static_cast<int>(nodes_.size());
  const std::int64_t n = static_cast<std::int64_t>(hq) * wq;
  return make_op(std::move(out), [cid, oid, cells, off, n](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    Tensor& gc = g.grad_buffer(cid);
    for (std::int64_t i = 0; i < n; ++i) gc.data()[i * cells + off] += go[i];
  }, any_requires({c4}));
}

Var Graph::assemble_support(const std::vector<Var>& slices, int hq, int wq) {
  if (static_cast<int>(slices.size()) != hq * wq)
    throw DimensionError("assemble_support slice count mismatch");
  const Tensor& first = value(slices[0]);
  const int hs = first.dim(1), ws = first.dim(2);
  const std::int64_t cells = static_cast<std::int64_t>(hs) * ws;
  Tensor out({hq, wq, hs, ws});
  std::vector<int> ids;
  bool req = false;
  for (std::size_t u = 0; u < slices.size(); ++u) {
    const Tensor& sv = value(slices[u]);
    if (sv.rank() != 3 || sv.dim(0) != 1 || sv.dim(1) != hs || sv.dim(2) != ws)
      throw DimensionError("assemble_support slice shape mismatch");
    std::memcpy(out.data() + static_cast<std::int64_t>(u) * cells, sv.data(),
                sizeof(double) * static_cast<std::size_t>(cells));
    ids.push_back(slices[u].id_);
    req = req || nodes_[static_cast<std::size_t>(slices[u].id_)].requires_grad;
  }
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [ids, oid, cells](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    for (std::size_t u = 0; u < ids.size(); ++u) {
      if (!g.nodes_[static_cast<std::size_t>(ids[u])].requires_grad) continue;
      Tensor& gp = g.grad_buffer(ids[u]);
      const double* src = go.data() + static_cast<std::int64_t>(u) * cells;
      for (std::int64_t i = 0; i < cells; ++i) gp[i] += src[i];
    }
  }, req);
}

Var Graph::assemble_query(const std::vector<Var>& slices, int hs, int ws) {
  if (static_cast<int>(slices.size()) != hs * ws)
    throw DimensionError("assemble_query slice count mismatch");
  const Tensor& first = value(slices[0]);
  const int hq = first.dim(1), wq = first.dim(2);
  const std::int64_t cells = static_cast<std::int64_t>(hs) * ws;
  const std::int64_t n = static_cast<std::int64_t>(hq) * wq;
  Tensor out({hq, wq, hs, ws});
  std::vector<int> ids;
  bool req = false;
  for (std::size_t s = 0; s < slices.size(); ++s) {
    const Tensor& sv = value(slices[s]);
    if (sv.rank() != 3 || sv.dim(0) != 1 || sv.dim(1) != hq || sv.dim(2) != wq)
      throw DimensionError("assemble_query slice shape mismatch");
    for (std::int64_t i = 0; i < n; ++i)
      out.data()[i * cells + static_cast<std::int64_t>(s)] = sv[i];
    ids.push_back(slices[s].id_);
    req = req || nodes_[static_cast<std::size_t>(slices[s].id_)].requires_grad;
  }
  const int oid = static_cast<int>(nodes_.size());
  return make_op(std::move(out), [ids, oid, cells, n](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<std::size_t>(oid)].grad;
    for (std::size_t s = 0; s < ids.size(); ++s) {
      if (!g.nodes_[static_cast<std::size_t>(ids[s])].requires_grad) continue;
      Tensor& gp = g.grad_buffer(ids[s]);
      for (std::int64_t i = 0; i < n; ++i)
        gp[i] += go.data()[i * cells + static_cast<std::int64_t>(s)];
    }
  }, req);
}

Var Graph::cross_entropy2(Var logits, const Tensor& target) {
  const Tensor& vl = value(logits);
  if (vl.rank() != 3 || vl.dim(0) != 2) throw DimensionError("cross_entropy2 wants (2,h,w)");
  const int h = vl.dim(1), w = vl.dim(2);
  if (target.rank() != 2 || target.dim(0) != h || target.dim(1) != w)
    throw DimensionError("cross_entropy2 target shape mismatch");
  const std::int64_t n = static_cast<std::int64_t>(h) * w;
  const double inv = 1.0 / static_cast<double>(n);
  Tensor probs({2, h, w});
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double l0 = vl.data()[i];
    const double l1 = vl.data()[n + i];
    const double m = std::max(l0, l1);
    const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
    const double z = e0 + e1;
    probs.data()[i] = e0 / z;
    probs.data()[n + i] = e1 / z;
    const double lse = m + std::log(z);
    loss += lse - (target[i] != 0.0 ? l1 : l0);
  }
  loss *= inv;
  const int lid = logits.id_;
  const int oid = static_cast<int>(nodes_.size());
  Tensor tgt = target;
  return make_op(Tensor::scalar(loss),
                 [lid, oid, n, inv, probs = std::move(probs), tgt = std::move(tgt)](Graph& g) {
    const double go = g.nodes_[static_cast<std::size_t>(oid)].grad[0];
    Tensor& gl = g.grad_buffer(lid);
    for (std::int64_t i = 0; i < n; ++i) {
      const bool fg = tgt[i] != 0.0;
      gl.data()[i] += go * inv * (probs.data()[i] - (fg ? 0.0 : 1.0));
      gl.data()[n + i] += go * inv * (probs.data()[n + i] - (fg ? 1.0 : 0.0));
    }
  }, any_requires({logits}));
}

}  // namespace dacm::ad
