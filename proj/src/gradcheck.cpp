#include "dacm/gradcheck.hpp"

#include <cmath>
#include <cstdio>

#include "dacm/aggregation.hpp"
#include "dacm/gp.hpp"
#include "dacm/kernels.hpp"
#include "dacm/pipeline.hpp"
#include "dacm/rng.hpp"

namespace dacm::gradcheck {

std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f,
                                 std::vector<double> at, double step) {
  std::vector<double> grad(at.size());
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double keep = at[i];
    at[i] = keep + step;
    const double hi = f(at);
    at[i] = keep - step;
    const double lo = f(at);
    at[i] = keep;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

double rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric,
               double floor) {
  double scale = floor, diff = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    scale = std::max(scale, std::max(std::abs(analytic[i]), std::abs(numeric[i])));
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
  }
  return diff / scale;
}

namespace {

constexpr double kStep = 1e-5;

KernelHyperparams random_params(int dim, Rng& rng) {
  KernelHyperparams p = KernelHyperparams::init(dim);
  p.log_output_scale = rng.uniform(-0.7, 0.7);
  for (double& l : p.log_lengthscales) l = rng.uniform(-0.7, 0.7);
  p.log_noise = rng.uniform(std::log(0.05), 0.0);
  p.log_linear_variance = rng.uniform(-0.7, 0.7);
  return p;
}

std::vector<double> random_vec(int dim, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

Report check_kernels(std::uint64_t seed) {
  Rng rng(seed);
  const KernelKind kinds[3] = {KernelKind::Linear, KernelKind::RbfArd, KernelKind::Additive};
  OpReport r;
  r.op = "kernel_param_gradients";
  r.tolerance = 1e-6;
  for (int draw = 0; draw < 60; ++draw) {
    const KernelKind kind = kinds[draw % 3];
    const int dim = 1 + rng.uniform_int(6);
    KernelHyperparams params = random_params(dim, rng);
    params.tied_lengthscales = draw % 5 == 4;
    std::vector<double> x1 = random_vec(dim, rng);
    std::vector<double> x2 = draw % 7 == 6 ? x1 : random_vec(dim, rng);

    const std::vector<double> analytic = kernel_param_gradients(kind, params, x1, x2).flatten();

    auto eval_at = [&](const std::vector<double>& flat) {
      KernelHyperparams p = params;
      p.unflatten(flat);
      return eval_kernel(kind, p, x1, x2);
    };
    std::vector<double> numeric;
    if (!params.tied_lengthscales) {
      numeric = central_diff(eval_at, params.flatten(), kStep);
    } else {
      // tied lengthscales form a single parameter: wiggle all slots together
      numeric = central_diff(eval_at, params.flatten(), kStep);
      std::vector<double> flat = params.flatten();
      for (int d = 0; d < dim; ++d) flat[static_cast<std::size_t>(1 + d)] += kStep;
      const double hi = eval_at(flat);
      for (int d = 0; d < dim; ++d) flat[static_cast<std::size_t>(1 + d)] -= 2 * kStep;
      const double lo = eval_at(flat);
      const double joint = (hi - lo) / (2.0 * kStep);
      for (int d = 0; d < dim; ++d) numeric[static_cast<std::size_t>(1 + d)] = joint;
    }
    r.max_rel_err = std::max(r.max_rel_err, rel_err(analytic, numeric));
    ++r.configs;
  }
  r.pass = r.max_rel_err < r.tolerance;
  Report report;
  report.add(std::move(r));
  return report;
}

Report check_gp(std::uint64_t seed) {
  Rng rng(seed);
  const KernelKind kinds[3] = {KernelKind::Linear, KernelKind::RbfArd, KernelKind::Additive};
  OpReport r;
  r.op = "mll_gradients";
  r.tolerance = 1e-5;
  for (int draw = 0; draw < 25; ++draw) {
    const KernelKind kind = kinds[draw % 3];
    const int n = 3 + rng.uniform_int(4);
    const int dim = 1 + rng.uniform_int(3);
    GpTrainingSet set;
    set.X = Tensor({n, dim});
    for (std::int64_t i = 0; i < set.X.numel(); ++i) set.X[i] = rng.uniform(-1.0, 1.0);
    set.y = random_vec(n, rng, -1.5, 1.5);
    KernelHyperparams params = random_params(dim, rng);
    GpModel model(kind, params, set);

    const std::vector<double> analytic = model.mll_gradients().flatten();
    auto eval_at = [&](const std::vector<double>& flat) {
      KernelHyperparams p = params;
      p.unflatten(flat);
      GpModel m(kind, p, set);
      return m.marginal_log_likelihood();
    };
    const std::vector<double> numeric = central_diff(eval_at, params.flatten(), kStep);
    r.max_rel_err = std::max(r.max_rel_err, rel_err(analytic, numeric));
    ++r.configs;
  }
  r.pass = r.max_rel_err < r.tolerance;
  Report report;
  report.add(std::move(r));
  return report;
}

namespace {

Tensor random_tensor(std::vector<int> dims, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(dims));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.uniform(-1.0, 1.0);
  return t;
}

// Finite differences can cross a bilinear kink (texel line or clamp edge)
// and disagree with the exact one-sided gradient, so random configs whose
// sampling coordinates sit within reach of one are redrawn.
bool coords_safe(const Tensor& slice, const AttentionParams& p) {
  const int h = slice.dim(1), w = slice.dim(2);
  Tensor off = offset_network(slice, p);  // (n,2,h,w)
  Tensor base = normalized_grid(h, w);
  for (int head = 0; head < p.heads; ++head) {
    for (int axis = 0; axis < 2; ++axis) {
      const int extent = axis == 0 ? h : w;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double c = base.at(axis, y, x) + off.at(head, axis, y, x);
          if (std::abs(std::abs(c) - 1.0) < 2e-3) return false;  // clamp edge
          if (std::abs(c) < 1.0 && extent > 2) {
            const double f = (c + 1.0) * 0.5 * (extent - 1);
            for (int k = 1; k <= extent - 2; ++k)
              if (std::abs(f - k) < 1e-3) return false;  // interior texel line
          }
        }
      }
    }
  }
  return true;
}

bool ddt_coords_safe(const Tensor& c4, const AttentionParams& sdt, const AttentionParams& qdt) {
  const int hq = c4.dim(0), wq = c4.dim(1), hs = c4.dim(2), ws = c4.dim(3);
  for (int uy = 0; uy < hq; ++uy)
    for (int ux = 0; ux < wq; ++ux) {
      Tensor slice({1, hs, ws});
      for (int sy = 0; sy < hs; ++sy)
        for (int sx = 0; sx < ws; ++sx) slice.at(0, sy, sx) = c4.at(uy, ux, sy, sx);
      if (!coords_safe(slice, sdt)) return false;
    }
  for (int sy = 0; sy < hs; ++sy)
    for (int sx = 0; sx < ws; ++sx) {
      Tensor slice({1, hq, wq});
      for (int uy = 0; uy < hq; ++uy)
        for (int ux = 0; ux < wq; ++ux) slice.at(0, uy, ux) = c4.at(uy, ux, sy, sx);
      if (!coords_safe(slice, qdt)) return false;
    }
  return true;
}

double dot_all(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

void append(std::vector<double>& dst, const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) dst.push_back(t[i]);
}

// FD over every coordinate of the listed tensors against a scalar J.
std::vector<double> fd_over_tensors(const std::vector<Tensor*>& tensors,
                                    const std::function<double()>& J) {
  std::vector<double> out;
  for (Tensor* t : tensors) {
    for (std::int64_t i = 0; i < t->numel(); ++i) {
      const double keep = (*t)[i];
      (*t)[i] = keep + kStep;
      const double hi = J();
      (*t)[i] = keep - kStep;
      const double lo = J();
      (*t)[i] = keep;
      out.push_back((hi - lo) / (2.0 * kStep));
    }
  }
  return out;
}

double check_offset_network_config(Rng& rng) {
  const int h = 3 + rng.uniform_int(3), w = 3 + rng.uniform_int(3);
  AttentionParams p = AttentionParams::init(2, 2, 4, 0.5, rng);
  Tensor slice = random_tensor({1, h, w}, rng);
  Tensor upstream = random_tensor({p.heads, 2, h, w}, rng);

  OffsetNetworkVjp vjp = offset_network_vjp(slice, p, upstream);
  std::vector<double> analytic;
  for (Tensor* t : vjp.params.tensors()) append(analytic, *t);
  append(analytic, vjp.input_grad);

  std::vector<Tensor*> wiggled = p.tensors();
  wiggled.push_back(&slice);
  auto J = [&]() { return dot_all(offset_network(slice, p), upstream); };
  const std::vector<double> numeric = fd_over_tensors(wiggled, J);
  return rel_err(analytic, numeric);
}

double check_attention_config(Rng& rng) {
  AttentionParams p;
  Tensor slice;
  for (int attempt = 0; attempt < 50; ++attempt) {
    const int h = 3 + rng.uniform_int(2), w = 3 + rng.uniform_int(2);
    p = AttentionParams::init(2, 2, 4, 0.5, rng);
    slice = random_tensor({1, h, w}, rng);
    if (coords_safe(slice, p)) break;
  }
  const int h = slice.dim(1), w = slice.dim(2);
  Tensor upstream = random_tensor({p.cprime(), h, w}, rng);

  AttentionVjp vjp = deformable_attention_2d_vjp(slice, p, upstream);
  std::vector<double> analytic;
  for (Tensor* t : vjp.params.tensors()) append(analytic, *t);
  append(analytic, vjp.input_grad);

  std::vector<Tensor*> wiggled = p.tensors();
  wiggled.push_back(&slice);
  auto J = [&]() { return dot_all(deformable_attention_2d(slice, p), upstream); };
  const std::vector<double> numeric = fd_over_tensors(wiggled, J);
  return rel_err(analytic, numeric);
}

double check_ddt_config(Rng& rng) {
  AttentionParams sdt, qdt;
  Tensor c4;
  for (int attempt = 0; attempt < 50; ++attempt) {
    sdt = AttentionParams::init(2, 2, 4, 0.5, rng);
    qdt = AttentionParams::init(2, 2, 4, 0.5, rng);
    c4 = random_tensor({2, 2, 2, 2}, rng);
    if (ddt_coords_safe(c4, sdt, qdt)) break;
  }
  Tensor upstream = random_tensor(c4.dims(), rng);

  DdtVjp vjp = ddt_forward_vjp(c4, sdt, qdt, upstream);
  std::vector<double> analytic;
  for (Tensor* t : vjp.sdt.tensors()) append(analytic, *t);
  for (Tensor* t : vjp.qdt.tensors()) append(analytic, *t);
  append(analytic, vjp.input_grad);

  std::vector<Tensor*> wiggled = sdt.tensors();
  for (Tensor* t : qdt.tensors()) wiggled.push_back(t);
  wiggled.push_back(&c4);
  auto J = [&]() { return dot_all(ddt_forward(c4, sdt, qdt), upstream); };
  const std::vector<double> numeric = fd_over_tensors(wiggled, J);
  return rel_err(analytic, numeric);
}

double check_sparse_conv_config(Rng& rng) {
  Rng init_rng(rng.next_u64());
  Sparse4dConvParams p = Sparse4dConvParams::init(3, init_rng);
  const int hq = 2 + rng.uniform_int(2), wq = 2 + rng.uniform_int(2);
  const int hs = 2 + rng.uniform_int(2), ws = 2 + rng.uniform_int(2);
  Tensor c4 = random_tensor({hq, wq, hs, ws}, rng);
  Tensor upstream = random_tensor(c4.dims(), rng);

  SparseConv4dVjp vjp = sparse_conv4d_vjp(c4, p, upstream);
  std::vector<double> analytic;
  append(analytic, vjp.support_kernel);
  append(analytic, vjp.query_kernel);
  append(analytic, vjp.input_grad);

  std::vector<Tensor*> wiggled = p.tensors();
  wiggled.push_back(&c4);
  auto J = [&]() { return dot_all(sparse_conv4d(c4, p), upstream); };
  const std::vector<double> numeric = fd_over_tensors(wiggled, J);
  return rel_err(analytic, numeric);
}

double check_decoder_config(Rng& rng) {
  Rng init_rng(rng.next_u64());
  DecoderParams p = DecoderParams::init(4, 3, init_rng);
  const int out = 8;
  std::vector<Tensor> maps = {random_tensor({1, 4, 4}, rng), random_tensor({1, 3, 3}, rng),
                              random_tensor({1, 2, 2}, rng)};
  Tensor upstream = random_tensor({2, out, out}, rng);

  auto forward = [&]() {
    ad::Graph g;
    DecoderVars d = decoder_vars(g, p, false);
    std::vector<ad::Var> vars;
    for (const Tensor& m : maps) vars.push_back(g.constant(m));
    return decode_op(g, vars, d, out, out).value();
  };

  std::vector<double> analytic;
  {
    ad::Graph g;
    DecoderVars d = decoder_vars(g, p, true);
    std::vector<ad::Var> vars;
    for (const Tensor& m : maps) vars.push_back(g.param(m));
    ad::Var logits = decode_op(g, vars, d, out, out);
    g.backward(logits, upstream);
    append(analytic, g.grad_or_zero(d.conv1_w));
    append(analytic, g.grad_or_zero(d.conv1_b));
    append(analytic, g.grad_or_zero(d.conv2_w));
    append(analytic, g.grad_or_zero(d.conv2_b));
    for (ad::Var v : vars) append(analytic, g.grad_or_zero(v));
  }

  std::vector<Tensor*> wiggled = p.tensors();
  for (Tensor& m : maps) wiggled.push_back(&m);
  auto J = [&]() { return dot_all(forward(), upstream); };
  const std::vector<double> numeric = fd_over_tensors(wiggled, J);
  return rel_err(analytic, numeric);
}

OpReport run_configs(const std::string& op, double tolerance, int configs, Rng& rng,
                     const std::function<double(Rng&)>& one) {
  OpReport r;
  r.op = op;
  r.tolerance = tolerance;
  r.configs = configs;
  for (int i = 0; i < configs; ++i) r.max_rel_err = std::max(r.max_rel_err, one(rng));
  r.pass = r.max_rel_err < tolerance;
  return r;
}

}  // namespace

Report check_aggregation(std::uint64_t seed) {
  Rng rng(seed);
  Report report;
  report.add(run_configs("offset_network", 1e-4, 20, rng, check_offset_network_config));
  report.add(run_configs("deformable_attention_2d", 1e-4, 20, rng, check_attention_config));
  report.add(run_configs("ddt_forward", 1e-4, 20, rng, check_ddt_config));
  report.add(run_configs("sparse_conv4d", 1e-4, 20, rng, check_sparse_conv_config));
  return report;
}

Report check_pipeline(std::uint64_t seed) {
  Rng rng(seed);
  Report report;
  report.add(run_configs("decoder", 1e-4, 20, rng, check_decoder_config));
  return report;
}

std::string to_text(const Report& report) {
  std::string out;
  char buf[160];
  for (const OpReport& r : report.ops) {
    std::snprintf(buf, sizeof(buf), "%-28s configs=%-3d max_rel_err=%.3e tol=%.0e %s\n",
                  r.op.c_str(), r.configs, r.max_rel_err, r.tolerance,
                  r.pass ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

}  // namespace dacm::gradcheck
