#include "dacm/kernels.hpp"

#include <cmath>

namespace dacm {

const char* kernel_kind_name(KernelKind kind) {
  switch (kind) {
    case KernelKind::Linear: return "linear";
    case KernelKind::RbfArd: return "rbf";
    case KernelKind::Additive: return "additive";
  }
  return "?";
}

KernelKind kernel_kind_from_name(const std::string& name) {
  if (name == "linear") return KernelKind::Linear;
  if (name == "rbf") return KernelKind::RbfArd;
  if (name == "additive") return KernelKind::Additive;
  throw FormatError("unknown kernel kind: " + name);
}

KernelHyperparams KernelHyperparams::init(int feature_dim, bool tied) {
  KernelHyperparams p;
  p.log_output_scale = 0.0;
  p.log_lengthscales.assign(static_cast<std::size_t>(feature_dim), 0.0);
  p.log_noise = std::log(0.1);
  p.log_linear_variance = 0.0;
  p.tied_lengthscales = tied;
  return p;
}

double KernelHyperparams::output_scale() const { return std::exp(log_output_scale); }
double KernelHyperparams::noise() const { return std::exp(log_noise); }
double KernelHyperparams::linear_variance() const { return std::exp(log_linear_variance); }
double KernelHyperparams::lengthscale(int d) const {
  return std::exp(log_lengthscales[static_cast<std::size_t>(d)]);
}

std::vector<double> KernelHyperparams::flatten() const {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(param_count()));
  flat.push_back(log_output_scale);
  for (double v : log_lengthscales) flat.push_back(v);
  flat.push_back(log_noise);
  flat.push_back(log_linear_variance);
  return flat;
}

void KernelHyperparams::unflatten(const std::vector<double>& flat) {
  if (flat.size() != static_cast<std::size_t>(param_count()))
    throw DimensionError("hyperparam flat vector has wrong length");
  log_output_scale = flat[0];
  for (std::size_t d = 0; d < log_lengthscales.size(); ++d)
    log_lengthscales[d] = flat[1 + d];
  log_noise = flat[1 + log_lengthscales.size()];
  log_linear_variance = flat[2 + log_lengthscales.size()];
}

std::vector<double> HyperGrad::flatten() const {
  std::vector<double> flat;
  flat.reserve(d_log_lengthscales.size() + 3);
  flat.push_back(d_log_output_scale);
  for (double v : d_log_lengthscales) flat.push_back(v);
  flat.push_back(d_log_noise);
  flat.push_back(d_log_linear_variance);
  return flat;
}

void HyperGrad::accumulate(const HyperGrad& o, double weight) {
  d_log_output_scale += weight * o.d_log_output_scale;
  for (std::size_t d = 0; d < d_log_lengthscales.size(); ++d)
    d_log_lengthscales[d] += weight * o.d_log_lengthscales[d];
  d_log_noise += weight * o.d_log_noise;
  d_log_linear_variance += weight * o.d_log_linear_variance;
}

void HyperGrad::tie_lengthscales() {
  double total = 0.0;
  for (double v : d_log_lengthscales) total += v;
  for (double& v : d_log_lengthscales) v = total;
}

namespace {

void check_dims(const KernelHyperparams& params, int dim) {
  if (params.feature_dim() != dim)
    throw DimensionError("lengthscale count " + std::to_string(params.feature_dim()) +
                         " does not match feature dim " + std::to_string(dim));
}

double linear_value(const KernelHyperparams& p, const double* x1, const double* x2, int dim) {
  double dot = 0.0;
  for (int d = 0; d < dim; ++d) dot += x1[d] * x2[d];
  return p.linear_variance() * dot;
}

// sigma0^2 * exp(-1/2 sum_d (x1_d - x2_d)^2 / l_d^2)
double rbf_value(const KernelHyperparams& p, const double* x1, const double* x2, int dim) {
  double q = 0.0;
  for (int d = 0; d < dim; ++d) {
    const double diff = x1[d] - x2[d];
    const double l = p.lengthscale(d);
    q += diff * diff / (l * l);
  }
  return p.output_scale() * std::exp(-0.5 * q);
}

}  // namespace

double eval_kernel(KernelKind kind, const KernelHyperparams& params,
                   const double* x1, const double* x2, int dim) {
  check_dims(params, dim);
  switch (kind) {
    case KernelKind::Linear: return linear_value(params, x1, x2, dim);
    case KernelKind::RbfArd: return rbf_value(params, x1, x2, dim);
    case KernelKind::Additive:
      return linear_value(params, x1, x2, dim) + rbf_value(params, x1, x2, dim);
  }
  return 0.0;
}

double eval_kernel(KernelKind kind, const KernelHyperparams& params,
                   const std::vector<double>& x1, const std::vector<double>& x2) {
  if (x1.size() != x2.size()) throw DimensionError("kernel input dims differ");
  return eval_kernel(kind, params, x1.data(), x2.data(), static_cast<int>(x1.size()));
}

Tensor gram_matrix(KernelKind kind, const KernelHyperparams& params,
                   const Tensor& X, const Tensor& Y) {
  if (X.rank() != 2 || Y.rank() != 2) throw DimensionError("gram_matrix wants rank-2 inputs");
  if (X.dim(1) != Y.dim(1)) throw DimensionError("gram_matrix column dims disagree");
  const int n = X.dim(0), m = Y.dim(0), d = X.dim(1);
  check_dims(params, d);
  Tensor K({n, m});
  for (int i = 0; i < n; ++i) {
    const double* xi = X.data() + static_cast<std::int64_t>(i) * d;
    for (int j = 0; j < m; ++j) {
      const double* yj = Y.data() + static_cast<std::int64_t>(j) * d;
      K.at(i, j) = eval_kernel(kind, params, xi, yj, d);
    }
  }
  return K;
}

HyperGrad kernel_param_gradients(KernelKind kind, const KernelHyperparams& params,
                                 const double* x1, const double* x2, int dim) {
  check_dims(params, dim);
  HyperGrad g(dim);
  if (kind == KernelKind::Linear || kind == KernelKind::Additive) {
    // k_lin = v x1.x2 so dk/dlog v = k_lin.
    g.d_log_linear_variance += linear_value(params, x1, x2, dim);
  }
  if (kind == KernelKind::RbfArd || kind == KernelKind::Additive) {
    const double k = rbf_value(params, x1, x2, dim);
    g.d_log_output_scale += k;  // k is linear in sigma0^2
    for (int d = 0; d < dim; ++d) {
      const double diff = x1[d] - x2[d];
      const double l = params.lengthscale(d);
      // d/dlog l_d: chain rule through -1/2 diff^2 l^-2 gives k * diff^2 / l^2.
      g.d_log_lengthscales[static_cast<std::size_t>(d)] += k * diff * diff / (l * l);
    }
  }
  if (params.tied_lengthscales) g.tie_lengthscales();
  return g;
}

HyperGrad kernel_param_gradients(KernelKind kind, const KernelHyperparams& params,
                                 const std::vector<double>& x1,
                                 const std::vector<double>& x2) {
  if (x1.size() != x2.size()) throw DimensionError("kernel input dims differ");
  return kernel_param_gradients(kind, params, x1.data(), x2.data(),
                                static_cast<int>(x1.size()));
}

}  // namespace dacm
