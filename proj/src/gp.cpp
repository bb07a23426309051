#include "dacm/gp.hpp"

#include <cmath>

#include "dacm/errors.hpp"

namespace dacm {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kAscentTolerance = 1e-6;
}  // namespace

void GpTrainingSet::validate() const {
  if (X.rank() != 2) throw DimensionError("training X must be rank 2");
  if (static_cast<int>(y.size()) != X.dim(0))
    throw DimensionError("training y length must match X rows");
  if (X.dim(0) < 1 || X.dim(1) < 1) throw DimensionError("empty training set");
}

std::vector<double> AdamState::update(const std::vector<double>& g) {
  if (m.size() != g.size()) throw DimensionError("adam state size mismatch");
  ++step;
  std::vector<double> delta(g.size());
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < g.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    delta[i] = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
  }
  return delta;
}

GpModel::GpModel(KernelKind kind, KernelHyperparams params, GpTrainingSet data)
    : kind_(kind), params_(std::move(params)), data_(std::move(data)) {
  data_.validate();
  if (params_.feature_dim() != data_.feature_dim())
    throw DimensionError("hyperparam dim does not match data dim");
}

void GpModel::set_params(const KernelHyperparams& p) {
  if (p.feature_dim() != data_.feature_dim())
    throw DimensionError("hyperparam dim does not match data dim");
  params_ = p;
  cache_.reset();
}

void GpModel::set_data(GpTrainingSet data) {
  data.validate();
  if (params_.feature_dim() != data.feature_dim())
    throw DimensionError("hyperparam dim does not match data dim");
  data_ = std::move(data);
  cache_.reset();
}

const GpModel::Cache& GpModel::cache() const {
  if (!cache_) {
    const int n = data_.size();
    Tensor K = gram_matrix(kind_, params_, data_.X, data_.X);
    const double noise = params_.noise();
    for (int i = 0; i < n; ++i) K.at(i, i) += noise;
    Cache c;
    c.factor = cholesky_with_jitter(K);
    c.alpha = c.factor.solve(data_.y);
    cache_ = std::move(c);
  }
  return *cache_;
}

double GpModel::marginal_log_likelihood() const {
  const Cache& c = cache();
  const int n = data_.size();
  double quad = 0.0;
  for (int i = 0; i < n; ++i) quad += data_.y[static_cast<std::size_t>(i)] * c.alpha[static_cast<std::size_t>(i)];
  return -0.5 * c.factor.log_det() - 0.5 * quad - 0.5 * n * kLog2Pi;
}

HyperGrad GpModel::mll_gradients() const {
  const Cache& c = cache();
  const int n = data_.size();
  const int d = data_.feature_dim();

  // A = alpha alpha^T - (K + s^2 I)^-1; dMLL/dtheta = 1/2 sum_ij A_ij dK~_ij/dtheta
  std::vector<double> Kinv(static_cast<std::size_t>(n) * n);
  std::vector<double> e(static_cast<std::size_t>(n), 0.0);
  for (int j = 0; j < n; ++j) {
    e[static_cast<std::size_t>(j)] = 1.0;
    std::vector<double> col = c.factor.solve(e);
    e[static_cast<std::size_t>(j)] = 0.0;
    for (int i = 0; i < n; ++i) Kinv[static_cast<std::size_t>(i) * n + j] = col[static_cast<std::size_t>(i)];
  }

  HyperGrad g(d);
  double trace_a = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* xi = data_.X.data() + static_cast<std::int64_t>(i) * d;
    for (int j = i; j < n; ++j) {
      const double* xj = data_.X.data() + static_cast<std::int64_t>(j) * d;
      const double a = c.alpha[static_cast<std::size_t>(i)] * c.alpha[static_cast<std::size_t>(j)] -
                       Kinv[static_cast<std::size_t>(i) * n + j];
      const double w = (i == j) ? 0.5 * a : a;  // off-diagonal entries appear twice
      HyperGrad dk = kernel_param_gradients(kind_, params_, xi, xj, d);
      g.accumulate(dk, w);
      if (i == j) trace_a += a;
    }
  }
  // Noise enters only through the diagonal: dK~/dlog s^2 = s^2 I.
  g.d_log_noise = 0.5 * params_.noise() * trace_a;
  return g;
}

PredictiveDistribution GpModel::predict(const double* x_star, int dim) const {
  if (dim != data_.feature_dim()) throw DimensionError("predict input dim mismatch");
  const Cache& c = cache();
  const int n = data_.size();
  std::vector<double> k(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* xi = data_.X.data() + static_cast<std::int64_t>(i) * dim;
    k[static_cast<std::size_t>(i)] = eval_kernel(kind_, params_, xi, x_star, dim);
  }
  const double k_star = eval_kernel(kind_, params_, x_star, x_star, dim);
  std::vector<double> w = c.factor.solve(k);
  double mean = 0.0, reduction = 0.0;
  for (int i = 0; i < n; ++i) {
    mean += k[static_cast<std::size_t>(i)] * c.alpha[static_cast<std::size_t>(i)];
    reduction += k[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i)];
  }
  PredictiveDistribution out;
  out.mean = mean;
  out.variance = k_star - reduction + params_.noise();
  return out;
}

PredictiveDistribution GpModel::predict(const std::vector<double>& x_star) const {
  return predict(x_star.data(), static_cast<int>(x_star.size()));
}

void GpModel::ascent_step(AdamState& adam, double learning_rate) {
  HyperGrad g = mll_gradients();
  std::vector<double> delta = adam.update(g.flatten());
  std::vector<double> flat = params_.flatten();
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += learning_rate * delta[i];
  KernelHyperparams next = params_;
  next.unflatten(flat);
  set_params(next);
}

FitResult fit(GpModel model, int max_steps, double learning_rate) {
  if (max_steps < 0) throw DimensionError("max_steps must be >= 0");
  AdamState adam(model.params().param_count());
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(max_steps) + 1);
  double current = model.marginal_log_likelihood();
  trace.push_back(current);

  for (int step = 0; step < max_steps; ++step) {
    HyperGrad g = model.mll_gradients();
    std::vector<double> delta = adam.update(g.flatten());
    const std::vector<double> base = model.params().flatten();

    double scale = learning_rate;
    bool accepted = false;
    for (int backtrack = 0; backtrack < 20 && scale != 0.0; ++backtrack, scale *= 0.5) {
      std::vector<double> flat(base);
      for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += scale * delta[i];
      KernelHyperparams next = model.params();
      next.unflatten(flat);
      GpModel trial = model;
      trial.set_params(next);
      const double value = trial.marginal_log_likelihood();
      if (std::isfinite(value) && value >= current - kAscentTolerance) {
        model = std::move(trial);
        current = value;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // Keep the old parameters; the trace stays flat for this step.
    }
    trace.push_back(current);
  }
  return FitResult{std::move(model), std::move(trace)};
}

}  // namespace dacm
