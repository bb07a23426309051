#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dacm/errors.hpp"
#include "dacm/tensor.hpp"

namespace dacm {

enum class KernelKind { Linear, RbfArd, Additive };

const char* kernel_kind_name(KernelKind kind);
KernelKind kernel_kind_from_name(const std::string& name);

// All hyperparameters live in the log domain so that gradient ascent is
// unconstrained while the exponentiated values stay strictly positive.
struct KernelHyperparams {
  double log_output_scale = 0.0;             // log(sigma0^2)
  std::vector<double> log_lengthscales;      // log(l_d), one per feature dim
  double log_noise = 0.0;                    // log(sigma^2)
  double log_linear_variance = 0.0;          // log(v)
  bool tied_lengthscales = false;            // share one lengthscale across dims

  // Unit-scale start: sigma0^2 = 1, l_d = 1, sigma^2 = 0.1, v = 1.
  static KernelHyperparams init(int feature_dim, bool tied = false);

  double output_scale() const;   // sigma0^2
  double noise() const;          // sigma^2
  double linear_variance() const;// v
  double lengthscale(int d) const;
  int feature_dim() const { return static_cast<int>(log_lengthscales.size()); }

  // Flat view in the fixed order: log_output_scale, log_lengthscales...,
  // log_noise, log_linear_variance.  Used by the optimizers.
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
  int param_count() const { return feature_dim() + 3; }
};

// Gradient of a scalar (kernel value or marginal log-likelihood) with
// respect to every log-domain hyperparameter.
struct HyperGrad {
  double d_log_output_scale = 0.0;
  std::vector<double> d_log_lengthscales;
  double d_log_noise = 0.0;
  double d_log_linear_variance = 0.0;

  explicit HyperGrad(int feature_dim = 0) : d_log_lengthscales(feature_dim, 0.0) {}

  std::vector<double> flatten() const;
  void accumulate(const HyperGrad& o, double weight);
  // Sums lengthscale components into every slot (the tied-lengthscale switch).
  void tie_lengthscales();
};

double eval_kernel(KernelKind kind, const KernelHyperparams& params,
                   const double* x1, const double* x2, int dim);
double eval_kernel(KernelKind kind, const KernelHyperparams& params,
                   const std::vector<double>& x1, const std::vector<double>& x2);

// Entry (i,j) = k(X_i, Y_j).  X is n x d, Y is m x d, both row-major.
Tensor gram_matrix(KernelKind kind, const KernelHyperparams& params,
                   const Tensor& X, const Tensor& Y);

HyperGrad kernel_param_gradients(KernelKind kind, const KernelHyperparams& params,
                                 const double* x1, const double* x2, int dim);
HyperGrad kernel_param_gradients(KernelKind kind, const KernelHyperparams& params,
                                 const std::vector<double>& x1,
                                 const std::vector<double>& x2);

}  // namespace dacm
