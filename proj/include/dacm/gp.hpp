#pragma once

#include <optional>
#include <vector>

#include "dacm/kernels.hpp"
#include "dacm/linalg.hpp"
#include "dacm/tensor.hpp"

namespace dacm {

// Regression data for one GP.  X rows are feature vectors; y holds the
// targets (the sampler produces +1/-1 mask labels).
struct GpTrainingSet {
  Tensor X;                // N x D
  std::vector<double> y;   // N

  int size() const { return X.rank() == 2 ? X.dim(0) : 0; }
  int feature_dim() const { return X.rank() == 2 ? X.dim(1) : 0; }
  void validate() const;
};

struct PredictiveDistribution {
  double mean = 0.0;
  double variance = 0.0;
};

// Adam moments for ascent on the flattened hyperparameter vector.
struct AdamState {
  std::vector<double> m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamState(int param_count = 0)
      : m(static_cast<std::size_t>(param_count), 0.0),
        v(static_cast<std::size_t>(param_count), 0.0) {}

  // Returns the ascent update direction for gradient g (already bias-corrected).
  std::vector<double> update(const std::vector<double>& g);
};

// Exact GP regression model.  The factorization of K + sigma^2 I is cached
// and rebuilt lazily whenever the hyperparameters or data change.
class GpModel {
 public:
  GpModel(KernelKind kind, KernelHyperparams params, GpTrainingSet data);

  KernelKind kind() const { return kind_; }
  const KernelHyperparams& params() const { return params_; }
  const GpTrainingSet& data() const { return data_; }

  void set_params(const KernelHyperparams& p);
  void set_data(GpTrainingSet data);

  // -1/2 log|K + s^2 I| - 1/2 y^T (K + s^2 I)^-1 y - N/2 log 2pi
  double marginal_log_likelihood() const;

  HyperGrad mll_gradients() const;

  PredictiveDistribution predict(const double* x_star, int dim) const;
  PredictiveDistribution predict(const std::vector<double>& x_star) const;

  // One Adam ascent step on the MLL at the given learning rate.  Used by the
  // training loop, which resamples data every iteration.
  void ascent_step(AdamState& adam, double learning_rate);

 private:
  struct Cache {
    CholeskyFactor factor;
    std::vector<double> alpha;  // (K + s^2 I)^-1 y
  };
  const Cache& cache() const;

  KernelKind kind_;
  KernelHyperparams params_;
  GpTrainingSet data_;
  mutable std::optional<Cache> cache_;
};

struct FitResult {
  GpModel model;
  std::vector<double> mll_trace;  // trace[0] is the initial MLL
};

// Adam ascent on the MLL with a backtracking guard: a step that would drop
// the MLL by more than 1e-6 is scaled down (and finally skipped), so the
// returned trace is non-decreasing up to that tolerance.
FitResult fit(GpModel model, int max_steps, double learning_rate);

}  // namespace dacm
