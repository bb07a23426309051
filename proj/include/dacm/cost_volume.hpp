#pragma once

#include <cstdint>

#include "dacm/gp.hpp"
#include "dacm/kernels.hpp"
#include "dacm/rng.hpp"
#include "dacm/tensor.hpp"

namespace dacm {

// Level-tagged c x h x w grid of feature vectors.
struct FeatureMap {
  int level = 0;
  Tensor data;  // (c, h, w)

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

// 4D tensor of pairwise query/support similarities; entries are >= 0.
struct CostVolume {
  int level = 0;
  Tensor data;  // (h_q, w_q, h_s, w_s)
};

// The hard-example sampling pipeline state for one level.
struct SamplerState {
  Tensor similarity;   // S, h x w
  Tensor biased;       // S + lambda * M, h x w
  Tensor probability;  // p in [0,1], h x w
  Tensor mask_sample;  // t in {0,1}, h x w
  double lambda = 1.0;
  double epsilon = 1e-12;
};

// C(i,j) = ReLU(k(Fq(i)/|Fq(i)|, Fs(j)/|Fs(j)|)).  Zero feature vectors
// normalize to the zero vector; if zero_count is non-null it receives the
// number of such positions so callers can log them.
CostVolume build_cost_volume(KernelKind kind, const KernelHyperparams& params,
                             const FeatureMap& query, const FeatureMap& support,
                             std::int64_t* zero_count = nullptr);

// S(i) = sum_j C(i,j)
Tensor reduce_similarity(const CostVolume& volume);

// S_hat = S + lambda * mask; p = minmax(S_hat), or 0.5 everywhere when the
// range is below epsilon.
Tensor sampling_probability(const Tensor& similarity, const Tensor& mask_level,
                            double lambda, double epsilon);

// Independent per-cell Bernoulli draws in row-major order.
Tensor draw_sample_mask(const Tensor& probability, Rng& rng);

// Training rows are the unit-normalized query feature vectors at cells with
// t = 1; targets are +1 inside the mask and -1 outside.
GpTrainingSet select_training_set(const FeatureMap& query, const Tensor& sample_mask,
                                  const Tensor& mask_level);

// Nearest-neighbor resize of a binary map (preserves binarity).
Tensor downsample_mask_nearest(const Tensor& mask, int out_h, int out_w);

}  // namespace dacm
