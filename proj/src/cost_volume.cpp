#include "dacm/cost_volume.hpp"

#include <algorithm>
#include <cmath>

#include "dacm/errors.hpp"

namespace dacm {

namespace {

// Per-position unit normalization into an (h*w) x c row matrix.
// Zero vectors stay zero.
Tensor normalized_rows(const FeatureMap& fm, std::int64_t* zero_count) {
  const int c = fm.channels(), h = fm.height(), w = fm.width();
  Tensor rows({h * w, c});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int row = y * w + x;
      double norm2 = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double v = fm.data.at(ch, y, x);
        norm2 += v * v;
      }
      if (norm2 == 0.0) {
        if (zero_count) ++*zero_count;
        continue;
      }
      const double inv = 1.0 / std::sqrt(norm2);
      for (int ch = 0; ch < c; ++ch) rows.at(row, ch) = fm.data.at(ch, y, x) * inv;
    }
  }
  return rows;
}

}  // namespace

CostVolume build_cost_volume(KernelKind kind, const KernelHyperparams& params,
                             const FeatureMap& query, const FeatureMap& support,
                             std::int64_t* zero_count) {
  if (query.data.rank() != 3 || support.data.rank() != 3)
    throw DimensionError("feature maps must be rank 3");
  if (query.channels() != support.channels())
    throw DimensionError("feature map channel counts differ");
  if (query.level != support.level)
    throw DimensionError("feature map level tags differ");

  const int c = query.channels();
  const int hq = query.height(), wq = query.width();
  const int hs = support.height(), ws = support.width();

  Tensor qrows = normalized_rows(query, zero_count);
  Tensor srows = normalized_rows(support, zero_count);

  CostVolume volume;
  volume.level = query.level;
  volume.data = Tensor({hq, wq, hs, ws});
  double* out = volume.data.data();
  const std::int64_t support_cells = static_cast<std::int64_t>(hs) * ws;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(hq) * wq; ++i) {
    const double* qi = qrows.data() + i * c;
    double* row = out + i * support_cells;
    for (std::int64_t j = 0; j < support_cells; ++j) {
      const double* sj = srows.data() + j * c;
      const double k = eval_kernel(kind, params, qi, sj, c);
      row[j] = k > 0.0 ? k : 0.0;
    }
  }
  return volume;
}

Tensor reduce_similarity(const CostVolume& volume) {
  const int hq = volume.data.dim(0), wq = volume.data.dim(1);
  const std::int64_t support_cells =
      static_cast<std::int64_t>(volume.data.dim(2)) * volume.data.dim(3);
  Tensor sim({hq, wq});
  const double* in = volume.data.data();
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(hq) * wq; ++i) {
    double s = 0.0;
    const double* row = in + i * support_cells;
    for (std::int64_t j = 0; j < support_cells; ++j) s += row[j];
    sim[i] = s;
  }
  return sim;
}

Tensor sampling_probability(const Tensor& similarity, const Tensor& mask_level,
                            double lambda, double epsilon) {
  if (!similarity.same_dims(mask_level))
    throw DimensionError("similarity and mask shapes differ");
  if (lambda < 0.0) throw DimensionError("lambda must be >= 0");
  const std::int64_t n = similarity.numel();
  Tensor biased = similarity;
  for (std::int64_t i = 0; i < n; ++i) biased[i] += lambda * mask_level[i];

  double lo = biased[0], hi = biased[0];
  for (std::int64_t i = 1; i < n; ++i) {
    lo = std::min(lo, biased[i]);
    hi = std::max(hi, biased[i]);
  }
  Tensor p(similarity.dims());
  if (hi - lo < epsilon) {
    for (std::int64_t i = 0; i < n; ++i) p[i] = 0.5;
  } else {
    const double inv = 1.0 / (hi - lo);
    for (std::int64_t i = 0; i < n; ++i) p[i] = (biased[i] - lo) * inv;
  }
  return p;
}

Tensor draw_sample_mask(const Tensor& probability, Rng& rng) {
  Tensor t(probability.dims());
  for (std::int64_t i = 0; i < probability.numel(); ++i)
    t[i] = rng.bernoulli(probability[i]) ? 1.0 : 0.0;
  return t;
}

GpTrainingSet select_training_set(const FeatureMap& query, const Tensor& sample_mask,
                                  const Tensor& mask_level) {
  const int c = query.channels(), h = query.height(), w = query.width();
  if (sample_mask.rank() != 2 || sample_mask.dim(0) != h || sample_mask.dim(1) != w)
    throw DimensionError("sample mask shape mismatch");
  if (!sample_mask.same_dims(mask_level))
    throw DimensionError("sample mask and query mask shapes differ");

  int count = 0;
  for (std::int64_t i = 0; i < sample_mask.numel(); ++i)
    if (sample_mask[i] != 0.0) ++count;
  if (count == 0) throw EmptySampleError("sampler selected no cells");

  GpTrainingSet set;
  set.X = Tensor({count, c});
  set.y.reserve(static_cast<std::size_t>(count));
  int row = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (sample_mask.at(y, x) == 0.0) continue;
      double norm2 = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double v = query.data.at(ch, y, x);
        norm2 += v * v;
      }
      const double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
      for (int ch = 0; ch < c; ++ch) set.X.at(row, ch) = query.data.at(ch, y, x) * inv;
      set.y.push_back(mask_level.at(y, x) != 0.0 ? 1.0 : -1.0);
      ++row;
    }
  }
  return set;
}

Tensor downsample_mask_nearest(const Tensor& mask, int out_h, int out_w) {
  if (mask.rank() != 2) throw DimensionError("mask must be rank 2");
  const int h = mask.dim(0), w = mask.dim(1);
  Tensor out({out_h, out_w});
  for (int i = 0; i < out_h; ++i) {
    const int sy = std::min(h - 1, static_cast<int>((i + 0.5) * h / out_h));
    for (int j = 0; j < out_w; ++j) {
      const int sx = std::min(w - 1, static_cast<int>((j + 0.5) * w / out_w));
      out.at(i, j) = mask.at(sy, sx);
    }
  }
  return out;
}

}  // namespace dacm
