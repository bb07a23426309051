#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dacm/aggregation.hpp"
#include "dacm/autodiff.hpp"
#include "dacm/cost_volume.hpp"
#include "dacm/gp.hpp"
#include "dacm/serialize.hpp"
#include "dacm/tensor.hpp"

namespace dacm {

// One few-shot task: K support image/mask pairs plus a query pair of the
// same procedural class.
struct Episode {
  std::vector<Tensor> support_images;  // each (3,H,W)
  std::vector<Tensor> support_masks;   // each (H,W), {0,1}
  Tensor query_image;                  // (3,H,W)
  Tensor query_mask;                   // (H,W)
  int class_id = 0;
};

struct EpisodeConfig {
  int image_size = 32;
  int shots = 1;
  int class_lo = 0;  // classes are drawn from [class_lo, class_hi)
  int class_hi = 8;
};

// Procedural episodes: one shape family + color/texture signature per class,
// distractor objects from other classes, exact masks.  Deterministic per seed.
Episode generate_episode(std::uint64_t seed, const EpisodeConfig& config);

// ---- fixed linear feature pyramid ------------------------------------------

struct PyramidConfig {
  std::vector<int> resolutions = {16, 8, 4};  // strictly decreasing
  std::vector<int> channels = {8, 16, 32};
};

// Non-learned backbone: per level, area average pooling to the target
// resolution followed by a fixed seeded 3x3 linear convolution (no bias),
// so the whole map is linear in the image.
class FixedBackbone {
 public:
  FixedBackbone(PyramidConfig config, std::uint64_t seed);

  std::vector<FeatureMap> extract_pyramid(const Tensor& image) const;
  const PyramidConfig& config() const { return config_; }
  const Tensor& level_weights(int level) const;

 private:
  PyramidConfig config_;
  std::vector<Tensor> conv_w_;  // (c_l, 3, 3, 3)
};

// Area average pooling with floor box boundaries; linear in the input.
Tensor area_avg_pool(const Tensor& image, int out_h, int out_w);

// Elementwise mean across K equally-shaped feature maps.
FeatureMap aggregate_kshot(const std::vector<FeatureMap>& maps);

// Zeroes background positions; mask must already be at feature resolution.
FeatureMap mask_support_features(const FeatureMap& features, const Tensor& mask_level);

// ---- decoder ----------------------------------------------------------------

struct DecoderParams {
  Tensor conv1_w;  // (hidden, levels, 3, 3)
  Tensor conv1_b;  // (hidden)
  Tensor conv2_w;  // (2, hidden, 3, 3)
  Tensor conv2_b;  // (2)

  static DecoderParams init(int hidden, int levels, Rng& rng);
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  static std::vector<std::string> tensor_names();
};

struct DecoderVars {
  ad::Var conv1_w, conv1_b, conv2_w, conv2_b;
};

DecoderVars decoder_vars(ad::Graph& g, const DecoderParams& p, bool requires_grad);

// level_maps are (1, r_l, r_l); coarser maps are upsampled to the finest
// resolution, stacked as channels, mixed by conv1/tanh, upsampled to the
// output size and projected to 2-class logits by conv2.
ad::Var decode_op(ad::Graph& g, const std::vector<ad::Var>& level_maps,
                  const DecoderVars& d, int out_h, int out_w);

// Plain forward: pools each aggregated 4D volume over the support dims and
// decodes to (2, out_h, out_w) logits.
Tensor decode(const std::vector<Tensor>& volumes, const DecoderParams& params,
              int out_h, int out_w);

// ---- the full model ----------------------------------------------------------

struct ModelParams {
  RunConfig config;
  std::vector<KernelHyperparams> kernels;                 // one GP per level
  std::vector<std::vector<Sparse4dConvParams>> convs;     // [level][stage]
  std::vector<std::vector<std::pair<AttentionParams, AttentionParams>>> ddts;
  DecoderParams decoder;

  static ModelParams init(const RunConfig& config);

  bool use_ddt() const { return config.ddt_layers > 0; }
  int stages_per_level() const { return config.ddt_layers > 0 ? config.ddt_layers : 2; }

  // Aggregation + decoder tensors in a fixed canonical order.
  std::vector<Tensor*> trainable_tensors();
  std::vector<const Tensor*> trainable_tensors() const;

  std::vector<NamedTensor> to_named_tensors() const;
  static ModelParams from_named_tensors(const RunConfig& config,
                                        const std::vector<NamedTensor>& tensors);
};

// ---- metrics ------------------------------------------------------------------

struct EvalReport {
  std::vector<std::pair<int, double>> per_class_iou;
  double miou = 0.0;
  double fb_iou = 0.0;
  int episode_count = 0;
  std::uint64_t seed = 0;
};

// Accumulates intersections and unions before dividing, so the report is
// invariant to episode order.
class IouAccumulator {
 public:
  void add(const Tensor& prediction, const Tensor& ground_truth, int class_id);
  EvalReport report(std::uint64_t seed) const;
  // foreground-vs-background mean IoU of a single prediction
  static double episode_fb_iou(const Tensor& prediction, const Tensor& ground_truth);

 private:
  struct Counts {
    std::int64_t inter = 0;
    std::int64_t uni = 0;
  };
  std::map<int, Counts> per_class_;
  Counts fg_, bg_;
  int episodes_ = 0;
};

// ---- training / evaluation -----------------------------------------------------

struct TraceRow {
  int epoch = 0;
  int iter = 0;
  double loss = 0.0;
  double miou = 0.0;
};

struct TrainResult {
  ModelParams model;
  std::vector<TraceRow> trace;
  std::vector<double> epoch_loss;  // per-epoch mean training loss
  std::int64_t zero_feature_vectors = 0;
};

std::vector<Episode> make_train_episodes(const RunConfig& config);
std::vector<Episode> make_eval_episodes(const RunConfig& config);

// Joint loop: per iteration, cost volumes from the current kernels, the
// hard-example sampler, one MLL ascent step per level GP, and one Adam
// descent step on the aggregation + decoder cross entropy.
TrainResult train(const RunConfig& config);

EvalReport evaluate(const ModelParams& model, const std::vector<Episode>& episodes,
                    std::uint64_t seed);

// Argmax segmentation of one episode under the model (used by evaluate and
// the CLI); returns an (H,W) 0/1 map.
Tensor predict_episode(const ModelParams& model, const FixedBackbone& backbone,
                       const Episode& episode);

std::string trace_to_csv(const std::vector<TraceRow>& trace);
std::string report_to_text(const EvalReport& report);

}  // namespace dacm
