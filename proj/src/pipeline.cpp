#include "dacm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "dacm/errors.hpp"

namespace dacm {

// ---- episode generation ------------------------------------------------------

namespace {

struct ClassSpec {
  int shape = 0;  // 0 disk, 1 square, 2 diamond, 3 ring, 4 cross
  double color[3] = {0, 0, 0};
  double tex_fx = 0, tex_fy = 0, tex_phase = 0, tex_amp = 0;
};

ClassSpec class_spec(int class_id) {
  Rng rng(Rng::mix(0xC1A55, static_cast<std::uint64_t>(class_id)));
  ClassSpec s;
  s.shape = rng.uniform_int(5);
  const int dominant = rng.uniform_int(3);
  for (int c = 0; c < 3; ++c)
    s.color[c] = c == dominant ? rng.uniform(0.65, 0.95) : rng.uniform(0.05, 0.40);
  s.tex_fx = rng.uniform(0.4, 1.4);
  s.tex_fy = rng.uniform(0.4, 1.4);
  s.tex_phase = rng.uniform(0.0, 6.283185307179586);
  s.tex_amp = rng.uniform(0.15, 0.35);
  return s;
}

bool inside_shape(int shape, double dx, double dy, double r) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::max(std::abs(dx), std::abs(dy)) <= 0.85 * r;
    case 2: return std::abs(dx) + std::abs(dy) <= 1.2 * r;
    case 3: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.30 * r * r;
    }
    default:
      return (std::abs(dx) <= 0.35 * r && std::abs(dy) <= r) ||
             (std::abs(dy) <= 0.35 * r && std::abs(dx) <= r);
  }
}

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

void render_background(Tensor& image, Rng& rng) {
  const int s = image.dim(1);
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.10, 0.55);
    c1[c] = rng.uniform(0.10, 0.55);
  }
  const double ang = rng.uniform(0.0, 6.283185307179586);
  const double gx = std::cos(ang), gy = std::sin(ang);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double t = 0.5 + 0.5 * (gx * (x - s / 2.0) + gy * (y - s / 2.0)) / (0.7071 * s);
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - t) * c0[c] + t * c1[c] + rng.uniform(-0.04, 0.04);
        image.at(c, y, x) = clamp01(v);
      }
    }
  }
}

void render_object(Tensor& image, Tensor* mask, const ClassSpec& spec, double cx,
                   double cy, double r, Rng& rng) {
  const int s = image.dim(1);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  const int y1 = std::min(s - 1, static_cast<int>(std::ceil(cy + r + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
  const int x1 = std::min(s - 1, static_cast<int>(std::ceil(cx + r + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (!inside_shape(spec.shape, x - cx, y - cy, r)) continue;
      const double tex =
          1.0 + spec.tex_amp * std::sin(spec.tex_fx * x + spec.tex_fy * y + spec.tex_phase);
      for (int c = 0; c < 3; ++c)
        image.at(c, y, x) = clamp01(spec.color[c] * tex + rng.uniform(-0.03, 0.03));
      if (mask) mask->at(y, x) = 1.0;
    }
  }
}

struct Placement {
  double cx = 0, cy = 0, r = 0;
};

void render_scene(Tensor& image, Tensor& mask, int class_id, Rng& rng, int image_size) {
  render_background(image, rng);

  const double s = static_cast<double>(image_size);
  Placement obj;
  obj.r = rng.uniform(s / 6.0, s / 3.2);
  obj.cx = rng.uniform(obj.r, s - 1.0 - obj.r);
  obj.cy = rng.uniform(obj.r, s - 1.0 - obj.r);

  // distractor objects from other classes, never overlapping the target
  const int distractors = 1 + rng.uniform_int(2);
  for (int i = 0; i < distractors; ++i) {
    const int other = class_id + 1 + rng.uniform_int(1000);
    Placement d;
    d.r = rng.uniform(s / 8.0, s / 4.5);
    bool placed = false;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      d.cx = rng.uniform(d.r, s - 1.0 - d.r);
      d.cy = rng.uniform(d.r, s - 1.0 - d.r);
      const double dist = std::hypot(d.cx - obj.cx, d.cy - obj.cy);
      placed = dist > d.r + obj.r + 1.5;
    }
    if (placed) render_object(image, nullptr, class_spec(other), d.cx, d.cy, d.r, rng);
  }
  render_object(image, &mask, class_spec(class_id), obj.cx, obj.cy, obj.r, rng);
}

}  // namespace

Episode generate_episode(std::uint64_t seed, const EpisodeConfig& config) {
  if (config.shots < 1) throw DimensionError("shots must be >= 1");
  if (config.class_hi <= config.class_lo) throw DimensionError("empty class range");
  Rng rng(seed);
  Episode ep;
  ep.class_id = config.class_lo + rng.uniform_int(config.class_hi - config.class_lo);
  const int s = config.image_size;
  for (int k = 0; k < config.shots; ++k) {
    Tensor image({3, s, s});
    Tensor mask({s, s});
    render_scene(image, mask, ep.class_id, rng, s);
    ep.support_images.push_back(std::move(image));
    ep.support_masks.push_back(std::move(mask));
  }
  ep.query_image = Tensor({3, s, s});
  ep.query_mask = Tensor({s, s});
  render_scene(ep.query_image, ep.query_mask, ep.class_id, rng, s);
  return ep;
}

// ---- backbone -----------------------------------------------------------------

namespace {

// plain same-padded cross-correlation without bias (the backbone is linear)
Tensor conv2d_plain(const Tensor& x, const Tensor& w) {
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ph = kh / 2, pw = kw / 2;
  Tensor out({co, h, wd});
  for (int oc = 0; oc < co; ++oc)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < wd; ++xx) {
        double acc = 0.0;
        for (int ic = 0; ic < ci; ++ic)
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = y + ky - ph;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = xx + kx - pw;
              if (ix < 0 || ix >= wd) continue;
              acc += w.at(oc, ic, ky, kx) * x.at(ic, iy, ix);
            }
          }
        out.at(oc, y, xx) = acc;
      }
  return out;
}

}  // namespace

Tensor area_avg_pool(const Tensor& image, int out_h, int out_w) {
  if (image.rank() != 3) throw DimensionError("area_avg_pool wants rank 3");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (out_h > h || out_w > w) throw DimensionError("pooling cannot upsample");
  Tensor out({c, out_h, out_w});
  for (int i = 0; i < out_h; ++i) {
    const int ya = static_cast<int>(static_cast<std::int64_t>(i) * h / out_h);
    const int yb = static_cast<int>(static_cast<std::int64_t>(i + 1) * h / out_h);
    for (int j = 0; j < out_w; ++j) {
      const int xa = static_cast<int>(static_cast<std::int64_t>(j) * w / out_w);
      const int xb = static_cast<int>(static_cast<std::int64_t>(j + 1) * w / out_w);
      const double inv = 1.0 / ((yb - ya) * (xb - xa));
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int y = ya; y < yb; ++y)
          for (int x = xa; x < xb; ++x) acc += image.at(ch, y, x);
        out.at(ch, i, j) = acc * inv;
      }
    }
  }
  return out;
}

FixedBackbone::FixedBackbone(PyramidConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  if (config_.resolutions.size() != config_.channels.size())
    throw DimensionError("pyramid resolutions/channels length mismatch");
  for (std::size_t l = 0; l < config_.resolutions.size(); ++l) {
    Rng rng(Rng::mix(seed, l));
    Tensor w({config_.channels[l], 3, 3, 3});
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = 0.5 * rng.normal();
    conv_w_.push_back(std::move(w));
  }
}

const Tensor& FixedBackbone::level_weights(int level) const {
  return conv_w_[static_cast<std::size_t>(level)];
}

std::vector<FeatureMap> FixedBackbone::extract_pyramid(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("image must be (3,H,W)");
  std::vector<FeatureMap> out;
  for (std::size_t l = 0; l < config_.resolutions.size(); ++l) {
    const int r = config_.resolutions[l];
    if (r > image.dim(1) || r > image.dim(2))
      throw DimensionError("pyramid level exceeds image size");
    FeatureMap fm;
    fm.level = static_cast<int>(l);
    fm.data = area_avg_pool(conv2d_plain(image, conv_w_[l]), r, r);
    out.push_back(std::move(fm));
  }
  return out;
}

FeatureMap aggregate_kshot(const std::vector<FeatureMap>& maps) {
  if (maps.empty()) throw DimensionError("aggregate_kshot of nothing");
  FeatureMap out = maps[0];
  for (std::size_t k = 1; k < maps.size(); ++k) {
    if (!maps[k].data.same_dims(out.data) || maps[k].level != out.level)
      throw DimensionError("k-shot feature maps disagree in shape or level");
    for (std::int64_t i = 0; i < out.data.numel(); ++i) out.data[i] += maps[k].data[i];
  }
  const double inv = 1.0 / static_cast<double>(maps.size());
  for (std::int64_t i = 0; i < out.data.numel(); ++i) out.data[i] *= inv;
  return out;
}

FeatureMap mask_support_features(const FeatureMap& features, const Tensor& mask_level) {
  if (mask_level.rank() != 2 || mask_level.dim(0) != features.height() ||
      mask_level.dim(1) != features.width())
    throw DimensionError("support mask must match feature resolution");
  FeatureMap out = features;
  for (int y = 0; y < features.height(); ++y)
    for (int x = 0; x < features.width(); ++x)
      if (mask_level.at(y, x) == 0.0)
        for (int c = 0; c < features.channels(); ++c) out.data.at(c, y, x) = 0.0;
  return out;
}

// ---- decoder -------------------------------------------------------------------

DecoderParams DecoderParams::init(int hidden, int levels, Rng& rng) {
  DecoderParams p;
  auto randn = [&rng](std::vector<int> dims, double stddev) {
    Tensor t(std::move(dims));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = stddev * rng.normal();
    return t;
  };
  p.conv1_w = randn({hidden, levels, 3, 3}, 0.3);
  p.conv1_b = Tensor({hidden});
  p.conv2_w = randn({2, hidden, 3, 3}, 0.3);
  p.conv2_b = Tensor({2});
  return p;
}

std::vector<Tensor*> DecoderParams::tensors() {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b};
}

std::vector<const Tensor*> DecoderParams::tensors() const {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b};
}

std::vector<std::string> DecoderParams::tensor_names() {
  return {"conv1_w", "conv1_b", "conv2_w", "conv2_b"};
}

DecoderVars decoder_vars(ad::Graph& g, const DecoderParams& p, bool requires_grad) {
  DecoderVars d;
  auto lift = [&](const Tensor& t) { return requires_grad ? g.param(t) : g.constant(t); };
  d.conv1_w = lift(p.conv1_w);
  d.conv1_b = lift(p.conv1_b);
  d.conv2_w = lift(p.conv2_w);
  d.conv2_b = lift(p.conv2_b);
  return d;
}

ad::Var decode_op(ad::Graph& g, const std::vector<ad::Var>& level_maps,
                  const DecoderVars& d, int out_h, int out_w) {
  if (level_maps.empty()) throw DimensionError("decode wants at least one level");
  const int r0 = level_maps[0].value().dim(1);
  std::vector<ad::Var> at_full;
  at_full.reserve(level_maps.size());
  for (const ad::Var& m : level_maps) {
    at_full.push_back(m.value().dim(1) == r0 ? m : g.upsample_bilinear(m, r0, r0));
  }
  ad::Var stacked = g.concat_channels(at_full);
  ad::Var mixed = g.tanh(g.conv2d(stacked, d.conv1_w, d.conv1_b));
  ad::Var full = g.upsample_bilinear(mixed, out_h, out_w);
  return g.conv2d(full, d.conv2_w, d.conv2_b);
}

Tensor decode(const std::vector<Tensor>& volumes, const DecoderParams& params,
              int out_h, int out_w) {
  ad::Graph g;
  DecoderVars d = decoder_vars(g, params, false);
  std::vector<ad::Var> maps;
  for (const Tensor& v : volumes) {
    ad::Var c4 = g.constant(v);
    maps.push_back(g.reshape(g.mean_support(c4), {1, v.dim(0), v.dim(1)}));
  }
  return decode_op(g, maps, d, out_h, out_w).value();
}

// ---- model ---------------------------------------------------------------------

ModelParams ModelParams::init(const RunConfig& config) {
  config.validate();
  ModelParams m;
  m.config = config;
  Rng rng(Rng::mix(config.seed, 0xA66));
  const int levels = static_cast<int>(config.pyramid_resolutions.size());
  const int stages = m.stages_per_level();
  for (int l = 0; l < levels; ++l) {
    m.kernels.push_back(KernelHyperparams::init(config.pyramid_channels[static_cast<std::size_t>(l)]));
    std::vector<Sparse4dConvParams> convs;
    std::vector<std::pair<AttentionParams, AttentionParams>> ddts;
    for (int s = 0; s < stages; ++s) {
      convs.push_back(Sparse4dConvParams::init(3, rng));
      if (config.ddt_layers > 0) {
        AttentionParams sdt = AttentionParams::init(config.heads, config.head_dim, 8, 0.5, rng);
        AttentionParams qdt = AttentionParams::init(config.heads, config.head_dim, 8, 0.5, rng);
        ddts.emplace_back(std::move(sdt), std::move(qdt));
      }
    }
    m.convs.push_back(std::move(convs));
    m.ddts.push_back(std::move(ddts));
  }
  m.decoder = DecoderParams::init(8, levels, rng);
  return m;
}

std::vector<Tensor*> ModelParams::trainable_tensors() {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < convs.size(); ++l) {
    for (std::size_t s = 0; s < convs[l].size(); ++s) {
      for (Tensor* t : convs[l][s].tensors()) out.push_back(t);
      if (use_ddt()) {
        for (Tensor* t : ddts[l][s].first.tensors()) out.push_back(t);
        for (Tensor* t : ddts[l][s].second.tensors()) out.push_back(t);
      }
    }
  }
  for (Tensor* t : decoder.tensors()) out.push_back(t);
  return out;
}

std::vector<const Tensor*> ModelParams::trainable_tensors() const {
  std::vector<const Tensor*> out;
  for (const Tensor* t : const_cast<ModelParams*>(this)->trainable_tensors()) out.push_back(t);
  return out;
}

std::vector<NamedTensor> ModelParams::to_named_tensors() const {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < kernels.size(); ++l) {
    const std::vector<double> flat = kernels[l].flatten();
    out.push_back({"level" + std::to_string(l) + "/kernel",
                   Tensor({static_cast<int>(flat.size())}, flat)});
  }
  for (std::size_t l = 0; l < convs.size(); ++l) {
    for (std::size_t s = 0; s < convs[l].size(); ++s) {
      const std::string base = "level" + std::to_string(l) + "/stage" + std::to_string(s);
      const auto conv_names = Sparse4dConvParams::tensor_names();
      const auto conv_tensors = convs[l][s].tensors();
      for (std::size_t i = 0; i < conv_tensors.size(); ++i)
        out.push_back({base + "/conv/" + conv_names[i], *conv_tensors[i]});
      if (use_ddt()) {
        const auto attn_names = AttentionParams::tensor_names();
        const auto sdt_tensors = ddts[l][s].first.tensors();
        const auto qdt_tensors = ddts[l][s].second.tensors();
        for (std::size_t i = 0; i < sdt_tensors.size(); ++i)
          out.push_back({base + "/sdt/" + attn_names[i], *sdt_tensors[i]});
        for (std::size_t i = 0; i < qdt_tensors.size(); ++i)
          out.push_back({base + "/qdt/" + attn_names[i], *qdt_tensors[i]});
      }
    }
  }
  const auto dec_names = DecoderParams::tensor_names();
  const auto dec_tensors = decoder.tensors();
  for (std::size_t i = 0; i < dec_tensors.size(); ++i)
    out.push_back({"decoder/" + dec_names[i], *dec_tensors[i]});
  return out;
}

ModelParams ModelParams::from_named_tensors(const RunConfig& config,
                                            const std::vector<NamedTensor>& tensors) {
  ModelParams m = ModelParams::init(config);
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& nt : tensors) by_name[nt.name] = &nt.tensor;

  const std::vector<NamedTensor> expected = m.to_named_tensors();
  // kernels first, matching the flattened layout
  for (std::size_t l = 0; l < m.kernels.size(); ++l) {
    const std::string name = "level" + std::to_string(l) + "/kernel";
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing " + name);
    const Tensor& t = *it->second;
    if (t.numel() != m.kernels[l].param_count())
      throw FormatError("checkpoint kernel size mismatch for " + name);
    m.kernels[l].unflatten(t.vec());
  }
  std::vector<Tensor*> slots = m.trainable_tensors();
  std::size_t slot = 0;
  for (const NamedTensor& nt : expected) {
    const bool is_kernel =
        nt.name.size() >= 7 && nt.name.compare(nt.name.size() - 7, 7, "/kernel") == 0;
    if (is_kernel) continue;  // handled above
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing " + nt.name);
    if (!(it->second->dims() == slots[slot]->dims()))
      throw FormatError("checkpoint shape mismatch for " + nt.name);
    *slots[slot] = *it->second;
    ++slot;
  }
  if (slot != slots.size()) throw FormatError("checkpoint tensor count mismatch");
  return m;
}

// ---- metrics -------------------------------------------------------------------

void IouAccumulator::add(const Tensor& prediction, const Tensor& ground_truth, int class_id) {
  if (!prediction.same_dims(ground_truth))
    throw DimensionError("prediction/ground-truth shape mismatch");
  Counts& pc = per_class_[class_id];
  for (std::int64_t i = 0; i < prediction.numel(); ++i) {
    const bool p = prediction[i] != 0.0;
    const bool t = ground_truth[i] != 0.0;
    pc.inter += p && t;
    pc.uni += p || t;
    fg_.inter += p && t;
    fg_.uni += p || t;
    bg_.inter += !p && !t;
    bg_.uni += !p || !t;
  }
  ++episodes_;
}

namespace {
double safe_iou(std::int64_t inter, std::int64_t uni) {
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}
}  // namespace

EvalReport IouAccumulator::report(std::uint64_t seed) const {
  EvalReport r;
  r.seed = seed;
  r.episode_count = episodes_;
  double total = 0.0;
  for (const auto& [cls, counts] : per_class_) {
    const double iou = safe_iou(counts.inter, counts.uni);
    r.per_class_iou.emplace_back(cls, iou);
    total += iou;
  }
  r.miou = per_class_.empty() ? 0.0 : total / static_cast<double>(per_class_.size());
  r.fb_iou = 0.5 * (safe_iou(fg_.inter, fg_.uni) + safe_iou(bg_.inter, bg_.uni));
  return r;
}

double IouAccumulator::episode_fb_iou(const Tensor& prediction, const Tensor& ground_truth) {
  IouAccumulator acc;
  acc.add(prediction, ground_truth, 0);
  return acc.report(0).fb_iou;
}

// ---- training / evaluation -------------------------------------------------------

namespace {

struct GraphModel {
  std::vector<ad::Var> flat;  // aligned with ModelParams::trainable_tensors()
  std::vector<std::vector<std::pair<ad::Var, ad::Var>>> conv_vars;
  std::vector<std::vector<std::pair<AttentionVars, AttentionVars>>> ddt_vars;
  DecoderVars dec;
};

std::vector<ad::Var> attention_var_list(const AttentionVars& v) {
  return {v.embed_w, v.embed_b, v.w_q, v.w_k, v.w_v, v.out_w, v.out_b,
          v.off_w1, v.off_b1, v.off_w2, v.off_b2};
}

GraphModel lift_model(ad::Graph& g, const ModelParams& m, bool requires_grad) {
  GraphModel gm;
  auto lift = [&](const Tensor& t) { return requires_grad ? g.param(t) : g.constant(t); };
  for (std::size_t l = 0; l < m.convs.size(); ++l) {
    std::vector<std::pair<ad::Var, ad::Var>> convs;
    std::vector<std::pair<AttentionVars, AttentionVars>> ddts;
    for (std::size_t s = 0; s < m.convs[l].size(); ++s) {
      ad::Var ws = lift(m.convs[l][s].support_kernel);
      ad::Var wq = lift(m.convs[l][s].query_kernel);
      gm.flat.push_back(ws);
      gm.flat.push_back(wq);
      convs.emplace_back(ws, wq);
      if (m.use_ddt()) {
        AttentionVars sdt = attention_vars(g, m.ddts[l][s].first, requires_grad);
        AttentionVars qdt = attention_vars(g, m.ddts[l][s].second, requires_grad);
        for (ad::Var v : attention_var_list(sdt)) gm.flat.push_back(v);
        for (ad::Var v : attention_var_list(qdt)) gm.flat.push_back(v);
        ddts.emplace_back(sdt, qdt);
      }
    }
    gm.conv_vars.push_back(std::move(convs));
    gm.ddt_vars.push_back(std::move(ddts));
  }
  gm.dec = decoder_vars(g, m.decoder, requires_grad);
  gm.flat.push_back(gm.dec.conv1_w);
  gm.flat.push_back(gm.dec.conv1_b);
  gm.flat.push_back(gm.dec.conv2_w);
  gm.flat.push_back(gm.dec.conv2_b);
  return gm;
}

ad::Var build_logits(ad::Graph& g, const GraphModel& gm, const ModelParams& m,
                     const std::vector<CostVolume>& volumes, int out_h, int out_w) {
  std::vector<ad::Var> level_maps;
  for (std::size_t l = 0; l < volumes.size(); ++l) {
    ad::Var x = g.constant(volumes[l].data);
    for (std::size_t s = 0; s < gm.conv_vars[l].size(); ++s) {
      x = g.tanh(g.sparse_conv4d(x, gm.conv_vars[l][s].first, gm.conv_vars[l][s].second));
      if (m.use_ddt())
        x = ddt_op(g, x, gm.ddt_vars[l][s].first, gm.ddt_vars[l][s].second);
    }
    const int r = volumes[l].data.dim(0);
    level_maps.push_back(g.reshape(g.mean_support(x), {1, r, r}));
  }
  return decode_op(g, level_maps, gm.dec, out_h, out_w);
}

Tensor argmax_logits(const Tensor& logits) {
  const int h = logits.dim(1), w = logits.dim(2);
  Tensor pred({h, w});
  const std::int64_t n = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < n; ++i)
    pred[i] = logits.data()[n + i] > logits.data()[i] ? 1.0 : 0.0;
  return pred;
}

// Adam over a fixed list of tensors (descent).
struct AdamTensors {
  std::vector<Tensor> m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamTensors(const std::vector<Tensor*>& params) {
    for (const Tensor* p : params) {
      m.emplace_back(p->dims());
      v.emplace_back(p->dims());
    }
  }

  void update(std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr) {
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& gr = grads[i];
      if (!gr.same_dims(p)) throw DimensionError("gradient/parameter shape mismatch");
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * gr[j];
        v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * gr[j] * gr[j];
        p[j] -= lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps);
      }
    }
  }
};

struct EpisodeFeatures {
  std::vector<FeatureMap> query;
  std::vector<FeatureMap> support_masked;   // k-shot averaged, masked
  std::vector<Tensor> query_mask_levels;    // nearest-downsampled per level
  Tensor query_mask;
};

EpisodeFeatures prepare_episode(const FixedBackbone& backbone, const Episode& ep) {
  EpisodeFeatures f;
  f.query = backbone.extract_pyramid(ep.query_image);
  f.query_mask = ep.query_mask;
  const PyramidConfig& cfg = backbone.config();
  const int levels = static_cast<int>(cfg.resolutions.size());

  std::vector<std::vector<FeatureMap>> per_shot(static_cast<std::size_t>(levels));
  for (std::size_t k = 0; k < ep.support_images.size(); ++k) {
    std::vector<FeatureMap> fs = backbone.extract_pyramid(ep.support_images[k]);
    for (int l = 0; l < levels; ++l) {
      const int r = cfg.resolutions[static_cast<std::size_t>(l)];
      Tensor mask_l = downsample_mask_nearest(ep.support_masks[k], r, r);
      per_shot[static_cast<std::size_t>(l)].push_back(
          mask_support_features(fs[static_cast<std::size_t>(l)], mask_l));
    }
  }
  for (int l = 0; l < levels; ++l) {
    f.support_masked.push_back(aggregate_kshot(per_shot[static_cast<std::size_t>(l)]));
    const int r = cfg.resolutions[static_cast<std::size_t>(l)];
    f.query_mask_levels.push_back(downsample_mask_nearest(ep.query_mask, r, r));
  }
  return f;
}

std::int64_t count_nonzero(const Tensor& t) {
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < t.numel(); ++i) n += t[i] != 0.0;
  return n;
}

constexpr int kMaxGpPoints = 4096;

GpTrainingSet capped(GpTrainingSet set) {
  if (set.size() <= kMaxGpPoints) return set;
  GpTrainingSet out;
  out.X = Tensor({kMaxGpPoints, set.feature_dim()});
  std::copy(set.X.data(), set.X.data() + out.X.numel(), out.X.data());
  out.y.assign(set.y.begin(), set.y.begin() + kMaxGpPoints);
  return out;
}

}  // namespace

std::vector<Episode> make_train_episodes(const RunConfig& config) {
  EpisodeConfig ec;
  ec.image_size = config.image_size;
  ec.shots = config.shots;
  ec.class_lo = 0;
  ec.class_hi = config.classes / 2;  // the rest are held out for evaluation
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(config.train_episodes));
  for (int i = 0; i < config.train_episodes; ++i)
    out.push_back(generate_episode(Rng::mix(Rng::mix(config.seed, 0x7E41), i), ec));
  return out;
}

std::vector<Episode> make_eval_episodes(const RunConfig& config) {
  EpisodeConfig ec;
  ec.image_size = config.image_size;
  ec.shots = config.shots;
  ec.class_lo = config.classes / 2;
  ec.class_hi = config.classes;
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(config.eval_episodes));
  for (int i = 0; i < config.eval_episodes; ++i)
    out.push_back(generate_episode(Rng::mix(Rng::mix(config.seed, 0xE7A1), i), ec));
  return out;
}

TrainResult train(const RunConfig& config) {
  config.validate();
  const std::vector<Episode> episodes = make_train_episodes(config);
  FixedBackbone backbone(PyramidConfig{config.pyramid_resolutions, config.pyramid_channels},
                         Rng::mix(config.seed, 0xBB));
  ModelParams model = ModelParams::init(config);
  const int levels = static_cast<int>(config.pyramid_resolutions.size());

  std::vector<EpisodeFeatures> features;
  features.reserve(episodes.size());
  for (const Episode& ep : episodes) features.push_back(prepare_episode(backbone, ep));

  std::vector<AdamState> gp_adam;
  for (int l = 0; l < levels; ++l)
    gp_adam.emplace_back(model.kernels[static_cast<std::size_t>(l)].param_count());

  std::vector<Tensor*> params = model.trainable_tensors();
  AdamTensors agg_adam(params);

  TrainResult result;
  result.trace.reserve(static_cast<std::size_t>(config.epochs) * episodes.size());
  std::int64_t zero_count = 0;
  int global_iter = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t e = 0; e < episodes.size(); ++e) {
      const EpisodeFeatures& f = features[e];

      std::vector<CostVolume> volumes;
      for (int l = 0; l < levels; ++l)
        volumes.push_back(build_cost_volume(config.kernel, model.kernels[static_cast<std::size_t>(l)],
                                            f.query[static_cast<std::size_t>(l)],
                                            f.support_masked[static_cast<std::size_t>(l)],
                                            &zero_count));

      if (config.gp_learning_rate != 0.0) {
        for (int l = 0; l < levels; ++l) {
          Tensor sim = reduce_similarity(volumes[static_cast<std::size_t>(l)]);
          const Tensor& mask_l = f.query_mask_levels[static_cast<std::size_t>(l)];
          Tensor prob = sampling_probability(sim, mask_l, config.lambda, config.epsilon);
          Rng sampler_rng(Rng::mix(Rng::mix(config.seed, 0x5A17),
                                   static_cast<std::uint64_t>(global_iter) * 8 + l));
          Tensor picked = draw_sample_mask(prob, sampler_rng);
          if (count_nonzero(picked) == 0) picked = mask_l;  // fall back to mask-positive cells
          if (count_nonzero(picked) == 0) picked = Tensor::full(mask_l.dims(), 1.0);
          GpTrainingSet set = capped(select_training_set(f.query[static_cast<std::size_t>(l)],
                                                         picked, mask_l));
          GpModel gp(config.kernel, model.kernels[static_cast<std::size_t>(l)], std::move(set));
          gp.ascent_step(gp_adam[static_cast<std::size_t>(l)], config.gp_learning_rate);
          model.kernels[static_cast<std::size_t>(l)] = gp.params();
        }
      }

      ad::Graph g;
      GraphModel gm = lift_model(g, model, true);
      ad::Var logits = build_logits(g, gm, model, volumes, config.image_size, config.image_size);
      ad::Var loss = g.cross_entropy2(logits, f.query_mask);
      const double loss_value = loss.value()[0];
      if (!std::isfinite(loss_value))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) +
                             " iter " + std::to_string(global_iter));
      g.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(gm.flat.size());
      for (ad::Var v : gm.flat) grads.push_back(g.grad_or_zero(v));
      agg_adam.update(params, grads, config.agg_learning_rate);

      TraceRow row;
      row.epoch = epoch;
      row.iter = global_iter;
      row.loss = loss_value;
      row.miou = IouAccumulator::episode_fb_iou(argmax_logits(logits.value()), f.query_mask);
      result.trace.push_back(row);
      loss_sum += loss_value;
      ++global_iter;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(episodes.size()));
  }
  result.zero_feature_vectors = zero_count;
  result.model = std::move(model);
  return result;
}

Tensor predict_episode(const ModelParams& model, const FixedBackbone& backbone,
                       const Episode& episode) {
  EpisodeFeatures f = prepare_episode(backbone, episode);
  const RunConfig& config = model.config;
  const int levels = static_cast<int>(config.pyramid_resolutions.size());
  std::vector<CostVolume> volumes;
  for (int l = 0; l < levels; ++l)
    volumes.push_back(build_cost_volume(config.kernel, model.kernels[static_cast<std::size_t>(l)],
                                        f.query[static_cast<std::size_t>(l)],
                                        f.support_masked[static_cast<std::size_t>(l)]));
  ad::Graph g;
  GraphModel gm = lift_model(g, model, false);
  ad::Var logits = build_logits(g, gm, model, volumes, config.image_size, config.image_size);
  return argmax_logits(logits.value());
}

EvalReport evaluate(const ModelParams& model, const std::vector<Episode>& episodes,
                    std::uint64_t seed) {
  FixedBackbone backbone(PyramidConfig{model.config.pyramid_resolutions,
                                       model.config.pyramid_channels},
                         Rng::mix(model.config.seed, 0xBB));
  IouAccumulator acc;
  for (const Episode& ep : episodes)
    acc.add(predict_episode(model, backbone, ep), ep.query_mask, ep.class_id);
  return acc.report(seed);
}

std::string trace_to_csv(const std::vector<TraceRow>& trace) {
  std::string out = "epoch,iter,loss,miou\n";
  char buf[128];
  for (const TraceRow& r : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g\n", r.epoch, r.iter, r.loss, r.miou);
    out += buf;
  }
  return out;
}

std::string report_to_text(const EvalReport& report) {
  std::string out;
  char buf[128];
  out += "episodes = " + std::to_string(report.episode_count) + "\n";
  out += "seed = " + std::to_string(report.seed) + "\n";
  std::snprintf(buf, sizeof(buf), "miou = %.17g\n", report.miou);
  out += buf;
  std::snprintf(buf, sizeof(buf), "fb_iou = %.17g\n", report.fb_iou);
  out += buf;
  for (const auto& [cls, iou] : report.per_class_iou) {
    std::snprintf(buf, sizeof(buf), "class_%d_iou = %.17g\n", cls, iou);
    out += buf;
  }
  return out;
}

}  // namespace dacm
