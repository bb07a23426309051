#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dacm/gradcheck.hpp"
#include "dacm/pipeline.hpp"
#include "test_support.hpp"

using namespace dacm;

namespace {

EpisodeConfig tiny_episode_config() {
  EpisodeConfig ec;
  ec.image_size = 24;
  ec.shots = 1;
  ec.class_lo = 0;
  ec.class_hi = 6;
  return ec;
}

RunConfig tiny_run_config() {
  RunConfig c;
  c.seed = 5;
  c.kernel = KernelKind::RbfArd;
  c.epochs = 2;
  c.image_size = 16;
  c.pyramid_resolutions = {4, 3, 2};
  c.pyramid_channels = {4, 5, 6};
  c.train_episodes = 6;
  c.eval_episodes = 4;
  c.heads = 2;
  c.head_dim = 2;
  c.ddt_layers = 1;
  c.classes = 4;
  return c;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb + 1e-300);
}

}  // namespace

TEST_CASE("episodes are deterministic per seed") {
  EpisodeConfig ec = tiny_episode_config();
  Episode a = generate_episode(123, ec);
  Episode b = generate_episode(123, ec);
  CHECK(a.class_id == b.class_id);
  CHECK(oracle::max_abs_diff(a.query_image, b.query_image) == 0.0);
  CHECK(oracle::max_abs_diff(a.query_mask, b.query_mask) == 0.0);
  CHECK(oracle::max_abs_diff(a.support_images[0], b.support_images[0]) == 0.0);
  Episode c = generate_episode(124, ec);
  CHECK(oracle::max_abs_diff(a.query_image, c.query_image) > 0.0);
}

TEST_CASE("episode masks are nonempty, binary, and all members share dimensions") {
  EpisodeConfig ec = tiny_episode_config();
  ec.shots = 3;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Episode ep = generate_episode(seed, ec);
    REQUIRE(ep.support_images.size() == 3);
    REQUIRE(ep.support_masks.size() == 3);
    CHECK(ep.query_image.dims() == std::vector<int>{3, 24, 24});
    CHECK(ep.query_mask.dims() == std::vector<int>{24, 24});
    double fg = 0;
    for (std::int64_t i = 0; i < ep.query_mask.numel(); ++i) {
      CHECK((ep.query_mask[i] == 0.0 || ep.query_mask[i] == 1.0));
      fg += ep.query_mask[i];
    }
    CHECK(fg > 0);
    CHECK(ep.class_id >= ec.class_lo);
    CHECK(ep.class_id < ec.class_hi);
  }
}

TEST_CASE("class signature: query object features sit closer to the support object mean") {
  // generator property: mean query-object feature closer (cosine) to the
  // support-object mean than to the background mean in >= 95% of episodes
  EpisodeConfig ec;
  ec.image_size = 32;
  ec.shots = 1;
  ec.class_lo = 0;
  ec.class_hi = 8;
  PyramidConfig pc;
  pc.resolutions = {8, 4, 2};
  pc.channels = {8, 16, 32};
  FixedBackbone backbone(pc, 77);
  int good = 0;
  const int episodes = 500;
  for (int i = 0; i < episodes; ++i) {
    Episode ep = generate_episode(Rng::mix(31337, static_cast<std::uint64_t>(i)), ec);
    std::vector<FeatureMap> fq = backbone.extract_pyramid(ep.query_image);
    std::vector<FeatureMap> fs = backbone.extract_pyramid(ep.support_images[0]);
    Tensor mq = downsample_mask_nearest(ep.query_mask, 8, 8);
    Tensor ms = downsample_mask_nearest(ep.support_masks[0], 8, 8);
    const int c = fq[0].channels();
    std::vector<double> q_obj(static_cast<std::size_t>(c), 0.0);
    std::vector<double> s_obj(static_cast<std::size_t>(c), 0.0);
    std::vector<double> s_bg(static_cast<std::size_t>(c), 0.0);
    int nq = 0, ns = 0, nb = 0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        for (int ch = 0; ch < c; ++ch) {
          if (mq.at(y, x) != 0.0) q_obj[static_cast<std::size_t>(ch)] += fq[0].data.at(ch, y, x);
          if (ms.at(y, x) != 0.0) s_obj[static_cast<std::size_t>(ch)] += fs[0].data.at(ch, y, x);
          else s_bg[static_cast<std::size_t>(ch)] += fs[0].data.at(ch, y, x);
        }
        nq += mq.at(y, x) != 0.0;
        ns += ms.at(y, x) != 0.0;
        nb += ms.at(y, x) == 0.0;
      }
    if (nq == 0 || ns == 0 || nb == 0) continue;
    for (int ch = 0; ch < c; ++ch) {
      q_obj[static_cast<std::size_t>(ch)] /= nq;
      s_obj[static_cast<std::size_t>(ch)] /= ns;
      s_bg[static_cast<std::size_t>(ch)] /= nb;
    }
    if (cosine(q_obj, s_obj) > cosine(q_obj, s_bg)) ++good;
  }
  CHECK(good >= static_cast<int>(0.95 * episodes));
}

TEST_CASE("pyramid shapes follow the config and the backbone is linear") {
  PyramidConfig pc;
  pc.resolutions = {8, 4, 2};
  pc.channels = {4, 6, 8};
  FixedBackbone backbone(pc, 5);
  Rng rng(110);
  Tensor image = oracle::random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  std::vector<FeatureMap> f = backbone.extract_pyramid(image);
  REQUIRE(f.size() == 3);
  for (int l = 0; l < 3; ++l) {
    CHECK(f[static_cast<std::size_t>(l)].level == l);
    CHECK(f[static_cast<std::size_t>(l)].data.dims() ==
          std::vector<int>{pc.channels[static_cast<std::size_t>(l)],
                           pc.resolutions[static_cast<std::size_t>(l)],
                           pc.resolutions[static_cast<std::size_t>(l)]});
  }
  Tensor doubled = image;
  for (std::int64_t i = 0; i < doubled.numel(); ++i) doubled[i] *= 2.0;
  std::vector<FeatureMap> f2 = backbone.extract_pyramid(doubled);
  for (int l = 0; l < 3; ++l) {
    Tensor expect = f[static_cast<std::size_t>(l)].data;
    for (std::int64_t i = 0; i < expect.numel(); ++i) expect[i] *= 2.0;
    CHECK(oracle::max_abs_diff(expect, f2[static_cast<std::size_t>(l)].data) < 1e-12);
  }
}

TEST_CASE("backbone features match the naive conv + pooling oracle") {
  PyramidConfig pc;
  pc.resolutions = {4, 3, 2};
  pc.channels = {3, 2, 2};
  FixedBackbone backbone(pc, 9);
  Rng rng(111);
  Tensor image = oracle::random_tensor({3, 8, 8}, rng, 0.0, 1.0);
  std::vector<FeatureMap> f = backbone.extract_pyramid(image);
  for (int l = 0; l < 3; ++l) {
    Tensor conv = oracle::conv2d_naive(image, backbone.level_weights(l), nullptr);
    const int r = pc.resolutions[static_cast<std::size_t>(l)];
    Tensor pooled({pc.channels[static_cast<std::size_t>(l)], r, r});
    for (int ch = 0; ch < pooled.dim(0); ++ch)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
          const int ya = i * 8 / r, yb = (i + 1) * 8 / r;
          const int xa = j * 8 / r, xb = (j + 1) * 8 / r;
          double acc = 0;
          for (int y = ya; y < yb; ++y)
            for (int x = xa; x < xb; ++x) acc += conv.at(ch, y, x);
          pooled.at(ch, i, j) = acc / ((yb - ya) * (xb - xa));
        }
    CHECK(oracle::max_abs_diff(pooled, f[static_cast<std::size_t>(l)].data) < 1e-12);
  }
}

TEST_CASE("k-shot aggregation: identity, copies, and the elementwise mean") {
  Rng rng(112);
  FeatureMap a, b;
  a.level = b.level = 1;
  a.data = oracle::random_tensor({3, 4, 4}, rng);
  b.data = oracle::random_tensor({3, 4, 4}, rng);
  CHECK(oracle::max_abs_diff(aggregate_kshot({a}).data, a.data) == 0.0);
  CHECK(oracle::max_abs_diff(aggregate_kshot({a, a, a}).data, a.data) < 1e-15);
  FeatureMap mean = aggregate_kshot({a, b});
  for (std::int64_t i = 0; i < a.data.numel(); ++i)
    CHECK(mean.data[i] == doctest::Approx(0.5 * (a.data[i] + b.data[i])).epsilon(1e-15));
  FeatureMap c;
  c.level = 0;
  c.data = oracle::random_tensor({3, 4, 4}, rng);
  CHECK_THROWS_AS(aggregate_kshot({a, c}), DimensionError);
}

TEST_CASE("support feature masking zeroes the background") {
  Rng rng(113);
  FeatureMap f;
  f.level = 0;
  f.data = oracle::random_tensor({2, 2, 2}, rng);
  Tensor ones = Tensor::full({2, 2}, 1.0);
  CHECK(oracle::max_abs_diff(mask_support_features(f, ones).data, f.data) == 0.0);
  Tensor zeros({2, 2});
  FeatureMap masked = mask_support_features(f, zeros);
  for (std::int64_t i = 0; i < masked.data.numel(); ++i) CHECK(masked.data[i] == 0.0);
  Tensor checker({2, 2}, {1.0, 0.0, 0.0, 1.0});
  FeatureMap partial = mask_support_features(f, checker);
  for (int ch = 0; ch < 2; ++ch)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x)
        CHECK(partial.data.at(ch, y, x) == f.data.at(ch, y, x) * checker.at(y, x));
}

TEST_CASE("decode: output shape, zero path, and gradients") {
  Rng rng(114);
  DecoderParams p = DecoderParams::init(4, 3, rng);
  std::vector<Tensor> volumes = {oracle::random_tensor({4, 4, 4, 4}, rng, 0.0, 1.0),
                                 oracle::random_tensor({3, 3, 3, 3}, rng, 0.0, 1.0),
                                 oracle::random_tensor({2, 2, 2, 2}, rng, 0.0, 1.0)};
  Tensor logits = decode(volumes, p, 16, 16);
  CHECK(logits.dims() == std::vector<int>{2, 16, 16});

  SUBCASE("all-zero volumes with a zero-bias decoder give zero logits") {
    for (double& v : p.conv1_b.vec()) v = 0.0;
    for (double& v : p.conv2_b.vec()) v = 0.0;
    std::vector<Tensor> zeros = {Tensor({4, 4, 4, 4}), Tensor({3, 3, 3, 3}),
                                 Tensor({2, 2, 2, 2})};
    Tensor out = decode(zeros, p, 16, 16);
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.0);
  }

  SUBCASE("decoder gradients match finite differences") {
    gradcheck::Report report = gradcheck::check_pipeline(404);
    REQUIRE(report.ops.size() == 1);
    CHECK(report.ops[0].pass);
  }
}

TEST_CASE("metrics: hand-counted 4x4 cases") {
  IouAccumulator acc;
  Tensor pred({4, 4});
  Tensor truth({4, 4});
  pred.at(0, 0) = 1.0;
  pred.at(0, 1) = 1.0;
  truth.at(0, 1) = 1.0;
  truth.at(1, 1) = 1.0;
  acc.add(pred, truth, 3);
  EvalReport r = acc.report(0);
  REQUIRE(r.per_class_iou.size() == 1);
  CHECK(r.per_class_iou[0].first == 3);
  CHECK(r.per_class_iou[0].second == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(r.miou == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  // background: both-zero cells 13, either-zero cells 15
  CHECK(r.fb_iou == doctest::Approx(0.5 * (1.0 / 3.0 + 13.0 / 15.0)).epsilon(1e-15));

  SUBCASE("perfect prediction scores 1.0 everywhere") {
    IouAccumulator perfect;
    perfect.add(truth, truth, 1);
    EvalReport rp = perfect.report(0);
    CHECK(rp.miou == 1.0);
    CHECK(rp.fb_iou == 1.0);
  }
  SUBCASE("fully mismatched prediction scores IoU_F = 0") {
    Tensor p2({4, 4});
    Tensor t2({4, 4});
    for (std::int64_t i = 0; i < 16; ++i) p2[i] = i < 8 ? 1.0 : 0.0;
    for (std::int64_t i = 0; i < 16; ++i) t2[i] = i < 8 ? 0.0 : 1.0;
    IouAccumulator bad;
    bad.add(p2, t2, 2);
    EvalReport rb = bad.report(0);
    CHECK(rb.per_class_iou[0].second == 0.0);
    CHECK(rb.fb_iou == 0.0);
  }
}

TEST_CASE("metrics: bounds and order invariance on random pairs") {
  Rng rng(115);
  std::vector<Tensor> preds, truths;
  std::vector<int> classes;
  for (int i = 0; i < 60; ++i) {
    Tensor p({5, 5}), t({5, 5});
    for (std::int64_t j = 0; j < 25; ++j) {
      p[j] = rng.uniform() < 0.5 ? 1.0 : 0.0;
      t[j] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    preds.push_back(p);
    truths.push_back(t);
    classes.push_back(rng.uniform_int(4));
  }
  IouAccumulator fwd, rev;
  for (std::size_t i = 0; i < preds.size(); ++i)
    fwd.add(preds[i], truths[i], classes[i]);
  for (std::size_t i = preds.size(); i-- > 0;)
    rev.add(preds[i], truths[i], classes[i]);
  EvalReport a = fwd.report(1), b = rev.report(1);
  CHECK(a.miou == b.miou);
  CHECK(a.fb_iou == b.fb_iou);
  REQUIRE(a.per_class_iou.size() == b.per_class_iou.size());
  for (std::size_t i = 0; i < a.per_class_iou.size(); ++i) {
    CHECK(a.per_class_iou[i].first == b.per_class_iou[i].first);
    CHECK(a.per_class_iou[i].second == b.per_class_iou[i].second);
    CHECK(a.per_class_iou[i].second >= 0.0);
    CHECK(a.per_class_iou[i].second <= 1.0);
  }
  CHECK(a.miou >= 0.0);
  CHECK(a.miou <= 1.0);
  CHECK(a.fb_iou >= 0.0);
  CHECK(a.fb_iou <= 1.0);
}

TEST_CASE("train with zero learning rates leaves every parameter unchanged") {
  RunConfig c = tiny_run_config();
  c.gp_learning_rate = 0.0;
  c.agg_learning_rate = 0.0;
  c.epochs = 2;
  ModelParams before = ModelParams::init(c);
  TrainResult r = train(c);
  const auto b = before.trainable_tensors();
  const auto a = r.model.trainable_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(oracle::max_abs_diff(*a[i], *b[i]) == 0.0);
  for (std::size_t l = 0; l < r.model.kernels.size(); ++l)
    CHECK(r.model.kernels[l].flatten() == before.kernels[l].flatten());
}

TEST_CASE("tiny training run: loss drops and reruns are identical") {
  RunConfig c = tiny_run_config();
  c.epochs = 3;
  TrainResult r1 = train(c);
  CHECK(r1.epoch_loss.back() < r1.epoch_loss.front());
  TrainResult r2 = train(c);
  CHECK(trace_to_csv(r1.trace) == trace_to_csv(r2.trace));
  const auto t1 = r1.model.trainable_tensors();
  const auto t2 = r2.model.trainable_tensors();
  for (std::size_t i = 0; i < t1.size(); ++i)
    CHECK(std::memcmp(t1[i]->data(), t2[i]->data(),
                      sizeof(double) * static_cast<std::size_t>(t1[i]->numel())) == 0);
}

TEST_CASE("k-shot consistency: evaluating K identical supports equals one-shot") {
  RunConfig c = tiny_run_config();
  ModelParams model = ModelParams::init(c);
  FixedBackbone backbone(PyramidConfig{c.pyramid_resolutions, c.pyramid_channels},
                         Rng::mix(c.seed, 0xBB));
  EpisodeConfig ec;
  ec.image_size = c.image_size;
  ec.shots = 1;
  ec.class_lo = 0;
  ec.class_hi = 2;
  Episode ep = generate_episode(404, ec);
  Tensor one = predict_episode(model, backbone, ep);
  Episode ep3 = ep;
  for (int k = 0; k < 2; ++k) {
    ep3.support_images.push_back(ep.support_images[0]);
    ep3.support_masks.push_back(ep.support_masks[0]);
  }
  Tensor three = predict_episode(model, backbone, ep3);
  CHECK(oracle::max_abs_diff(one, three) == 0.0);
}

TEST_CASE("evaluate produces a bounded report over held-out classes") {
  RunConfig c = tiny_run_config();
  ModelParams model = ModelParams::init(c);
  std::vector<Episode> eps = make_eval_episodes(c);
  REQUIRE(static_cast<int>(eps.size()) == c.eval_episodes);
  for (const Episode& ep : eps) {
    CHECK(ep.class_id >= c.classes / 2);
    CHECK(ep.class_id < c.classes);
  }
  EvalReport r = evaluate(model, eps, c.seed);
  CHECK(r.episode_count == c.eval_episodes);
  CHECK(r.miou >= 0.0);
  CHECK(r.miou <= 1.0);
  CHECK(r.fb_iou >= 0.0);
  CHECK(r.fb_iou <= 1.0);
}

TEST_CASE("model parameters round-trip through named tensors") {
  RunConfig c = tiny_run_config();
  ModelParams m = ModelParams::init(c);
  m.kernels[0].log_lengthscales[0] = 0.77;
  (*m.trainable_tensors()[0])[0] = -3.25;
  ModelParams back = ModelParams::from_named_tensors(c, m.to_named_tensors());
  CHECK(back.kernels[0].log_lengthscales[0] == 0.77);
  const auto ta = m.trainable_tensors();
  const auto tb = back.trainable_tensors();
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i)
    CHECK(oracle::max_abs_diff(*ta[i], *tb[i]) == 0.0);
}
