#include <gtest/gtest.h>

#include <numeric>

#include "chronotrack/training.hpp"
#include "test_util.hpp"

using namespace chronotrack;
using testutil::random_tensor;

namespace {

using D = double;

BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.image_h = 32;
  c.image_w = 32;
  c.patch = 8;
  c.dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  return c;
}

std::vector<Clip> tiny_clips(std::size_t n, std::uint32_t frames = 6) {
  std::vector<Clip> out;
  for (std::size_t i = 0; i < n; ++i) {
    SceneSpec s;
    s.seed = 2 * i;
    s.frames = frames;
    s.height = s.width = 32;
    s.sprites = 2;
    s.tracks = 16;
    s.size_min = 8.0f;
    s.size_max = 12.0f;
    out.push_back(generate_clip(s));
  }
  return out;
}

std::vector<const Clip*> ptrs(const std::vector<Clip>& v) {
  std::vector<const Clip*> p;
  for (const auto& c : v) p.push_back(&c);
  return p;
}

TrainConfig tiny_train(std::size_t iters) {
  TrainConfig c;
  c.iters = iters;
  c.warmup_iters = iters / 10;
  c.lr = 3e-3;
  c.queries_per_batch = 16;
  return c;
}

double mean(const std::vector<LossRecord>& log, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += log[i].loss;
  return s / static_cast<double>(to - from);
}

}  // namespace

TEST(Huber, AnalyticCases) {
  EXPECT_EQ(huber({1.0, 1.0}, {1.0, 1.0}, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(huber({0.5, 0.0}, {0.0, 0.0}, 1.0), 0.125);
  EXPECT_DOUBLE_EQ(huber({0.0, 3.0}, {0.0, 0.0}, 1.0), 2.5);
  EXPECT_DOUBLE_EQ(huber({3.0, 4.0}, {0.0, 0.0}, 2.0), 8.0);
}

TEST(Huber, ContinuouslyDifferentiableAtDelta) {
  for (double delta : {0.5, 1.0, 4.0}) {
    const double h = 1e-7;
    const double below = huber({delta - h, 0.0}, {0.0, 0.0}, delta);
    const double above = huber({delta + h, 0.0}, {0.0, 0.0}, delta);
    EXPECT_NEAR(below, 0.5 * delta * delta, 1e-6);
    EXPECT_NEAR(above, 0.5 * delta * delta, 1e-6);
    const double slope_below = (huber({delta, 0.0}, {0.0, 0.0}, delta) - huber({delta - 1e-5, 0.0}, {0.0, 0.0}, delta)) / 1e-5;
    const double slope_above = (huber({delta + 1e-5, 0.0}, {0.0, 0.0}, delta) - huber({delta, 0.0}, {0.0, 0.0}, delta)) / 1e-5;
    EXPECT_NEAR(slope_below, delta, 1e-4);
    EXPECT_NEAR(slope_above, delta, 1e-4);
  }
}

TEST(Huber, Errors) {
  EXPECT_THROW(huber({std::nan(""), 0.0}, {0.0, 0.0}, 1.0), NumericError);
  EXPECT_THROW(huber({0.0, 0.0}, {INFINITY, 0.0}, 1.0), NumericError);
  EXPECT_THROW(huber({0.0, 0.0}, {0.0, 0.0}, 0.0), ArgumentError);
}

TEST(MaskedLoss, IgnoresOccludedPoints) {
  auto pred = Tensor<D>::from({3, 2}, {0.0, 0.0, 100.0, 100.0, 0.0, 3.0});
  std::vector<D> gt(6, 0.0);
  auto loss = masked_huber_loss(pred, gt, {1, 0, 1}, 1.0);
  EXPECT_DOUBLE_EQ(loss.item(), (0.0 + 2.5) / 2.0);
  EXPECT_EQ(masked_huber_loss(pred, gt, {0, 0, 0}, 1.0).item(), 0.0);
  EXPECT_THROW(masked_huber_loss(pred, gt, {1, 1}, 1.0), DimensionError);
}

TEST(MaskedLoss, MatchesLoopOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto pred = random_tensor({4, 6, 2}, s, -5, 5);
    auto g = random_tensor({4, 6, 2}, 100 + s, -5, 5);
    std::vector<D> gt(g.values().begin(), g.values().end());
    std::mt19937_64 gen(s);
    std::vector<std::uint8_t> vis(24);
    for (auto& v : vis) v = gen() % 3 != 0;
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < 24; ++i) {
      if (!vis[i]) continue;
      total += huber({pred[2 * i], pred[2 * i + 1]}, {gt[2 * i], gt[2 * i + 1]}, 1.5);
      ++n;
    }
    EXPECT_NEAR(masked_huber_loss(pred, gt, vis, 1.5).item(), total / static_cast<double>(n), 1e-12);
  }
}

TEST(MaskedLoss, OccludedFramesGetExactlyZeroGradient) {
  auto pred = random_tensor({2, 5, 2}, 7, -4, 4).set_requires_grad(true);
  auto g = random_tensor({2, 5, 2}, 8, -4, 4);
  std::vector<D> gt(g.values().begin(), g.values().end());
  std::vector<std::uint8_t> vis{1, 0, 1, 1, 0, 0, 1, 0, 1, 1};
  Graph<D> graph;
  {
    GraphScope<D> scope(graph);
    graph.backward(masked_huber_loss(pred, gt, vis, 1.0));
  }
  for (std::size_t i = 0; i < vis.size(); ++i) {
    if (vis[i]) {
      EXPECT_NE(pred.grad()[2 * i] + pred.grad()[2 * i + 1], 0.0);
    } else {
      EXPECT_EQ(pred.grad()[2 * i], 0.0);
      EXPECT_EQ(pred.grad()[2 * i + 1], 0.0);
    }
  }
}

TEST(MaskedLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto pred = random_tensor({3, 4, 2}, 20 + s, -3, 3);
    auto g = random_tensor({3, 4, 2}, 30 + s, -3, 3);
    std::vector<D> gt(g.values().begin(), g.values().end());
    std::vector<std::uint8_t> vis(12, 1);
    vis[3] = vis[7] = 0;
    auto f = [&](const Tensor<D>& v) { return masked_huber_loss(v, gt, vis, 1.0); };
    EXPECT_LT(grad_check<D>(f, pred, 1e-6), 1e-4);
  }
}

TEST(MaskedLoss, TrackOverload) {
  GroundTruthTrack tr;
  tr.positions = {{0, 0}, {1, 1}, {2, 2}};
  tr.visible = {1, 1, 0};
  auto pred = Tensor<D>::from({3, 2}, {0.5, 0.0, 1.0, 1.0, 50.0, 50.0});
  EXPECT_DOUBLE_EQ(masked_track_loss(pred, tr, 1.0).item(), 0.0625);
}

TEST(CosineLr, Junctions) {
  const double base = 1e-3;
  EXPECT_EQ(cosine_lr(0, 100, 2000, base), 0.0);
  EXPECT_DOUBLE_EQ(cosine_lr(50, 100, 2000, base), base / 2);
  EXPECT_DOUBLE_EQ(cosine_lr(100, 100, 2000, base), base);
  EXPECT_NEAR(cosine_lr(1050, 100, 2000, base), base / 2, 1e-9);
  EXPECT_LT(cosine_lr(1999, 100, 2000, base), 1e-3 * base);
  for (std::size_t i = 101; i < 2000; ++i) EXPECT_LE(cosine_lr(i, 100, 2000, base), cosine_lr(i - 1, 100, 2000, base));
}

TEST(AdamW, ZeroGradientWithoutDecayIsNoOp) {
  ParamList<D> ps{{"w", random_tensor({5}, 1).set_requires_grad(true)}};
  const auto before = ps[0].tensor.values();
  OptimizerState<D> st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 3; ++i) adamw_step(ps, st, 0.1, cfg);
  EXPECT_EQ(ps[0].tensor.values(), before);
}

TEST(AdamW, HandComputedSteps) {
  auto w = Tensor<D>::from({1}, {1.0}).set_requires_grad(true);
  ParamList<D> ps{{"w", w}};
  OptimizerState<D> st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.01;
  w.grad_buffer()[0] = 0.5;
  adamw_step(ps, st, 0.1, cfg);
  // m̂ = 0.5, v̂ = 0.25
  EXPECT_NEAR(w[0], 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01), 1e-12);
  const double w1 = w[0];
  w.grad_buffer()[0] = -1.0;
  adamw_step(ps, st, 0.1, cfg);
  const double m = 0.9 * 0.05 + 0.1 * -1.0, v = 0.999 * 0.00025 + 0.001 * 1.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(w[0], w1 - 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * w1), 1e-12);
}

TEST(AdamW, DecayOnlyShrinksAdditively) {
  auto w = Tensor<D>::from({3}, {2.0, -1.0, 0.5}).set_requires_grad(true);
  ParamList<D> ps{{"w", w}};
  OptimizerState<D> st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(ps, st, 0.5, cfg);
  EXPECT_DOUBLE_EQ(w[0], 2.0 - 0.5 * 0.1 * 2.0);
  EXPECT_DOUBLE_EQ(w[1], -1.0 + 0.5 * 0.1 * 1.0);
  EXPECT_DOUBLE_EQ(w[2], 0.5 - 0.5 * 0.1 * 0.5);
}

TEST(AdamW, SkipsFrozenParameters) {
  auto frozen = Tensor<D>::from({2}, {1.0, 2.0});
  auto live = Tensor<D>::from({2}, {1.0, 2.0}).set_requires_grad(true);
  live.grad_buffer()[0] = 1.0;
  ParamList<D> ps{{"frozen", frozen}, {"live", live}};
  OptimizerState<D> st;
  adamw_step(ps, st, 0.1, AdamWConfig{});
  EXPECT_EQ(frozen[0], 1.0);
  EXPECT_EQ(frozen[1], 2.0);
  EXPECT_LT(live[0], 1.0);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.warmup_iters = c.iters;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.huber_delta = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.iters = 0;
  c.warmup_iters = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(SampleQueries, QueriesSitOnVisibleGroundTruth) {
  auto clips = tiny_clips(1);
  Rng rng(3);
  const std::vector<std::size_t> frames{1, 4};
  auto s = sample_training_queries(clips[0], frames, 40, rng);
  ASSERT_EQ(s.queries.size(), 40u);
  ASSERT_EQ(s.gt.size(), 40u * 2 * 2);
  for (std::size_t q = 0; q < 40; ++q) {
    const std::size_t j = s.queries[q].t;
    ASSERT_LT(j, 2u);
    EXPECT_TRUE(s.visible[q * 2 + j]);
    EXPECT_EQ(static_cast<float>(s.queries[q].x), s.gt[(q * 2 + j) * 2]);
    EXPECT_EQ(static_cast<float>(s.queries[q].y), s.gt[(q * 2 + j) * 2 + 1]);
  }
}

TEST(StageA, LossDecreases) {
  auto clips = tiny_clips(8);
  auto r = train_stage_a<float>(ptrs(clips), tiny_backbone(), tiny_train(150));
  ASSERT_EQ(r.log.size(), 150u);
  EXPECT_LT(mean(r.log, 120, 150), 0.8 * mean(r.log, 0, 30));
}

TEST(StageA, DeterministicUnderSeed) {
  auto clips = tiny_clips(3);
  auto a = train_stage_a<float>(ptrs(clips), tiny_backbone(), tiny_train(5));
  auto b = train_stage_a<float>(ptrs(clips), tiny_backbone(), tiny_train(5));
  EXPECT_EQ(param_hash(a.model.backbone.parameters()), param_hash(b.model.backbone.parameters()));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  auto cfg = tiny_train(5);
  cfg.seed = 1;
  auto c = train_stage_a<float>(ptrs(clips), tiny_backbone(), cfg);
  EXPECT_NE(param_hash(a.model.backbone.parameters()), param_hash(c.model.backbone.parameters()));
}

TEST(StageA, Errors) {
  EXPECT_THROW(train_stage_a<float>(std::vector<const Clip*>{}, tiny_backbone(), tiny_train(5)), ArgumentError);
  auto clips = tiny_clips(1);
  auto cfg = tiny_train(5);
  cfg.lr = -1.0;
  EXPECT_THROW(train_stage_a<float>(ptrs(clips), tiny_backbone(), cfg), ConfigError);
}

TEST(StageA, LogsOneLinePerIteration) {
  auto clips = tiny_clips(1);
  auto cfg = tiny_train(1);
  std::size_t calls = 0;
  auto r = train_stage_a<float>(ptrs(clips), tiny_backbone(), cfg, [&](const LossRecord&) { ++calls; });
  EXPECT_EQ(r.log.size(), 1u);
  EXPECT_EQ(calls, 1u);
  EXPECT_TRUE(std::isfinite(r.log[0].loss));
}

TEST(StageB, OnlyAdaptersChange) {
  auto clips = tiny_clips(3);
  auto a = train_stage_a<float>(ptrs(clips), tiny_backbone(), tiny_train(5));
  const auto frozen = param_hash(a.model.backbone.parameters());
  AdapterConfig ac;
  ac.window = 3;
  ac.c_out = 4;
  auto b = train_stage_b<float>(a.model.backbone, ptrs(clips), ac, tiny_train(5));
  EXPECT_EQ(param_hash(b.model.backbone.parameters()), frozen);
  ASSERT_TRUE(b.model.adapters.has_value());
  for (const auto& p : b.model.backbone.parameters()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
  bool moved = false;
  for (const auto& p : b.model.adapters->parameters()) {
    if (p.name.find("up.weight") == std::string::npos) continue;
    for (float v : p.tensor.values()) moved = moved || v != 0.0f;
  }
  EXPECT_TRUE(moved);
}

TEST(StageB, FreshAdaptersReproduceBaseline) {
  auto clips = tiny_clips(1);
  auto a = train_stage_a<float>(ptrs(clips), tiny_backbone(), tiny_train(3));
  AdapterConfig ac;
  ac.window = 3;
  ac.c_out = 4;
  ac.c_in = a.model.backbone.config().dim;
  auto bc = a.model.backbone.config();
  Model<float> adapted{a.model.backbone, AdapterSet<float>::init(ac, bc.depth, bc.grid_h(), bc.grid_w(), 1)};
  auto x = frames_tensor<float>(clips[0].video, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(adapted.features(x).values(), a.model.features(x).values());
}

TEST(StageB, Deterministic) {
  auto clips = tiny_clips(2);
  auto a = train_stage_a<float>(ptrs(clips), tiny_backbone(), tiny_train(3));
  AdapterConfig ac;
  ac.window = 3;
  ac.c_out = 4;
  auto b1 = train_stage_b<float>(a.model.backbone, ptrs(clips), ac, tiny_train(3));
  auto b2 = train_stage_b<float>(a.model.backbone, ptrs(clips), ac, tiny_train(3));
  EXPECT_EQ(param_hash(b1.model.adapters->parameters()), param_hash(b2.model.adapters->parameters()));
}

TEST(StageB, WindowLongerThanClipIsConfigError) {
  auto clips = tiny_clips(1, 4);
  auto a = train_stage_a<float>(ptrs(clips), tiny_backbone(), tiny_train(1));
  AdapterConfig ac;
  ac.window = 5;
  EXPECT_THROW(train_stage_b<float>(a.model.backbone, ptrs(clips), ac, tiny_train(1)), ConfigError);
}

TEST(ClipSource, FreshClipsKeepSeedParity) {
  SceneSpec s;
  s.frames = 4;
  s.height = s.width = 32;
  s.size_min = 8.0f;
  s.size_max = 12.0f;
  Rng rng(0);
  auto src = fresh_clips(s, 10);
  for (std::uint64_t k = 0; k < 4; ++k) {
    const Clip& c = src(rng);
    EXPECT_EQ(c.spec.seed, 10 + 2 * k);
    s.seed = 10 + 2 * k;
    EXPECT_EQ(c, generate_clip(s));
  }
}

TEST(ClipSource, UniformSamplingRejectsEmptyDataset) {
  EXPECT_THROW(sample_uniformly({}), ArgumentError);
}

TEST(StageB, TrainsFromAFreshClipStream) {
  auto clips = tiny_clips(1);
  auto a = train_stage_a<float>(ptrs(clips), tiny_backbone(), tiny_train(3));
  const auto frozen = param_hash(a.model.backbone.parameters());
  AdapterConfig ac;
  ac.window = 3;
  ac.c_out = 4;
  SceneSpec s = clips[0].spec;
  auto b1 = train_stage_b<float>(a.model.backbone, fresh_clips(s, 100), ac, tiny_train(4));
  auto b2 = train_stage_b<float>(a.model.backbone, fresh_clips(s, 100), ac, tiny_train(4));
  EXPECT_EQ(param_hash(b1.model.adapters->parameters()), param_hash(b2.model.adapters->parameters()));
  EXPECT_EQ(param_hash(b1.model.backbone.parameters()), frozen);
  ac.window = 7;
  EXPECT_THROW(train_stage_b<float>(a.model.backbone, fresh_clips(s, 100), ac, tiny_train(1)), ConfigError);
}
