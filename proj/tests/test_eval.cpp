#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "chronotrack/eval.hpp"

using namespace chronotrack;

namespace {

GroundTruthTrack make_track(std::vector<std::uint8_t> visible) {
  GroundTruthTrack t;
  for (std::size_t i = 0; i < visible.size(); ++i) t.positions.push_back({10.0 + static_cast<double>(i), 20.0});
  t.visible = std::move(visible);
  return t;
}

std::vector<std::size_t> frames_of(const std::vector<QueryPoint>& qs) {
  std::vector<std::size_t> out;
  for (const auto& q : qs) out.push_back(q.t);
  return out;
}

TrackPrediction shifted(const GroundTruthTrack& gt, double dx, double dy) {
  TrackPrediction p;
  for (const auto& v : gt.positions) p.positions.push_back({v.x + dx, v.y + dy});
  return p;
}

struct Ppm {
  std::size_t w = 0, h = 0;
  std::vector<std::uint8_t> rgb;
};

Ppm read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::string magic;
  std::size_t maxv = 0;
  Ppm p;
  f >> magic >> p.w >> p.h >> maxv;
  f.get();
  p.rgb.resize(p.w * p.h * 3);
  f.read(reinterpret_cast<char*>(p.rgb.data()), static_cast<std::streamsize>(p.rgb.size()));
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(maxv, 255u);
  return p;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("chronotrack_test_eval_" + name);
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST(QuerySampling, Strided) {
  EXPECT_EQ(frames_of(sample_queries_strided(make_track(std::vector<std::uint8_t>(12, 1)))),
            (std::vector<std::size_t>{0, 5, 10}));
  std::vector<std::uint8_t> only5(12, 0);
  only5[5] = 1;
  EXPECT_EQ(frames_of(sample_queries_strided(make_track(only5))), (std::vector<std::size_t>{5}));
  EXPECT_EQ(frames_of(sample_queries_strided(make_track({1, 1, 1, 1}))), (std::vector<std::size_t>{0}));
  EXPECT_TRUE(sample_queries_strided(make_track(std::vector<std::uint8_t>(12, 0))).empty());
  const auto q = sample_queries_strided(make_track(std::vector<std::uint8_t>(12, 1)));
  EXPECT_EQ(q[1].x, 15.0);
  EXPECT_EQ(q[1].y, 20.0);
}

TEST(QuerySampling, First) {
  auto q = sample_queries_first(make_track({1, 1, 0}));
  ASSERT_TRUE(q.has_value());
  EXPECT_EQ(q->t, 0u);
  q = sample_queries_first(make_track({0, 0, 1, 1}));
  ASSERT_TRUE(q.has_value());
  EXPECT_EQ(q->t, 2u);
  EXPECT_EQ(q->x, 12.0);
  EXPECT_FALSE(sample_queries_first(make_track({0, 0, 0})).has_value());
}

TEST(QuerySampling, ModeParsing) {
  EXPECT_EQ(parse_query_mode("strided"), QueryMode::strided);
  EXPECT_EQ(parse_query_mode("first"), QueryMode::first);
  EXPECT_THROW(parse_query_mode("all"), ConfigError);
}

TEST(DeltaAccuracy, ExactPredictions) {
  const auto gt = make_track({1, 0, 1, 1});
  const auto acc = delta_accuracy(shifted(gt, 0, 0), gt);
  for (double a : acc) EXPECT_EQ(a, 1.0);
  EXPECT_EQ(delta_avg(acc), 1.0);
}

TEST(DeltaAccuracy, UniformOffset) {
  const auto gt = make_track(std::vector<std::uint8_t>(6, 1));
  const auto acc = delta_accuracy(shifted(gt, 0.9, 1.2), gt);
  EXPECT_EQ(acc, (std::array<double, 5>{0, 1, 1, 1, 1}));
  EXPECT_EQ(delta_avg(acc), 0.8);
}

TEST(DeltaAccuracy, OccludedFramesAreIgnored) {
  const auto gt = make_track({1, 0, 1});
  auto p = shifted(gt, 0, 0);
  p.positions[1] = {1e6, 1e6};
  for (double a : delta_accuracy(p, gt)) EXPECT_EQ(a, 1.0);
}

TEST(DeltaAccuracy, MatchesCountingOracle) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> err(-20.0, 20.0);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<GroundTruthTrack> gts;
    std::vector<TrackPrediction> preds;
    std::vector<const GroundTruthTrack*> refs;
    std::array<double, 5> hits{};
    double visible = 0;
    for (int q = 0; q < 7; ++q) {
      std::vector<std::uint8_t> vis(9);
      for (auto& v : vis) v = gen() % 4 != 0;
      vis[0] = 1;
      gts.push_back(make_track(vis));
      TrackPrediction p;
      for (std::size_t t = 0; t < 9; ++t) {
        const double dx = err(gen) * (rep % 2 ? 0.2 : 1.0), dy = err(gen) * 0.3;
        p.positions.push_back({gts.back().positions[t].x + dx, gts.back().positions[t].y + dy});
        if (!vis[t]) continue;
        visible += 1;
        const double e = std::sqrt(dx * dx + dy * dy);
        for (int k = 0; k < 5; ++k) hits[k] += e <= std::ldexp(1.0, k) ? 1 : 0;
      }
      preds.push_back(p);
    }
    for (const auto& g : gts) refs.push_back(&g);
    const auto acc = delta_accuracy(preds, refs);
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(acc[k], hits[k] / visible, 1e-9);
    for (int k = 1; k < 5; ++k) EXPECT_LE(acc[k - 1], acc[k]);
    EXPECT_NEAR(delta_avg(acc), (acc[0] + acc[1] + acc[2] + acc[3] + acc[4]) / 5.0, 1e-12);
  }
}

TEST(DeltaAccuracy, Errors) {
  const auto gt = make_track({0, 0, 0});
  EXPECT_THROW(delta_accuracy(shifted(gt, 0, 0), gt), ArgumentError);
  auto p = shifted(make_track({1, 1, 1}), 0, 0);
  p.positions.pop_back();
  EXPECT_THROW(delta_accuracy(p, make_track({1, 1, 1})), DimensionError);
}

TEST(Jitter, AnalyticCases) {
  TrackPrediction p;
  p.positions.assign(6, {3.0, 4.0});
  EXPECT_EQ(*jitter(p, std::vector<std::uint8_t>(6, 1)), 0.0);
  p.positions.clear();
  for (int t = 0; t < 6; ++t) p.positions.push_back({1.5 * t, -0.5 * t});
  EXPECT_NEAR(*jitter(p, std::vector<std::uint8_t>(6, 1)), 0.0, 1e-12);
  p.positions.clear();
  for (int t = 0; t < 6; ++t) p.positions.push_back({t % 2 ? -1.0 : 1.0, 0.0});
  EXPECT_EQ(*jitter(p, std::vector<std::uint8_t>(6, 1)), 4.0);
}

TEST(Jitter, NeedsThreeConsecutiveVisibleFrames) {
  TrackPrediction p;
  for (int t = 0; t < 6; ++t) p.positions.push_back({t % 2 ? -1.0 : 1.0, 0.0});
  EXPECT_FALSE(jitter(p, {1, 1, 0, 1, 1, 0}).has_value());
  EXPECT_EQ(*jitter(p, {0, 0, 0, 1, 1, 1}), 4.0);
}

TEST(Pca, ConstantFeaturesGiveUniformImages) {
  auto f = Tensor<double>::full({2, 3, 4, 5}, 0.7);
  const auto dir = scratch_dir("const");
  const auto paths = pca_dump(f, dir);
  ASSERT_EQ(paths.size(), 2u);
  for (const auto& p : paths) {
    const Ppm img = read_ppm(p);
    EXPECT_EQ(img.w, 4u);
    EXPECT_EQ(img.h, 3u);
    for (std::size_t i = 3; i < img.rgb.size(); ++i) EXPECT_EQ(img.rgb[i], img.rgb[i % 3]);
  }
  std::filesystem::remove_all(dir);
}

TEST(Pca, OrthogonalPatternsAreRecovered) {
  // cells indexed i over 2 frames × 4 × 4; pattern k is the sign of bit k of i
  auto f = Tensor<double>::zeros({2, 4, 4, 4});
  const double amp[3] = {3.0, 2.0, 1.0};
  auto pattern = [](std::size_t i, std::size_t k) { return ((i >> k) & 1u) ? 1.0 : -1.0; };
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t k = 0; k < 3; ++k) f.values()[i * 4 + k] = amp[k] * pattern(i, k) + 0.25;
  const auto dir = scratch_dir("ortho");
  const auto paths = pca_dump(f, dir);
  for (std::size_t k = 0; k < 3; ++k) {
    int agree = 0, disagree = 0;
    for (std::size_t t = 0; t < 2; ++t) {
      const Ppm img = read_ppm(paths[t]);
      for (std::size_t j = 0; j < 16; ++j) {
        const std::uint8_t v = img.rgb[j * 3 + k];
        ASSERT_TRUE(v == 0 || v == 255);
        ((v == 255) == (pattern(t * 16 + j, k) > 0) ? agree : disagree) += 1;
      }
    }
    EXPECT_TRUE(agree == 32 || disagree == 32) << "channel " << k;
  }
  std::filesystem::remove_all(dir);
}

TEST(Pca, VarianceOrderingAndRankFallback) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> n01;
  std::vector<double> rows(200 * 6);
  for (std::size_t i = 0; i < 200; ++i)
    for (std::size_t j = 0; j < 6; ++j) rows[i * 6 + j] = n01(gen) * (1.0 + static_cast<double>(j));
  const auto r = pca3(rows, 200, 6);
  EXPECT_GE(r.variance[0], r.variance[1]);
  EXPECT_GE(r.variance[1], r.variance[2]);
  for (std::size_t k = 0; k < 3; ++k) {
    double var = 0.0;
    for (std::size_t i = 0; i < 200; ++i) var += r.projection[i * 3 + k] * r.projection[i * 3 + k];
    EXPECT_NEAR(var / 200.0, r.variance[k], 1e-6 * r.variance[0]);
  }
  std::vector<double> rank1(50 * 4);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 4; ++j) rank1[i * 4 + j] = static_cast<double>(i) * (j + 1.0);
  const auto r1 = pca3(rank1, 50, 4);
  EXPECT_FALSE(r1.components[0].empty());
  EXPECT_TRUE(r1.components[1].empty());
  EXPECT_TRUE(r1.components[2].empty());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(r1.projection[i * 3 + 1], 0.0);
}

TEST(Pca, WritesOneImagePerFrameDeterministically) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(-1, 1);
  auto f = Tensor<double>::zeros({24, 8, 8, 6});
  for (auto& v : f.values()) v = u(gen);
  const auto d1 = scratch_dir("a"), d2 = scratch_dir("b");
  const auto p1 = pca_dump(f, d1), p2 = pca_dump(f, d2);
  ASSERT_EQ(p1.size(), 24u);
  EXPECT_EQ(p1.front().filename(), "frame_000.ppm");
  for (std::size_t t = 0; t < 24; ++t) EXPECT_EQ(read_ppm(p1[t]).rgb, read_ppm(p2[t]).rgb);
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST(Evaluate, OraclePredictorIsPerfect) {
  SceneSpec s;
  s.frames = 12;
  std::vector<Clip> clips;
  for (std::uint64_t seed : {1, 3}) {
    s.seed = seed;
    clips.push_back(generate_clip(s));
  }
  std::vector<const Clip*> ptrs{&clips[0], &clips[1]};
  for (QueryMode m : {QueryMode::strided, QueryMode::first}) {
    const auto r = evaluate<float>(nullptr, ptrs, m, TrackerConfig{});
    EXPECT_EQ(r.average, 1.0);
    EXPECT_EQ(r.n_clips, 2u);
    EXPECT_GT(r.n_queries, 0u);
  }
}

TEST(Evaluate, ReportsAreReproducibleAndShareQueries) {
  SceneSpec s;
  s.frames = 6;
  s.seed = 5;
  s.tracks = 12;
  const Clip clip = generate_clip(s);
  Model<float> m;
  m.backbone = Backbone<float>::init(BackboneConfig{}, 3);
  const std::vector<const Clip*> ptrs{&clip};
  const auto a = evaluate(&m, ptrs, QueryMode::strided, TrackerConfig{});
  const auto b = evaluate(&m, ptrs, QueryMode::strided, TrackerConfig{});
  const auto o = evaluate<float>(nullptr, ptrs, QueryMode::strided, TrackerConfig{});
  EXPECT_EQ(a.to_text(), b.to_text());
  EXPECT_EQ(a.n_queries, o.n_queries);
  EXPECT_EQ(a.n_visible_points, o.n_visible_points);
  for (std::size_t k = 1; k < 5; ++k) EXPECT_LE(a.accuracy[k - 1], a.accuracy[k]);
  EXPECT_NE(a.to_text().find("supplementary"), std::string::npos);
}

TEST(Evaluate, NoQueriesIsAnError) {
  SceneSpec s;
  s.frames = 4;
  s.tracks = 0;
  const Clip clip = generate_clip(s);
  EXPECT_THROW(evaluate<float>(nullptr, {&clip}, QueryMode::strided, TrackerConfig{}), ArgumentError);
}
