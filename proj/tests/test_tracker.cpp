#include <gtest/gtest.h>

#include "chronotrack/tracker.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace chronotrack;
using testutil::as_doubles;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

using D = double;

Tensor<D> map2d(std::size_t h, std::size_t w, std::vector<double> v) { return Tensor<D>::from({h, w}, std::move(v)); }

std::vector<double> cell(const Tensor<D>& f, std::size_t t, std::size_t y, std::size_t x) {
  const std::size_t h = f.dim(1), w = f.dim(2), c = f.dim(3);
  const std::size_t o = ((t * h + y) * w + x) * c;
  return std::vector<double>(f.values().begin() + static_cast<long>(o), f.values().begin() + static_cast<long>(o + c));
}

}  // namespace

TEST(Coordinates, CellCentres) {
  EXPECT_DOUBLE_EQ(pixel_to_grid(4, 4, 8).x, 0.0);
  EXPECT_DOUBLE_EQ(pixel_to_grid(12, 4, 8).x, 1.0);
  EXPECT_DOUBLE_EQ(grid_to_pixel(0, 0, 8).y, 4.0);
}

TEST(Coordinates, RoundTrip) {
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(0.0, 64.0);
  for (int i = 0; i < 100; ++i) {
    const double x = u(gen), y = u(gen);
    const Vec2 g = pixel_to_grid(x, y, 8);
    const Vec2 p = grid_to_pixel(g.x, g.y, 8);
    EXPECT_NEAR(p.x, x, 1e-9);
    EXPECT_NEAR(p.y, y, 1e-9);
  }
}

TEST(QueryFeature, CellCentreMidpointAndFormula) {
  auto f = random_tensor({2, 4, 5, 3}, 2);
  EXPECT_EQ(as_doubles(extract_query_feature(f, {2 * 8 + 4, 1 * 8 + 4, 1}, 8)), cell(f, 1, 1, 2));
  auto mid = as_doubles(extract_query_feature(f, {2 * 8 + 8, 1 * 8 + 4, 0}, 8));
  auto a = cell(f, 0, 1, 2), b = cell(f, 0, 1, 3);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(mid[c], 0.5 * (a[c] + b[c]), 1e-12);
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> ux(4.0, 36.0 - 1e-6), uy(4.0, 28.0 - 1e-6);
  std::vector<double> frame1(f.values().begin() + 60, f.values().end());
  for (int i = 0; i < 50; ++i) {
    const double x = ux(gen), y = uy(gen);
    auto got = as_doubles(extract_query_feature(f, {x, y, 1}, 8));
    EXPECT_LT(max_abs_diff(got, oracle::bilinear(frame1, 5, 3, x / 8 - 0.5, y / 8 - 0.5)), 1e-6);
  }
}

TEST(QueryFeature, OutOfBoundsIsArgumentError) {
  auto f = random_tensor({2, 4, 4, 3}, 4);
  EXPECT_THROW(extract_query_feature(f, {32.0, 3.0, 0}, 8), ArgumentError);
  EXPECT_THROW(extract_query_feature(f, {-0.1, 3.0, 0}, 8), ArgumentError);
  EXPECT_THROW(extract_query_feature(f, {3.0, 3.0, 2}, 8), ArgumentError);
  EXPECT_THROW(extract_query_feature(f, {std::nan(""), 3.0, 0}, 8), ArgumentError);
}

TEST(Correlation, AnalyticCases) {
  auto fq = Tensor<D>::from({3}, {1.0, -2.0, 0.5});
  auto same = Tensor<D>::zeros({2, 2, 2, 3});
  auto neg = Tensor<D>::zeros({2, 2, 2, 3});
  auto orth = Tensor<D>::zeros({2, 2, 2, 3});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      same.values()[i * 3 + c] = fq[c] * static_cast<double>(i + 1);
      neg.values()[i * 3 + c] = -fq[c];
    }
  for (std::size_t i = 0; i < 8; ++i) {
    orth.values()[i * 3 + 0] = 2.0;
    orth.values()[i * 3 + 1] = 1.0;
  }
  const auto cs = correlation(fq, same), cn = correlation(fq, neg), co = correlation(fq, orth);
  for (double v : cs.values()) EXPECT_NEAR(v, 1.0, 1e-12);
  for (double v : cn.values()) EXPECT_NEAR(v, -1.0, 1e-12);
  for (double v : co.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Correlation, ZeroNorms) {
  EXPECT_THROW(correlation(Tensor<D>::zeros({3}), random_tensor({1, 2, 2, 3}, 5)), ArgumentError);
  auto f = random_tensor({1, 2, 2, 3}, 6);
  for (std::size_t c = 0; c < 3; ++c) f.values()[3 + c] = 0.0;
  auto corr = correlation(random_tensor({3}, 7), f);
  EXPECT_EQ(corr[1], 0.0);
}

TEST(Correlation, BoundedAndScaleInvariant) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto f = random_tensor<float>({3, 4, 4, 8}, 10 + s, -3, 3);
    auto fq = random_tensor<float>({8}, 20 + s, -3, 3);
    auto c1 = correlation(fq, f);
    auto c2 = correlation(affine(fq, 7.5f, 0.0f), f);
    for (std::size_t i = 0; i < c1.size(); ++i) {
      EXPECT_LE(std::abs(c1[i]), 1.0f + 1e-5f);
      EXPECT_NEAR(c1[i], c2[i], 1e-6);
    }
  }
}

TEST(Correlation, GradientMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto fq = random_tensor({2, 4}, 30 + s);
    auto f = random_tensor({2, 3, 3, 4}, 40 + s);
    auto r = random_tensor({2, 2, 3, 3}, 50 + s);
    EXPECT_LT(grad_check<D>([&](const Tensor<D>& v) { return sum(mul(cosine_correlation(v, f), r)); }, fq.detach(), 1e-4), 1e-4);
    EXPECT_LT(grad_check<D>([&](const Tensor<D>& v) { return sum(mul(cosine_correlation(fq, v), r)); }, f.detach(), 1e-4), 1e-4);
  }
}

TEST(SoftArgmax, OneHotPeak) {
  std::vector<double> v(64, -1.0);
  v[2 * 8 + 3] = 1.0;
  auto p = soft_argmax(map2d(8, 8, v), 20.0, 5.0);
  EXPECT_NEAR(p[0], 3.0, 1e-3);
  EXPECT_NEAR(p[1], 2.0, 1e-3);
}

TEST(SoftArgmax, ZeroRadiusTieBreaksRowMajor) {
  auto p = soft_argmax(Tensor<D>::full({8, 8}, 0.3), 20.0, 0.0);
  EXPECT_EQ(p[0], 0.0);
  EXPECT_EQ(p[1], 0.0);
  std::vector<double> v(64, 0.0);
  v[5 * 8 + 6] = 0.9;
  v[6 * 8 + 1] = 0.9;
  auto q = soft_argmax(map2d(8, 8, v), 1.0, 0.0);
  EXPECT_EQ(q[0], 6.0);
  EXPECT_EQ(q[1], 5.0);
}

TEST(SoftArgmax, MatchesDirectEnumeration) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto m = random_tensor({8, 8}, 60 + s);
    const double M = 0.5 * static_cast<double>(s % 8);
    auto p = soft_argmax(m, 20.0, M);
    auto ref = oracle::soft_argmax(as_doubles(m), 8, 8, 20.0, M);
    EXPECT_NEAR(p[0], ref.first, 1e-6);
    EXPECT_NEAR(p[1], ref.second, 1e-6);
  }
}

TEST(SoftArgmax, ConvergesToArgmaxAsTemperatureGrows) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto m = random_tensor({8, 8}, 80 + s);
    std::size_t best = 0;
    for (std::size_t i = 1; i < 64; ++i)
      if (m[i] > m[best]) best = i;
    m.values()[best] += 0.1;
    double prev = 1e9;
    for (double tau : {1.0, 20.0, 1000.0}) {
      auto p = soft_argmax(m, tau, 5.0);
      const double d = std::hypot(p[0] - static_cast<double>(best % 8), p[1] - static_cast<double>(best / 8));
      EXPECT_LT(d, prev) << "tau " << tau;
      prev = d;
    }
    EXPECT_LT(prev, 1e-3);
  }
}

TEST(SoftArgmax, StaysInKeptRegion) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto m = random_tensor({6, 7}, 90 + s);
    std::size_t best = 0;
    for (std::size_t i = 1; i < 42; ++i)
      if (m[i] > m[best]) best = i;
    const double M = 1.5;
    auto p = soft_argmax(m, 3.0, M);
    EXPECT_LE(std::abs(p[0] - static_cast<double>(best % 7)), M);
    EXPECT_LE(std::abs(p[1] - static_cast<double>(best / 7)), M);
  }
}

TEST(SoftArgmax, NaNHandling) {
  std::vector<double> v(16, std::nan(""));
  EXPECT_THROW(soft_argmax(map2d(4, 4, v), 20.0, 5.0), ArgumentError);
  v[6] = 0.1;
  auto p = soft_argmax(map2d(4, 4, v), 20.0, 5.0);
  EXPECT_EQ(p[0], 2.0);
  EXPECT_EQ(p[1], 1.0);
  EXPECT_THROW(soft_argmax(map2d(4, 4, std::vector<double>(16, 0.0)), 0.0, 5.0), ArgumentError);
}

TEST(SoftArgmax, GradientMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto m = random_tensor({3, 5, 6}, 100 + s);
    auto r = random_tensor({3, 2}, 110 + s);
    auto f = [&](const Tensor<D>& v) { return sum(mul(soft_argmax(v, 20.0, 2.5), r)); };
    EXPECT_LT(grad_check<D>(f, m.detach(), 1e-4), 1e-4);
  }
}

TEST(TrackingHead, GradientMatchesFiniteDifferences) {
  auto f = random_tensor({3, 4, 4, 5}, 120);
  std::vector<QueryPoint> qs{{9.0, 13.0, 0}, {20.5, 7.25, 2}};
  auto r = random_tensor({2, 3, 2}, 121);
  TrackerConfig cfg;
  cfg.tau = 5.0;
  cfg.mask_radius = 2.0;
  auto g = [&](const Tensor<D>& v) { return sum(mul(predict_positions(v, qs, 8, cfg), r)); };
  EXPECT_LT(grad_check<D>(g, f.detach(), 1e-4), 1e-4);
}

TEST(Track, EmptyQueriesGiveEmptyResult) {
  Model<float> m;
  m.backbone = Backbone<float>::init(BackboneConfig{}, 1);
  VideoClip clip;
  clip.frames = 2;
  clip.height = clip.width = 64;
  clip.pixels.assign(2 * 64 * 64 * 3, 0);
  EXPECT_TRUE(track(m, clip, {}, TrackerConfig{}).empty());
}

TEST(Track, StaticClipGivesConstantTracks) {
  Model<float> m;
  m.backbone = Backbone<float>::init(BackboneConfig{}, 2);
  SceneSpec spec;
  spec.frames = 2;
  spec.seed = 3;
  Clip c = generate_clip(spec);
  VideoClip v;
  v.frames = 6;
  v.height = v.width = 64;
  for (std::size_t t = 0; t < 6; ++t) v.pixels.insert(v.pixels.end(), c.video.pixels.begin(), c.video.pixels.begin() + 64 * 64 * 3);
  std::vector<QueryPoint> qs{{10, 10, 0}, {40.5, 22.25, 3}, {63.9, 0, 5}};
  for (const auto& tr : track(m, v, qs, TrackerConfig{})) {
    for (const auto& p : tr.positions) {
      EXPECT_LT(std::abs(p.x - tr.positions[0].x), 0.5);
      EXPECT_LT(std::abs(p.y - tr.positions[0].y), 0.5);
    }
  }
}

TEST(Track, QueriesAreIndependent) {
  Model<float> m;
  m.backbone = Backbone<float>::init(BackboneConfig{}, 4);
  SceneSpec spec;
  spec.frames = 5;
  spec.seed = 5;
  Clip c = generate_clip(spec);
  std::vector<QueryPoint> qs{{10, 10, 0}, {40.5, 22.25, 3}, {33, 50, 4}};
  auto a = track(m, c.video, qs, TrackerConfig{});
  std::vector<QueryPoint> rev(qs.rbegin(), qs.rend());
  auto b = track(m, c.video, rev, TrackerConfig{});
  auto single = track(m, c.video, {qs[1]}, TrackerConfig{});
  for (std::size_t i = 0; i < 3; ++i) {
    ASSERT_EQ(a[i].positions.size(), 5u);
    for (std::size_t t = 0; t < 5; ++t) {
      EXPECT_EQ(a[i].positions[t].x, b[2 - i].positions[t].x);
      EXPECT_EQ(a[i].positions[t].y, b[2 - i].positions[t].y);
    }
  }
  for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(a[1].positions[t].x, single[0].positions[t].x);
  EXPECT_THROW(track(m, c.video, {{64.0, 3.0, 0}}, TrackerConfig{}), ArgumentError);
}
