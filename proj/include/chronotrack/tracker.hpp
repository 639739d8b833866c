#pragma once

// Refiner-free point prediction: sample the query feature, correlate it with
// every cell of every frame by cosine similarity, then take a masked,
// temperature-scaled soft-argmax per frame. No learnable parameters.

#include <cmath>
#include <limits>
#include <vector>

#include "chronotrack/model.hpp"
#include "chronotrack/ops.hpp"
#include "chronotrack/synthdata.hpp"

namespace chronotrack {

struct QueryPoint {
  double x = 0.0;  // pixels
  double y = 0.0;
  std::size_t t = 0;
  bool operator==(const QueryPoint&) const = default;
};

struct TrackPrediction {
  QueryPoint query;
  std::vector<Vec2> positions;  // pixels, one per frame
};

struct TrackerConfig {
  double tau = 20.0;          // softmax temperature
  double mask_radius = 5.0;   // M, in feature-grid cells
};

// Cell g covers pixels [g·P, (g+1)·P); its centre is grid coordinate g.
inline Vec2 pixel_to_grid(double x, double y, double patch) { return {x / patch - 0.5, y / patch - 0.5}; }
inline Vec2 grid_to_pixel(double gx, double gy, double patch) { return {(gx + 0.5) * patch, (gy + 0.5) * patch}; }

// fq [Q×C], features [T×H×W×C] -> [Q×T×H×W] cosine similarities. Cells with
// zero norm score 0.
template <typename T>
Tensor<T> cosine_correlation(const Tensor<T>& fq, const Tensor<T>& features) {
  detail::require(fq.rank() == 2 && features.rank() == 4 && fq.dim(1) == features.dim(3),
                  "cosine_correlation: expected fq [Q×C] and features [T×H×W×C], got " +
                      shape_str(fq.shape()) + ", " + shape_str(features.shape()));
  const std::size_t nq = fq.dim(0), c = fq.dim(1);
  const std::size_t cells = features.size() / c;
  std::vector<T> qn(nq), fnorm(cells);
  std::vector<T> uq(nq * c), vf(cells * c, T(0));
  for (std::size_t i = 0; i < nq; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += fq[i * c + j] * fq[i * c + j];
    qn[i] = std::sqrt(s);
    if (!(qn[i] > T(0))) throw ArgumentError("correlation: query feature has zero norm");
    for (std::size_t j = 0; j < c; ++j) uq[i * c + j] = fq[i * c + j] / qn[i];
  }
  for (std::size_t m = 0; m < cells; ++m) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += features[m * c + j] * features[m * c + j];
    fnorm[m] = std::sqrt(s);
    if (fnorm[m] > T(0)) {
      for (std::size_t j = 0; j < c; ++j) vf[m * c + j] = features[m * c + j] / fnorm[m];
    }
  }
  Shape os{nq, features.dim(0), features.dim(1), features.dim(2)};
  Tensor<T> out = Tensor<T>::zeros(os);
  kernels::gemm_nt(nq, cells, c, uq.data(), vf.data(), out.data().data(), false);
  detail::record<T>("cosine_correlation", out, {fq, features},
                    [fq, features, out, nq, c, cells, qn = std::move(qn), fnorm = std::move(fnorm),
                     uq = std::move(uq), vf = std::move(vf)]() mutable {
                      const T* g = out.grad().data();
                      const T* corr = out.data().data();
                      if (fq.requires_grad()) {
                        std::vector<T> gv(nq * c);
                        kernels::gemm_nn(nq, c, cells, g, vf.data(), gv.data(), false);
                        auto& gq = fq.grad_buffer();
                        for (std::size_t i = 0; i < nq; ++i) {
                          T gc = 0;
                          for (std::size_t m = 0; m < cells; ++m) gc += g[i * cells + m] * corr[i * cells + m];
                          for (std::size_t j = 0; j < c; ++j)
                            gq[i * c + j] += (gv[i * c + j] - gc * uq[i * c + j]) / qn[i];
                        }
                      }
                      if (features.requires_grad()) {
                        std::vector<T> gu(cells * c);
                        kernels::gemm_tn(cells, c, nq, g, uq.data(), gu.data(), false);
                        auto& gf = features.grad_buffer();
                        for (std::size_t m = 0; m < cells; ++m) {
                          if (!(fnorm[m] > T(0))) continue;
                          T gc = 0;
                          for (std::size_t i = 0; i < nq; ++i) gc += g[i * cells + m] * corr[i * cells + m];
                          for (std::size_t j = 0; j < c; ++j)
                            gf[m * c + j] += (gu[m * c + j] - gc * vf[m * c + j]) / fnorm[m];
                        }
                      }
                    });
  return out;
}

// corr [...×H×W] -> [...×2] as (gx, gy). Per map: hard argmax (first in
// row-major order on ties, NaNs skipped), keep cells within Euclidean
// distance mask_radius of it, softmax(tau · corr) over kept cells, and
// return the weighted mean cell coordinate.
template <typename T>
Tensor<T> soft_argmax(const Tensor<T>& corr, T tau, T mask_radius) {
  detail::require(corr.rank() >= 2, "soft_argmax: expected [...×H×W], got " + shape_str(corr.shape()));
  if (!(tau > T(0))) throw ArgumentError("soft_argmax: temperature must be positive");
  if (!(mask_radius >= T(0))) throw ArgumentError("soft_argmax: mask radius must be >= 0");
  const std::size_t h = corr.dim(corr.rank() - 2), w = corr.dim(corr.rank() - 1);
  const std::size_t cells = h * w, maps = corr.size() / cells;
  Shape os(corr.shape().begin(), corr.shape().end() - 2);
  os.push_back(2);
  Tensor<T> out = Tensor<T>::zeros(os);
  std::vector<T> weights(corr.size(), T(0));  // zero outside the kept set
  const T r2 = mask_radius * mask_radius;
  for (std::size_t m = 0; m < maps; ++m) {
    const T* c = corr.data().data() + m * cells;
    std::size_t best = cells;
    for (std::size_t i = 0; i < cells; ++i) {
      if (std::isnan(c[i])) continue;
      if (best == cells || c[i] > c[best]) best = i;
    }
    if (best == cells) throw ArgumentError("soft_argmax: correlation map is entirely NaN");
    const auto by = static_cast<T>(best / w), bx = static_cast<T>(best % w);
    T* wt = weights.data() + m * cells;
    T mx = c[best];
    T z = 0;
    for (std::size_t i = 0; i < cells; ++i) {
      const T dy = static_cast<T>(i / w) - by, dx = static_cast<T>(i % w) - bx;
      if (std::isnan(c[i]) || dx * dx + dy * dy > r2) continue;
      wt[i] = std::exp(tau * (c[i] - mx));
      z += wt[i];
    }
    T gx = 0, gy = 0;
    for (std::size_t i = 0; i < cells; ++i) {
      if (wt[i] == T(0)) continue;
      wt[i] /= z;
      gx += wt[i] * static_cast<T>(i % w);
      gy += wt[i] * static_cast<T>(i / w);
    }
    out.values()[2 * m] = gx;
    out.values()[2 * m + 1] = gy;
  }
  detail::record<T>("soft_argmax", out, {corr},
                    [corr, out, maps, cells, w, tau, weights = std::move(weights)]() mutable {
                      const T* g = out.grad().data();
                      const T* pos = out.data().data();
                      auto& gc = corr.grad_buffer();
                      for (std::size_t m = 0; m < maps; ++m) {
                        const T* wt = weights.data() + m * cells;
                        for (std::size_t i = 0; i < cells; ++i) {
                          if (wt[i] == T(0)) continue;
                          const T dx = static_cast<T>(i % w) - pos[2 * m];
                          const T dy = static_cast<T>(i / w) - pos[2 * m + 1];
                          gc[m * cells + i] += tau * wt[i] * (dx * g[2 * m] + dy * g[2 * m + 1]);
                        }
                      }
                    });
  return out;
}

inline void check_query(const QueryPoint& q, std::size_t frames, std::size_t height, std::size_t width) {
  if (!(std::isfinite(q.x) && std::isfinite(q.y)) || q.x < 0.0 || q.y < 0.0 ||
      q.x >= static_cast<double>(width) || q.y >= static_cast<double>(height) || q.t >= frames) {
    throw ArgumentError("query (x=" + std::to_string(q.x) + ", y=" + std::to_string(q.y) +
                        ", t=" + std::to_string(q.t) + ") is outside the " + std::to_string(frames) + "x" +
                        std::to_string(height) + "x" + std::to_string(width) + " clip");
  }
}

// Query feature at the query's pixel position in frame t_q -> [C]
template <typename T>
Tensor<T> extract_query_feature(const Tensor<T>& features, const QueryPoint& q, std::size_t patch) {
  const std::size_t nt = features.dim(0), gh = features.dim(1), gw = features.dim(2);
  check_query(q, nt, gh * patch, gw * patch);
  const Vec2 g = pixel_to_grid(q.x, q.y, static_cast<double>(patch));
  return reshape(sample_points(features, {{q.t, g.x, g.y}}), Shape{features.dim(3)});
}

// One query feature [C] against features [T×H×W×C] -> [T×H×W]
template <typename T>
Tensor<T> correlation(const Tensor<T>& fq, const Tensor<T>& features) {
  detail::require(fq.rank() == 1, "correlation: query feature must be a vector");
  Tensor<T> c = cosine_correlation(reshape(fq, Shape{1, fq.dim(0)}), features);
  return reshape(c, Shape{features.dim(0), features.dim(1), features.dim(2)});
}

// Differentiable tracking head: features [T×Hp×Wp×C] -> [Q×T×2] pixel positions.
template <typename T>
Tensor<T> predict_positions(const Tensor<T>& features, const std::vector<QueryPoint>& queries,
                            std::size_t patch, const TrackerConfig& cfg) {
  const std::size_t nt = features.dim(0), gh = features.dim(1), gw = features.dim(2);
  std::vector<SamplePoint> pts;
  pts.reserve(queries.size());
  for (const auto& q : queries) {
    check_query(q, nt, gh * patch, gw * patch);
    const Vec2 g = pixel_to_grid(q.x, q.y, static_cast<double>(patch));
    pts.push_back({q.t, g.x, g.y});
  }
  Tensor<T> fq = sample_points(features, pts);
  Tensor<T> grid = soft_argmax(cosine_correlation(fq, features), static_cast<T>(cfg.tau),
                               static_cast<T>(cfg.mask_radius));
  const T p = static_cast<T>(patch);
  return affine(grid, p, p / T(2));
}

template <typename T>
std::vector<TrackPrediction> track_features(const Tensor<T>& features, const std::vector<QueryPoint>& queries,
                                            std::size_t patch, const TrackerConfig& cfg) {
  std::vector<TrackPrediction> out;
  if (queries.empty()) return out;
  const Tensor<T> pos = predict_positions(features, queries, patch, cfg);
  const std::size_t nt = features.dim(0);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    TrackPrediction p;
    p.query = queries[i];
    for (std::size_t t = 0; t < nt; ++t) {
      p.positions.push_back({static_cast<double>(pos[(i * nt + t) * 2]), static_cast<double>(pos[(i * nt + t) * 2 + 1])});
    }
    out.push_back(std::move(p));
  }
  return out;
}


// Features are extracted once per clip and shared by every query.
template <typename T>
std::vector<TrackPrediction> track(const Model<T>& model, const VideoClip& clip,
                                   const std::vector<QueryPoint>& queries, const TrackerConfig& cfg) {
  std::vector<TrackPrediction> out;
  if (queries.empty()) return out;
  for (const auto& q : queries) check_query(q, clip.frames, clip.height, clip.width);
  const Tensor<T> features = model.features(clip.to_tensor<T>());
  return track_features(features, queries, model.backbone.config().patch, cfg);
}

}  // namespace chronotrack
