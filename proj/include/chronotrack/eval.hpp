#pragma once

// Query sampling, threshold accuracy, jitter, evaluation reports, and PCA
// feature images.

#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chronotrack/format.hpp"
#include "chronotrack/rng.hpp"
#include "chronotrack/tracker.hpp"

namespace chronotrack {

inline constexpr std::array<double, 5> kThresholds{1.0, 2.0, 4.0, 8.0, 16.0};
inline constexpr std::size_t kQueryStride = 5;

enum class QueryMode { strided, first };

inline std::string to_string(QueryMode m) { return m == QueryMode::strided ? "strided" : "first"; }

inline QueryMode parse_query_mode(const std::string& s) {
  if (s == "strided") return QueryMode::strided;
  if (s == "first") return QueryMode::first;
  throw ConfigError("unknown query mode '" + s + "' (expected strided|first)");
}

inline std::vector<QueryPoint> sample_queries_strided(const GroundTruthTrack& track) {
  std::vector<QueryPoint> out;
  for (std::size_t t = 0; t < track.visible.size(); t += kQueryStride) {
    if (track.visible[t]) out.push_back({track.positions[t].x, track.positions[t].y, t});
  }
  return out;
}

inline std::optional<QueryPoint> sample_queries_first(const GroundTruthTrack& track) {
  for (std::size_t t = 0; t < track.visible.size(); ++t) {
    if (track.visible[t]) return QueryPoint{track.positions[t].x, track.positions[t].y, t};
  }
  return std::nullopt;
}

inline std::vector<QueryPoint> sample_queries(const GroundTruthTrack& track, QueryMode mode) {
  if (mode == QueryMode::strided) return sample_queries_strided(track);
  std::vector<QueryPoint> out;
  if (auto q = sample_queries_first(track)) out.push_back(*q);
  return out;
}

// Pooled hit counts: every visible (query, frame) pair counts once.
struct AccuracyCounts {
  std::array<std::size_t, 5> hits{};
  std::size_t visible = 0;

  void add(const TrackPrediction& pred, const GroundTruthTrack& gt) {
    if (pred.positions.size() != gt.positions.size() || gt.visible.size() != gt.positions.size()) {
      throw DimensionError("delta_accuracy: prediction has " + std::to_string(pred.positions.size()) +
                           " frames, ground truth has " + std::to_string(gt.positions.size()));
    }
    for (std::size_t t = 0; t < gt.positions.size(); ++t) {
      if (!gt.visible[t]) continue;
      ++visible;
      const double e = std::hypot(pred.positions[t].x - gt.positions[t].x, pred.positions[t].y - gt.positions[t].y);
      for (std::size_t k = 0; k < kThresholds.size(); ++k) {
        if (e <= kThresholds[k]) ++hits[k];
      }
    }
  }

  std::array<double, 5> fractions() const {
    if (visible == 0) throw ArgumentError("delta_accuracy: no visible ground-truth points");
    std::array<double, 5> f{};
    for (std::size_t k = 0; k < f.size(); ++k) f[k] = static_cast<double>(hits[k]) / static_cast<double>(visible);
    return f;
  }
};

inline std::array<double, 5> delta_accuracy(const TrackPrediction& pred, const GroundTruthTrack& gt) {
  AccuracyCounts c;
  c.add(pred, gt);
  return c.fractions();
}

inline std::array<double, 5> delta_accuracy(const std::vector<TrackPrediction>& preds,
                                            const std::vector<const GroundTruthTrack*>& gts) {
  if (preds.size() != gts.size()) throw DimensionError("delta_accuracy: predictions and tracks differ in count");
  AccuracyCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) c.add(preds[i], *gts[i]);
  return c.fractions();
}

inline double delta_avg(const std::array<double, 5>& acc) {
  double s = 0.0;
  for (double a : acc) s += a;
  return s / static_cast<double>(acc.size());
}

// Mean second-difference magnitude over triples of consecutive visible frames.
inline std::optional<double> jitter(const TrackPrediction& pred, const std::vector<std::uint8_t>& visible) {
  const auto& p = pred.positions;
  if (visible.size() != p.size()) throw DimensionError("jitter: visibility length differs from track length");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 1; t + 1 < p.size(); ++t) {
    if (!(visible[t - 1] && visible[t] && visible[t + 1])) continue;
    sum += std::hypot(p[t + 1].x - 2.0 * p[t].x + p[t - 1].x, p[t + 1].y - 2.0 * p[t].y + p[t - 1].y);
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

struct EvalReport {
  std::array<double, 5> accuracy{};
  double average = 0.0;
  double jitter = 0.0;            // mean over tracks with a valid triple
  std::size_t jitter_tracks = 0;
  std::size_t n_clips = 0;
  std::size_t n_queries = 0;
  std::size_t n_visible_points = 0;
  std::map<std::string, std::string> config;

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : config) os << "config." << k << ": " << v << '\n';
    os << "n_clips: " << n_clips << '\n';
    os << "n_queries: " << n_queries << '\n';
    os << "n_visible_points: " << n_visible_points << '\n';
    for (std::size_t k = 0; k < accuracy.size(); ++k) {
      os << "delta_" << k << ": " << format_real(accuracy[k]) << '\n';
    }
    os << "delta_avg: " << format_real(average) << '\n';
    os << "jitter_px_per_frame2: " << format_real(jitter) << "  # supplementary, not a TAP-Vid metric\n";
    os << "jitter_tracks: " << jitter_tracks << '\n';
    return os.str();
  }

  // Tab-separated table for stdout.
  std::string table() const {
    std::ostringstream os;
    os << "delta_0\tdelta_1\tdelta_2\tdelta_3\tdelta_4\tdelta_avg\tjitter\tn_queries\n";
    for (double a : accuracy) os << format_real(a) << '\t';
    os << format_real(average) << '\t' << format_real(jitter) << '\t' << n_queries << '\n';
    return os.str();
  }
};

struct ClipQueries {
  std::vector<QueryPoint> queries;
  std::vector<std::size_t> track_index;  // source ground-truth track per query
};

// Depends only on ground truth.
inline ClipQueries clip_queries(const Clip& clip, QueryMode mode) {
  ClipQueries out;
  for (std::size_t i = 0; i < clip.tracks.size(); ++i) {
    for (const auto& q : sample_queries(clip.tracks[i], mode)) {
      out.queries.push_back(q);
      out.track_index.push_back(i);
    }
  }
  return out;
}

inline std::vector<TrackPrediction> oracle_predictions(const Clip& clip, const ClipQueries& cq) {
  std::vector<TrackPrediction> out;
  for (std::size_t i = 0; i < cq.queries.size(); ++i) {
    out.push_back({cq.queries[i], clip.tracks[cq.track_index[i]].positions});
  }
  return out;
}

// Receives each clip's position in the input list and its predictions.
using PredictionSink = std::function<void(std::size_t, const std::vector<TrackPrediction>&)>;

// Jitter is averaged per track first, then over tracks. A null model selects
// the ground-truth oracle.
template <typename T>
EvalReport evaluate(const Model<T>* model, const std::vector<const Clip*>& clips, QueryMode mode,
                    const TrackerConfig& tcfg, const PredictionSink& sink = {}) {
  EvalReport r;
  AccuracyCounts counts;
  double jitter_sum = 0.0;
  for (std::size_t ci = 0; ci < clips.size(); ++ci) {
    const Clip* clip = clips[ci];
    const ClipQueries cq = clip_queries(*clip, mode);
    if (cq.queries.empty()) continue;
    const auto preds = model ? track(*model, clip->video, cq.queries, tcfg) : oracle_predictions(*clip, cq);
    if (sink) sink(ci, preds);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const GroundTruthTrack& gt = clip->tracks[cq.track_index[i]];
      counts.add(preds[i], gt);
      if (auto j = jitter(preds[i], gt.visible)) {
        jitter_sum += *j;
        ++r.jitter_tracks;
      }
    }
    r.n_queries += cq.queries.size();
    ++r.n_clips;
  }
  if (r.n_queries == 0) throw ArgumentError("evaluate: no queries in dataset");
  r.accuracy = counts.fractions();
  r.average = delta_avg(r.accuracy);
  r.n_visible_points = counts.visible;
  r.jitter = r.jitter_tracks ? jitter_sum / static_cast<double>(r.jitter_tracks) : 0.0;
  r.config["mode"] = to_string(mode);
  r.config["tau"] = format_real(tcfg.tau);
  r.config["mask_radius"] = format_real(tcfg.mask_radius);
  r.config["predictor"] = model ? "model" : "oracle";
  return r;
}

struct PcaResult {
  std::vector<double> mean;                         // [C]
  std::array<std::vector<double>, 3> components;    // unit vectors, or empty when absent
  std::array<double, 3> variance{};
  std::vector<double> projection;                   // [N×3]
};

// Top-3 principal components of rows [N×C] by power iteration with
// deflation. Components whose variance is negligible are left empty and
// project to 0.
inline PcaResult pca3(const std::vector<double>& rows, std::size_t n, std::size_t c, std::uint64_t seed = 7,
                      std::size_t iterations = 300) {
  PcaResult r;
  r.mean.assign(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) r.mean[j] += rows[i * c + j];
  for (double& m : r.mean) m /= static_cast<double>(std::max<std::size_t>(n, 1));
  std::vector<double> cov(c * c, 0.0);
  std::vector<double> d(c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) d[j] = rows[i * c + j] - r.mean[j];
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) cov[a * c + b] += d[a] * d[b];
  }
  for (double& v : cov) v /= static_cast<double>(std::max<std::size_t>(n, 1));
  double trace = 0.0;
  for (std::size_t a = 0; a < c; ++a) trace += cov[a * c + a];
  Rng rng(seed);
  std::vector<double> v(c), w(c);
  for (std::size_t k = 0; k < 3 && k < c; ++k) {
    for (double& x : v) x = rng.normal();
    double lambda = 0.0;
    bool ok = trace > 0.0;
    for (std::size_t it = 0; it < iterations && ok; ++it) {
      for (std::size_t p = 0; p < k; ++p) {
        if (r.components[p].empty()) continue;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += v[j] * r.components[p][j];
        for (std::size_t j = 0; j < c; ++j) v[j] -= dot * r.components[p][j];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (!(norm > 0.0)) {
        ok = false;
        break;
      }
      for (double& x : v) x /= norm;
      for (std::size_t a = 0; a < c; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < c; ++b) s += cov[a * c + b] * v[b];
        w[a] = s;
      }
      lambda = 0.0;
      for (std::size_t j = 0; j < c; ++j) lambda += v[j] * w[j];
      if (lambda <= 1e-12 * trace) {
        ok = false;
        break;
      }
      v.swap(w);
    }
    if (!ok) continue;
    // v currently holds cov·u from the last iteration; renormalize.
    for (std::size_t p = 0; p < k; ++p) {
      if (r.components[p].empty()) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += v[j] * r.components[p][j];
      for (std::size_t j = 0; j < c; ++j) v[j] -= dot * r.components[p][j];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    r.components[k] = v;
    r.variance[k] = lambda;
  }
  r.projection.assign(n * 3, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      if (r.components[k].empty()) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += (rows[i * c + j] - r.mean[j]) * r.components[k][j];
      r.projection[i * 3 + k] = s;
    }
  }
  return r;
}

inline void write_ppm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& rgb) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P6\n" << width << ' ' << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

// features [T×Hp×Wp×C] -> frame_000.ppm … in out_dir; returns written paths.
template <typename T>
std::vector<std::filesystem::path> pca_dump(const Tensor<T>& features, const std::filesystem::path& out_dir) {
  detail::require(features.rank() == 4, "pca_dump: expected [T×H×W×C], got " + shape_str(features.shape()));
  const std::size_t nt = features.dim(0), h = features.dim(1), w = features.dim(2), c = features.dim(3);
  if (nt == 0) throw ArgumentError("pca_dump: no frames");
  const std::size_t n = nt * h * w;
  std::vector<double> rows(features.values().begin(), features.values().end());
  const PcaResult pca = pca3(rows, n, c);
  std::array<double, 3> lo{}, hi{};
  for (std::size_t k = 0; k < 3; ++k) {
    lo[k] = hi[k] = pca.projection[k];
    for (std::size_t i = 0; i < n; ++i) {
      lo[k] = std::min(lo[k], pca.projection[i * 3 + k]);
      hi[k] = std::max(hi[k], pca.projection[i * 3 + k]);
    }
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  std::vector<std::filesystem::path> paths;
  for (std::size_t t = 0; t < nt; ++t) {
    std::vector<std::uint8_t> rgb(h * w * 3, 0);
    for (std::size_t i = 0; i < h * w; ++i) {
      for (std::size_t k = 0; k < 3; ++k) {
        const double span = hi[k] - lo[k];
        const double v = span > 0.0 ? (pca.projection[(t * h * w + i) * 3 + k] - lo[k]) / span : 0.0;
        rgb[i * 3 + k] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.ppm", t);
    paths.push_back(out_dir / name);
    write_ppm(paths.back(), w, h, rgb);
  }
  return paths;
}

}  // namespace chronotrack
