#pragma once

// Huber track loss with visibility masking, AdamW, cosine schedule with
// linear warmup, and the two training stages:
//   A: backbone alone, trained on random frame pairs (no temporal context);
//   B: backbone frozen, temporal adapters trained on full clips.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "chronotrack/model.hpp"
#include "chronotrack/synthdata.hpp"
#include "chronotrack/tracker.hpp"

namespace chronotrack {

inline double huber(Vec2 pred, Vec2 gt, double delta) {
  if (!(delta > 0.0)) throw ArgumentError("huber: delta must be positive");
  if (!std::isfinite(pred.x) || !std::isfinite(pred.y) || !std::isfinite(gt.x) || !std::isfinite(gt.y)) {
    throw NumericError("huber: non-finite input");
  }
  const double e = std::hypot(pred.x - gt.x, pred.y - gt.y);
  return e <= delta ? 0.5 * e * e : delta * (e - 0.5 * delta);
}

// pred [...×2]; gt holds the same number of coordinates; visible has one flag
// per point. Mean Huber over visible points, 0 when none are visible.
template <typename T>
Tensor<T> masked_huber_loss(const Tensor<T>& pred, const std::vector<T>& gt,
                            const std::vector<std::uint8_t>& visible, T delta) {
  detail::require(pred.rank() >= 1 && pred.shape().back() == 2 && gt.size() == pred.size() &&
                      visible.size() * 2 == pred.size(),
                  "masked_huber_loss: prediction " + shape_str(pred.shape()) + " does not match " +
                      std::to_string(visible.size()) + " ground-truth points");
  if (!(delta > T(0))) throw ArgumentError("masked_huber_loss: delta must be positive");
  std::size_t count = 0;
  T total = 0;
  for (std::size_t i = 0; i < visible.size(); ++i) {
    if (!visible[i]) continue;
    const T dx = pred[2 * i] - gt[2 * i], dy = pred[2 * i + 1] - gt[2 * i + 1];
    const T e = std::sqrt(dx * dx + dy * dy);
    total += e <= delta ? T(0.5) * e * e : delta * (e - T(0.5) * delta);
    ++count;
  }
  const T norm = count ? T(1) / static_cast<T>(count) : T(0);
  Tensor<T> out = Tensor<T>::scalar(total * norm);
  detail::record<T>("masked_huber_loss", out, {pred}, [pred, out, gt, visible, delta, norm]() mutable {
    const T g = out.grad()[0] * norm;
    auto& gp = pred.grad_buffer();
    for (std::size_t i = 0; i < visible.size(); ++i) {
      if (!visible[i]) continue;
      const T dx = pred[2 * i] - gt[2 * i], dy = pred[2 * i + 1] - gt[2 * i + 1];
      const T e = std::sqrt(dx * dx + dy * dy);
      const T s = e <= delta ? T(1) : (e > T(0) ? delta / e : T(0));
      gp[2 * i] += g * s * dx;
      gp[2 * i + 1] += g * s * dy;
    }
  });
  return out;
}

// preds [T×2] against one ground-truth track.
template <typename T>
Tensor<T> masked_track_loss(const Tensor<T>& preds, const GroundTruthTrack& gt, T delta) {
  std::vector<T> g;
  for (const auto& p : gt.positions) {
    g.push_back(static_cast<T>(p.x));
    g.push_back(static_cast<T>(p.y));
  }
  return masked_huber_loss(preds, g, gt.visible, delta);
}

inline double cosine_lr(std::size_t iter, std::size_t warmup, std::size_t total, double base_lr) {
  if (iter < warmup) {
    return base_lr * static_cast<double>(iter) / static_cast<double>(warmup);
  }
  const double span = static_cast<double>(total - warmup);
  const double progress = span > 0 ? static_cast<double>(iter - warmup) / span : 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m, v;
  std::size_t step = 0;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Decoupled weight decay. Parameters without requires_grad are skipped; a
// trainable parameter with no grad buffer is treated as having zero grad.
template <typename T>
void adamw_step(ParamList<T>& params, OptimizerState<T>& state, double lr, const AdamWConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i].tensor;
    if (!p.requires_grad()) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) {
      m.assign(p.size(), T(0));
      v.assign(p.size(), T(0));
    }
    auto& w = p.values();
    const bool has = p.has_grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = has ? static_cast<double>(p.grad()[j]) : 0.0;
      m[j] = static_cast<T>(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g);
      v[j] = static_cast<T>(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g);
      const double mh = m[j] / bc1, vh = v[j] / bc2;
      w[j] = static_cast<T>(w[j] - lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * w[j]));
    }
  }
}

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t iters = 2000;
  std::size_t warmup_iters = 100;
  std::size_t batch_clips = 1;
  std::size_t queries_per_batch = 64;
  double huber_delta = 1.0;
  std::uint64_t seed = 0;
  std::size_t subclip_frames = 2;  // stage A only
  TrackerConfig tracker;

  void validate() const {
    if (iters == 0) throw ConfigError("train: iters must be >= 1");
    if (warmup_iters >= iters) throw ConfigError("train: warmup_iters must be below iters");
    if (!(huber_delta > 0.0)) throw ConfigError("train: huber_delta must be positive");
    if (batch_clips == 0 || queries_per_batch == 0) throw ConfigError("train: empty batch");
    if (!(lr > 0.0) || !(weight_decay >= 0.0)) throw ConfigError("train: invalid lr/weight_decay");
  }
};

struct LossRecord {
  std::size_t iter;
  double lr;
  double loss;
};

struct TrainingSample {
  std::vector<std::size_t> frames;     // clip frame indices making up the (sub)clip
  std::vector<QueryPoint> queries;     // t is relative to `frames`
  std::vector<float> gt;               // [Q×T'×2]
  std::vector<std::uint8_t> visible;   // [Q×T']
};

// Queries are drawn uniformly over tracks with a visible frame in the
// (sub)clip, then uniformly over that track's visible frames.
inline TrainingSample sample_training_queries(const Clip& clip, const std::vector<std::size_t>& frames,
                                              std::size_t n_queries, Rng& rng) {
  TrainingSample s;
  s.frames = frames;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < clip.tracks.size(); ++i) {
    for (std::size_t f : frames) {
      if (clip.tracks[i].visible[f]) {
        eligible.push_back(i);
        break;
      }
    }
  }
  if (eligible.empty()) return s;
  for (std::size_t q = 0; q < n_queries; ++q) {
    const GroundTruthTrack& tr = clip.tracks[eligible[rng.index(eligible.size())]];
    std::vector<std::size_t> vis;
    for (std::size_t j = 0; j < frames.size(); ++j) {
      if (tr.visible[frames[j]]) vis.push_back(j);
    }
    const std::size_t j = vis[rng.index(vis.size())];
    const Vec2 p = tr.positions[frames[j]];
    s.queries.push_back({p.x, p.y, j});
    for (std::size_t f : frames) {
      s.gt.push_back(static_cast<float>(tr.positions[f].x));
      s.gt.push_back(static_cast<float>(tr.positions[f].y));
      s.visible.push_back(tr.visible[f]);
    }
  }
  return s;
}

// Frames [T'×H×W×3] for the given clip frame indices.
template <typename T>
Tensor<T> frames_tensor(const VideoClip& clip, const std::vector<std::size_t>& frames) {
  const std::size_t per = clip.height * clip.width * 3;
  Tensor<T> out = Tensor<T>::zeros({frames.size(), clip.height, clip.width, 3});
  auto& o = out.values();
  for (std::size_t j = 0; j < frames.size(); ++j) {
    const std::uint8_t* src = clip.pixels.data() + frames[j] * per;
    for (std::size_t i = 0; i < per; ++i) o[j * per + i] = static_cast<T>(src[i]) / T(255);
  }
  return out;
}

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<LossRecord> log;
};

using FrameSampler = std::function<std::vector<std::size_t>(const Clip&, Rng&)>;
using ProgressFn = std::function<void(const LossRecord&)>;

// One training clip per draw. The reference stays valid until the next draw.
using ClipSource = std::function<const Clip&(Rng&)>;

inline ClipSource sample_uniformly(std::vector<const Clip*> clips) {
  if (clips.empty()) throw ArgumentError("train: empty dataset");
  return [clips = std::move(clips)](Rng& rng) -> const Clip& { return *clips[rng.index(clips.size())]; };
}

// Endless stream of newly rendered clips with seeds first_seed, first_seed + 2, ...,
// so every clip shares first_seed's split.
inline ClipSource fresh_clips(const SceneSpec& spec, std::uint64_t first_seed) {
  struct State {
    SceneSpec spec;
    Clip clip;
  };
  auto st = std::make_shared<State>();
  st->spec = spec;
  st->spec.seed = first_seed;
  return [st](Rng&) -> const Clip& {
    st->clip = generate_clip(st->spec);
    st->spec.seed += 2;
    return st->clip;
  };
}

namespace detail {

template <typename T>
std::vector<LossRecord> run_training(Model<T>& model, ParamList<T> trainable, const ClipSource& source,
                                     const TrainConfig& cfg, const FrameSampler& sampler,
                                     const ProgressFn& progress) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0x7A));
  OptimizerState<T> state;
  AdamWConfig opt;
  opt.weight_decay = cfg.weight_decay;
  std::vector<LossRecord> log;
  const std::size_t patch = model.backbone.config().patch;
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const double lr = cosine_lr(it, cfg.warmup_iters, cfg.iters, cfg.lr);
    double step_loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_clips; ++b) {
      const Clip& clip = source(rng);
      const auto frames = sampler(clip, rng);
      TrainingSample s = sample_training_queries(clip, frames, cfg.queries_per_batch, rng);
      if (s.queries.empty()) continue;
      Graph<T> graph;
      GraphScope<T> scope(graph);
      Tensor<T> feats = model.features(frames_tensor<T>(clip.video, frames));
      for (T v : feats.data()) {
        if (!std::isfinite(static_cast<double>(v))) {
          throw NumericError("train: non-finite features at iteration " + std::to_string(it));
        }
      }
      Tensor<T> pred = predict_positions(feats, s.queries, patch, cfg.tracker);
      std::vector<T> gt(s.gt.begin(), s.gt.end());
      Tensor<T> loss = scale(masked_huber_loss(pred, gt, s.visible, static_cast<T>(cfg.huber_delta)),
                             T(1) / static_cast<T>(cfg.batch_clips));
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        throw NumericError("train: non-finite loss at iteration " + std::to_string(it));
      }
      step_loss += static_cast<double>(loss.item());
      if (loss.requires_grad()) graph.backward(loss);
    }
    adamw_step(trainable, state, lr, opt);
    for (auto& p : trainable) {
      p.tensor.zero_grad();
      for (T v : p.tensor.data()) {
        if (!std::isfinite(static_cast<double>(v))) {
          throw NumericError("train: parameter '" + p.name + "' became non-finite at iteration " + std::to_string(it));
        }
      }
    }
    log.push_back({it, lr, step_loss});
    if (progress) progress(log.back());
  }
  return log;
}

}  // namespace detail

// Stage A: backbone only, on sub-clips of `subclip_frames` distinct frames
// drawn at random (sorted) from a training clip.
template <typename T>
TrainResult<T> train_stage_a(const ClipSource& source, const BackboneConfig& bcfg, const TrainConfig& cfg,
                             const ProgressFn& progress = {}) {
  TrainResult<T> r;
  r.model.backbone = Backbone<T>::init(bcfg, cfg.seed);
  const std::size_t k = cfg.subclip_frames;
  FrameSampler sampler = [k](const Clip& clip, Rng& rng) {
    const std::size_t nt = clip.video.frames;
    std::vector<std::size_t> all(nt);
    for (std::size_t i = 0; i < nt; ++i) all[i] = i;
    const std::size_t take = std::min(k, nt);
    for (std::size_t i = 0; i < take; ++i) std::swap(all[i], all[i + rng.index(nt - i)]);
    std::vector<std::size_t> pick(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(pick.begin(), pick.end());
    return pick;
  };
  auto trainable = r.model.backbone.parameters();
  r.log = detail::run_training(r.model, trainable, source, cfg, sampler, progress);
  return r;
}

template <typename T>
TrainResult<T> train_stage_a(const std::vector<const Clip*>& clips, const BackboneConfig& bcfg,
                             const TrainConfig& cfg, const ProgressFn& progress = {}) {
  if (clips.empty()) throw ArgumentError("train_stage_a: empty dataset");
  return train_stage_a<T>(sample_uniformly(clips), bcfg, cfg, progress);
}

// Stage B: the given backbone is frozen and a fresh adapter set is trained on
// whole clips. The backbone's parameters are shared, not copied.
namespace detail {

inline void check_window(const AdapterConfig& acfg, const Clip& clip) {
  if (acfg.window > clip.video.frames) {
    throw ConfigError("train_stage_b: window N=" + std::to_string(acfg.window) + " exceeds clip length " +
                      std::to_string(clip.video.frames));
  }
}

}  // namespace detail

template <typename T>
TrainResult<T> train_stage_b(Backbone<T> backbone, const ClipSource& source, const AdapterConfig& acfg,
                             const TrainConfig& cfg, const ProgressFn& progress = {}) {
  ClipSource checked = [source, acfg](Rng& rng) -> const Clip& {
    const Clip& c = source(rng);
    detail::check_window(acfg, c);
    return c;
  };
  TrainResult<T> r;
  backbone.set_frozen(true);
  const auto& bc = backbone.config();
  AdapterConfig a = acfg;
  a.c_in = bc.dim;
  r.model.adapters = AdapterSet<T>::init(a, backbone.depth(), bc.grid_h(), bc.grid_w(), mix_seed(cfg.seed, 0xAD));
  r.model.backbone = std::move(backbone);
  FrameSampler sampler = [](const Clip& clip, Rng&) {
    std::vector<std::size_t> all(clip.video.frames);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  };
  auto trainable = r.model.adapters->parameters();
  r.log = detail::run_training(r.model, trainable, checked, cfg, sampler, progress);
  return r;
}

template <typename T>
TrainResult<T> train_stage_b(Backbone<T> backbone, const std::vector<const Clip*>& clips,
                             const AdapterConfig& acfg, const TrainConfig& cfg, const ProgressFn& progress = {}) {
  if (clips.empty()) throw ArgumentError("train_stage_b: empty dataset");
  for (const Clip* c : clips) detail::check_window(acfg, *c);
  return train_stage_b<T>(std::move(backbone), sample_uniformly(clips), acfg, cfg, progress);
}

}  // namespace chronotrack
