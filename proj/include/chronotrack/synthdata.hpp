#pragma once

// Deterministic synthetic videos: value-noise textured rectangles moving with
// constant velocity and spin over a static textured background, with exact
// ground-truth point trajectories and occlusion flags.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "chronotrack/rng.hpp"
#include "chronotrack/tensor.hpp"

namespace chronotrack {

struct SceneSpec {
  std::uint64_t seed = 0;
  std::uint32_t frames = 24;
  std::uint32_t height = 64;
  std::uint32_t width = 64;
  std::uint32_t sprites = 3;
  std::uint32_t tracks = 64;
  float size_min = 16.0f;   // sprite side length range, px
  float size_max = 28.0f;
  float speed_max = 2.0f;   // px/frame per axis
  float spin_max = 0.05f;   // rad/frame
  float texture_cell = 3.0f;  // value-noise lattice spacing, px
  std::uint64_t background_seed = 0;  // 0: derived from seed

  void validate() const {
    if (frames < 2) throw ArgumentError("scene: need at least 2 frames, got " + std::to_string(frames));
    if (height == 0 || width == 0) throw ArgumentError("scene: empty frame size");
    if (!(size_min > 4.0f) || size_max < size_min || size_max >= static_cast<float>(std::min(height, width))) {
      throw ArgumentError("scene: sprite sizes must satisfy 4 < min <= max < min(H, W)");
    }
    if (!(speed_max >= 0.0f) || !(spin_max >= 0.0f) || !(texture_cell > 0.0f)) {
      throw ArgumentError("scene: speed, spin and texture cell must be non-negative/positive");
    }
  }

  bool operator==(const SceneSpec&) const = default;
};

// T×H×W×3 bytes, row-major.
struct VideoClip {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[((t * height + y) * width + x) * 3 + c];
  }

  // Values in [0, 1], shape [T×H×W×3].
  template <typename T>
  Tensor<T> to_tensor() const {
    Tensor<T> out = Tensor<T>::zeros({frames, height, width, 3});
    auto& o = out.values();
    for (std::size_t i = 0; i < pixels.size(); ++i) o[i] = static_cast<T>(pixels[i]) / T(255);
    return out;
  }

  bool operator==(const VideoClip&) const = default;
};

// Rounds through single precision; the volatile keeps the vectorizer from
// folding the round trip away.
inline double round_to_f32(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Vec2&) const = default;
};

struct GroundTruthTrack {
  std::vector<Vec2> positions;  // defined on every frame, including occluded ones
  std::vector<std::uint8_t> visible;
  std::int32_t sprite = 0;
  Vec2 local;  // sprite-frame coordinates of the tracked point

  std::size_t frames() const { return positions.size(); }
  bool operator==(const GroundTruthTrack&) const = default;
};

// Value noise on a regular lattice; RGB in [0, 1].
struct NoiseTexture {
  std::size_t nx = 0, ny = 0;
  double cell = 1.0;
  std::array<double, 3> base{};
  double amplitude = 1.0;
  std::vector<std::array<double, 3>> lattice;

  static NoiseTexture make(double extent_x, double extent_y, double cell, std::array<double, 3> base,
                           double amplitude, Rng& rng) {
    NoiseTexture tex;
    tex.cell = cell;
    tex.nx = static_cast<std::size_t>(std::ceil(extent_x / cell)) + 2;
    tex.ny = static_cast<std::size_t>(std::ceil(extent_y / cell)) + 2;
    tex.base = base;
    tex.amplitude = amplitude;
    tex.lattice.resize(tex.nx * tex.ny);
    for (auto& v : tex.lattice) v = {rng.uniform(), rng.uniform(), rng.uniform()};
    return tex;
  }

  // (u, v) measured from the texture origin, >= 0
  std::array<double, 3> sample(double u, double v) const {
    const double fu = std::clamp(u / cell, 0.0, static_cast<double>(nx - 1) - 1e-9);
    const double fv = std::clamp(v / cell, 0.0, static_cast<double>(ny - 1) - 1e-9);
    const auto x0 = static_cast<std::size_t>(fu), y0 = static_cast<std::size_t>(fv);
    const double ax = fu - static_cast<double>(x0), ay = fv - static_cast<double>(y0);
    std::array<double, 3> out{};
    for (int c = 0; c < 3; ++c) {
      const double n = (1 - ax) * (1 - ay) * lattice[y0 * nx + x0][c] +
                       ax * (1 - ay) * lattice[y0 * nx + x0 + 1][c] +
                       (1 - ax) * ay * lattice[(y0 + 1) * nx + x0][c] +
                       ax * ay * lattice[(y0 + 1) * nx + x0 + 1][c];
      out[c] = std::clamp(base[c] + amplitude * (n - 0.5), 0.0, 1.0);
    }
    return out;
  }
};

struct Sprite {
  Vec2 center;     // at t = 0
  Vec2 velocity;   // px/frame
  double angle = 0.0;
  double spin = 0.0;  // rad/frame
  double half_w = 8.0, half_h = 8.0;
  NoiseTexture texture;

  Vec2 center_at(double t) const { return {center.x + velocity.x * t, center.y + velocity.y * t}; }
  double angle_at(double t) const { return angle + spin * t; }

  Vec2 to_world(Vec2 local, double t) const {
    const double a = angle_at(t), c = std::cos(a), s = std::sin(a);
    const Vec2 ctr = center_at(t);
    return {ctr.x + c * local.x - s * local.y, ctr.y + s * local.x + c * local.y};
  }

  Vec2 to_local(Vec2 world, double t) const {
    const double a = angle_at(t), c = std::cos(a), s = std::sin(a);
    const Vec2 ctr = center_at(t);
    const double dx = world.x - ctr.x, dy = world.y - ctr.y;
    return {c * dx + s * dy, -s * dx + c * dy};
  }

  bool contains(Vec2 world, double t) const {
    const Vec2 l = to_local(world, t);
    return std::abs(l.x) <= half_w && std::abs(l.y) <= half_h;
  }
};

struct TrackPoint {
  std::int32_t sprite;
  Vec2 local;
};

// Everything needed to render a clip; sprites are listed bottom to top.
struct Scene {
  SceneSpec spec;
  NoiseTexture background;
  std::vector<Sprite> sprites;
  std::vector<TrackPoint> points;
};

struct Clip {
  SceneSpec spec;
  VideoClip video;
  std::vector<GroundTruthTrack> tracks;

  bool operator==(const Clip&) const = default;
};

inline Scene sample_scene(const SceneSpec& spec) {
  spec.validate();
  Scene scene;
  scene.spec = spec;
  const double W = spec.width, H = spec.height, span = spec.frames - 1;
  Rng bg_rng(spec.background_seed != 0 ? spec.background_seed : mix_seed(spec.seed, 0xBA));
  scene.background = NoiseTexture::make(W, H, spec.texture_cell, {0.5, 0.5, 0.5}, 0.8, bg_rng);

  Rng rng(mix_seed(spec.seed, 0x5C));
  for (std::uint32_t i = 0; i < spec.sprites; ++i) {
    Sprite s;
    s.half_w = 0.5 * rng.uniform(spec.size_min, spec.size_max);
    s.half_h = 0.5 * rng.uniform(spec.size_min, spec.size_max);
    // Whole sprite stays in frame when the motion allows it; otherwise only
    // the centre is kept inside and the sprite may partially exit.
    const double margin = std::hypot(s.half_w, s.half_h);
    auto axis = [&](double extent, double& pos, double& vel) {
      vel = rng.uniform(-spec.speed_max, spec.speed_max);
      double lo = std::max(margin, margin - vel * span);
      double hi = std::min(extent - margin, extent - margin - vel * span);
      if (lo > hi) {
        lo = std::max(0.0, -vel * span);
        hi = std::min(extent, extent - vel * span);
      }
      pos = rng.uniform(lo, hi);
    };
    axis(W, s.center.x, s.velocity.x);
    axis(H, s.center.y, s.velocity.y);
    s.angle = rng.uniform(-std::numbers::pi, std::numbers::pi);
    s.spin = rng.uniform(-spec.spin_max, spec.spin_max);
    const std::array<double, 3> base{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
    s.texture = NoiseTexture::make(2 * s.half_w, 2 * s.half_h, spec.texture_cell, base, 0.9, rng);
    scene.sprites.push_back(std::move(s));
  }
  if (!scene.sprites.empty()) {
    for (std::uint32_t k = 0; k < spec.tracks; ++k) {
      const auto idx = static_cast<std::int32_t>(k % spec.sprites);
      const Sprite& s = scene.sprites[static_cast<std::size_t>(idx)];
      const double mx = std::max(0.0, s.half_w - 2.0), my = std::max(0.0, s.half_h - 2.0);
      const double u = round_to_f32(rng.uniform(-mx, mx)), v = round_to_f32(rng.uniform(-my, my));
      scene.points.push_back({idx, {u, v}});
    }
  }
  return scene;
}

// Index of the topmost sprite covering the pixel centre, or -1 for background.
inline int top_sprite_at(const Scene& scene, std::size_t px, std::size_t py, double t) {
  const Vec2 c{static_cast<double>(px) + 0.5, static_cast<double>(py) + 0.5};
  for (std::size_t i = scene.sprites.size(); i-- > 0;) {
    if (scene.sprites[i].contains(c, t)) return static_cast<int>(i);
  }
  return -1;
}

inline Clip render(const Scene& scene) {
  const SceneSpec& spec = scene.spec;
  Clip clip;
  clip.spec = spec;
  VideoClip& v = clip.video;
  v.frames = spec.frames;
  v.height = spec.height;
  v.width = spec.width;
  v.pixels.resize(v.frames * v.height * v.width * 3);
  for (std::size_t t = 0; t < v.frames; ++t) {
    const double tt = static_cast<double>(t);
    for (std::size_t y = 0; y < v.height; ++y)
      for (std::size_t x = 0; x < v.width; ++x) {
        const Vec2 c{static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5};
        const int top = top_sprite_at(scene, x, y, tt);
        std::array<double, 3> rgb;
        if (top < 0) {
          rgb = scene.background.sample(c.x, c.y);
        } else {
          const Sprite& s = scene.sprites[static_cast<std::size_t>(top)];
          const Vec2 l = s.to_local(c, tt);
          rgb = s.texture.sample(l.x + s.half_w, l.y + s.half_h);
        }
        for (std::size_t ch = 0; ch < 3; ++ch) {
          v.pixels[((t * v.height + y) * v.width + x) * 3 + ch] =
              static_cast<std::uint8_t>(std::lround(rgb[ch] * 255.0));
        }
      }
  }
  for (const auto& p : scene.points) {
    GroundTruthTrack tr;
    tr.sprite = p.sprite;
    tr.local = p.local;
    const Sprite& s = scene.sprites[static_cast<std::size_t>(p.sprite)];
    for (std::size_t t = 0; t < v.frames; ++t) {
      const double tt = static_cast<double>(t);
      const Vec2 w = s.to_world(p.local, tt);
      // stored as f32 in the dataset container; keep memory identical to disk
      const Vec2 pos{round_to_f32(w.x), round_to_f32(w.y)};
      tr.positions.push_back(pos);
      bool vis = false;
      if (w.x >= 0.0 && w.y >= 0.0 && w.x < static_cast<double>(v.width) && w.y < static_cast<double>(v.height)) {
        vis = top_sprite_at(scene, static_cast<std::size_t>(w.x), static_cast<std::size_t>(w.y), tt) == p.sprite;
      }
      tr.visible.push_back(vis ? 1 : 0);
    }
    clip.tracks.push_back(std::move(tr));
  }
  return clip;
}

inline Clip generate_clip(const SceneSpec& spec) { return render(sample_scene(spec)); }

// Held-out clips are the ones with odd seeds.
inline bool is_heldout(std::uint64_t seed) { return seed % 2 == 1; }

struct Dataset {
  std::vector<Clip> clips;

  std::vector<const Clip*> split(bool heldout) const {
    std::vector<const Clip*> out;
    for (const auto& c : clips) {
      if (is_heldout(c.spec.seed) == heldout) out.push_back(&c);
    }
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

inline Dataset generate_dataset(std::size_t n_clips, std::uint64_t base_seed, const SceneSpec& tmpl) {
  if (n_clips < 1) throw ArgumentError("dataset: need at least one clip");
  Dataset d;
  d.clips.reserve(n_clips);
  for (std::size_t i = 0; i < n_clips; ++i) {
    SceneSpec s = tmpl;
    s.seed = base_seed + i;
    d.clips.push_back(generate_clip(s));
  }
  return d;
}

}  // namespace chronotrack
