#pragma once

// Tiny per-frame ViT: patch embedding plus pre-norm transformer blocks whose
// self-attention never crosses frame boundaries.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "chronotrack/ops.hpp"
#include "chronotrack/params.hpp"

namespace chronotrack {

struct BackboneConfig {
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  std::size_t hidden() const { return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(dim))); }

  void validate() const {
    if (patch == 0 || image_h % patch != 0 || image_w % patch != 0) {
      throw ConfigError("backbone: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " is not divisible by patch size " + std::to_string(patch));
    }
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError("backbone: dim " + std::to_string(dim) + " is not divisible by heads " +
                        std::to_string(heads));
    }
    if (depth == 0) throw ConfigError("backbone: depth must be >= 1");
    if (hidden() == 0) throw ConfigError("backbone: mlp_ratio gives an empty hidden layer");
  }
};

template <typename T>
struct BlockParams {
  Tensor<T> norm1_w, norm1_b, qkv_w, qkv_b, proj_w, proj_b;
  Tensor<T> norm2_w, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
class Backbone {
 public:
  Backbone() = default;

  static Backbone init(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Backbone b;
    b.cfg_ = cfg;
    Rng rng(mix_seed(seed, 0xB0));
    const std::size_t c = cfg.dim, pin = cfg.patch * cfg.patch * 3, hid = cfg.hidden();
    auto lin = [&rng](std::size_t in, std::size_t out) {
      return uniform_init<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    };
    b.patch_w_ = lin(pin, c);
    b.patch_b_ = Tensor<T>::zeros({c});
    b.pos_embed_ = normal_init<T>({cfg.tokens(), c}, 0.02, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      BlockParams<T> p;
      p.norm1_w = Tensor<T>::full({c}, T(1));
      p.norm1_b = Tensor<T>::zeros({c});
      p.qkv_w = lin(c, 3 * c);
      p.qkv_b = Tensor<T>::zeros({3 * c});
      p.proj_w = lin(c, c);
      p.proj_b = Tensor<T>::zeros({c});
      p.norm2_w = Tensor<T>::full({c}, T(1));
      p.norm2_b = Tensor<T>::zeros({c});
      p.fc1_w = lin(c, hid);
      p.fc1_b = Tensor<T>::zeros({hid});
      p.fc2_w = lin(hid, c);
      p.fc2_b = Tensor<T>::zeros({c});
      b.blocks_.push_back(std::move(p));
    }
    b.set_frozen(false);
    return b;
  }

  // Copies share parameter storage; clone() does not.
  Backbone clone() const {
    Backbone b = *this;
    b.patch_w_ = patch_w_.detach();
    b.patch_b_ = patch_b_.detach();
    b.pos_embed_ = pos_embed_.detach();
    for (auto& p : b.blocks_) {
      for (Tensor<T>* t : {&p.norm1_w, &p.norm1_b, &p.qkv_w, &p.qkv_b, &p.proj_w, &p.proj_b, &p.norm2_w,
                           &p.norm2_b, &p.fc1_w, &p.fc1_b, &p.fc2_w, &p.fc2_b}) {
        *t = t->detach();
      }
    }
    b.set_frozen(frozen_);
    return b;
  }

  const BackboneConfig& config() const { return cfg_; }
  std::size_t depth() const { return blocks_.size(); }

  Tensor<T>& patch_weight() { return patch_w_; }
  Tensor<T>& patch_bias() { return patch_b_; }
  Tensor<T>& pos_embed() { return pos_embed_; }
  BlockParams<T>& block(std::size_t i) { return blocks_.at(i); }
  const BlockParams<T>& block(std::size_t i) const { return blocks_.at(i); }

  ParamList<T> parameters() const {
    ParamList<T> out{{"backbone.patch_embed.weight", patch_w_},
                     {"backbone.patch_embed.bias", patch_b_},
                     {"backbone.pos_embed", pos_embed_}};
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& p = blocks_[i];
      const std::string pre = "backbone.blocks." + std::to_string(i) + ".";
      out.push_back({pre + "norm1.weight", p.norm1_w});
      out.push_back({pre + "norm1.bias", p.norm1_b});
      out.push_back({pre + "attn.qkv.weight", p.qkv_w});
      out.push_back({pre + "attn.qkv.bias", p.qkv_b});
      out.push_back({pre + "attn.proj.weight", p.proj_w});
      out.push_back({pre + "attn.proj.bias", p.proj_b});
      out.push_back({pre + "norm2.weight", p.norm2_w});
      out.push_back({pre + "norm2.bias", p.norm2_b});
      out.push_back({pre + "mlp.fc1.weight", p.fc1_w});
      out.push_back({pre + "mlp.fc1.bias", p.fc1_b});
      out.push_back({pre + "mlp.fc2.weight", p.fc2_w});
      out.push_back({pre + "mlp.fc2.bias", p.fc2_b});
    }
    return out;
  }

  // Frozen parameters carry no grad buffers and are never recorded as trainable.
  void set_frozen(bool frozen) {
    frozen_ = frozen;
    auto ps = parameters();
    set_trainable(ps, !frozen);
  }
  bool frozen() const { return frozen_; }

  // frames [T×H×W×3] -> patch rows [T×N×(P·P·3)], each row ordered (py, px, rgb).
  Tensor<T> patchify(const Tensor<T>& frames) const {
    check_frames(frames);
    const std::size_t nt = frames.dim(0), P = cfg_.patch, gh = cfg_.grid_h(), gw = cfg_.grid_w();
    const std::size_t W = cfg_.image_w, row = P * P * 3;
    Tensor<T> out = Tensor<T>::zeros({nt, gh * gw, row});
    auto& o = out.values();
    const auto& f = frames.values();
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
          T* dst = o.data() + ((t * gh + gy) * gw + gx) * row;
          for (std::size_t py = 0; py < P; ++py) {
            const T* src = f.data() + ((t * cfg_.image_h + gy * P + py) * W + gx * P) * 3;
            std::copy(src, src + P * 3, dst + py * P * 3);
          }
        }
    return out;
  }

  // frames [T×H×W×3] -> tokens [T×N×C]
  Tensor<T> patch_embed(const Tensor<T>& frames) const {
    Tensor<T> rows = patchify(frames);
    return add_trailing(linear(rows, patch_w_, patch_b_), pos_embed_);
  }

  // tokens [T×N×C] -> tokens [T×N×C]; attention is confined to each frame.
  Tensor<T> block_forward(const Tensor<T>& tokens, std::size_t index) const {
    const auto& p = blocks_.at(index);
    if (tokens.rank() != 3 || tokens.dim(1) != cfg_.tokens() || tokens.dim(2) != cfg_.dim) {
      throw DimensionError("block_forward: expected tokens [T×" + std::to_string(cfg_.tokens()) + "×" +
                           std::to_string(cfg_.dim) + "], got " + shape_str(tokens.shape()));
    }
    Tensor<T> h = layernorm(tokens, p.norm1_w, p.norm1_b);
    Tensor<T> a = multihead_attention(linear(h, p.qkv_w, p.qkv_b), cfg_.heads);
    Tensor<T> x = add(tokens, linear(a, p.proj_w, p.proj_b));
    Tensor<T> m = linear(gelu(linear(layernorm(x, p.norm2_w, p.norm2_b), p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
    return add(x, m);
  }

 private:
  void check_frames(const Tensor<T>& frames) const {
    if (frames.rank() != 4 || frames.dim(1) != cfg_.image_h || frames.dim(2) != cfg_.image_w ||
        frames.dim(3) != 3) {
      throw DimensionError("backbone: expected frames [T×" + std::to_string(cfg_.image_h) + "×" +
                           std::to_string(cfg_.image_w) + "×3], got " + shape_str(frames.shape()));
    }
  }

  BackboneConfig cfg_;
  Tensor<T> patch_w_, patch_b_, pos_embed_;
  std::vector<BlockParams<T>> blocks_;
  bool frozen_ = false;
};

}  // namespace chronotrack
