#pragma once

#include <optional>

#include "chronotrack/adapter.hpp"
#include "chronotrack/backbone.hpp"

namespace chronotrack {

// frames [T×H×W×3] -> features [T×Hp×Wp×C]. Frames are processed
// independently except inside adapters, which see the whole clip at once.
template <typename T>
Tensor<T> extract_features(const Backbone<T>& backbone, const Tensor<T>& frames,
                           const AdapterSet<T>* adapters = nullptr) {
  const auto& cfg = backbone.config();
  const std::size_t depth = backbone.depth();
  if (adapters != nullptr) {
    for (std::size_t slot : adapters->slots()) {
      if (slot + 1 >= depth) {
        throw ConfigError("adapter slot " + std::to_string(slot) + " out of range for backbone depth " +
                          std::to_string(depth));
      }
    }
  }
  const std::size_t nt = frames.dim(0);
  const Shape grid{nt, cfg.grid_h(), cfg.grid_w(), cfg.dim};
  const Shape seq{nt, cfg.tokens(), cfg.dim};
  Tensor<T> x = backbone.patch_embed(frames);
  for (std::size_t i = 0; i < depth; ++i) {
    x = backbone.block_forward(x, i);
    if (adapters != nullptr) {
      if (const auto* a = adapters->at_slot(i)) {
        x = reshape(a->forward(reshape(x, grid)), seq);
      }
    }
  }
  return reshape(x, grid);
}

template <typename T>
struct Model {
  Backbone<T> backbone;
  std::optional<AdapterSet<T>> adapters;

  const AdapterSet<T>* adapter_ptr() const { return adapters ? &*adapters : nullptr; }

  Tensor<T> features(const Tensor<T>& frames) const {
    return extract_features(backbone, frames, adapter_ptr());
  }

  ParamList<T> parameters() const {
    ParamList<T> ps = backbone.parameters();
    if (adapters) {
      auto a = adapters->parameters();
      ps.insert(ps.end(), a.begin(), a.end());
    }
    return ps;
  }
};

}  // namespace chronotrack
