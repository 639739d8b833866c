#pragma once

#include <string>
#include <vector>

#include "chronotrack/rng.hpp"
#include "chronotrack/tensor.hpp"

namespace chronotrack {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

template <typename T>
void set_trainable(ParamList<T>& params, bool on) {
  for (auto& p : params) p.tensor.set_requires_grad(on);
}

// 64-bit FNV-1a over names and raw parameter bytes.
template <typename T>
std::uint64_t param_hash(const ParamList<T>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params) {
    feed(p.name.data(), p.name.size());
    feed(p.tensor.data().data(), p.tensor.size() * sizeof(T));
  }
  return h;
}

}  // namespace chronotrack
