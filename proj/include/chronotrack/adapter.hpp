#pragma once

// Temporal adapter: strided conv down-projection, temporal aggregation at each
// down-sampled location, transposed-conv up-projection, residual add.
//
// The up-projection starts at exactly zero so a freshly built adapter is the
// identity map and the backbone's features are the starting point of training.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "chronotrack/ops.hpp"
#include "chronotrack/params.hpp"

namespace chronotrack {

enum class Aggregation { attn1d, conv1d, conv3d };
enum class Placement { all, early, later, alternating, explicit_slots };

inline std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::attn1d: return "attn1d";
    case Aggregation::conv1d: return "conv1d";
    case Aggregation::conv3d: return "conv3d";
  }
  return "?";
}

inline std::string_view to_string(Placement p) {
  switch (p) {
    case Placement::all: return "all";
    case Placement::early: return "early";
    case Placement::later: return "later";
    case Placement::alternating: return "alternating";
    case Placement::explicit_slots: return "explicit";
  }
  return "?";
}

inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "attn1d") return Aggregation::attn1d;
  if (s == "conv1d") return Aggregation::conv1d;
  if (s == "conv3d") return Aggregation::conv3d;
  throw ConfigError("unknown aggregation kind '" + std::string(s) + "' (attn1d, conv1d, conv3d)");
}

inline Placement parse_placement(std::string_view s) {
  if (s == "all") return Placement::all;
  if (s == "early") return Placement::early;
  if (s == "later") return Placement::later;
  if (s == "alternating") return Placement::alternating;
  if (s == "explicit") return Placement::explicit_slots;
  throw ConfigError("unknown placement '" + std::string(s) + "' (all, early, later, alternating, explicit)");
}

// Slot i sits between block i and block i+1, so a depth-L backbone has L-1 slots.
inline std::vector<std::size_t> placement_slots(Placement placement, std::size_t depth,
                                                const std::vector<std::size_t>& explicit_slots = {}) {
  if (depth < 2) {
    throw ConfigError("adapter placement needs a backbone of depth >= 2");
  }
  const std::size_t n = depth - 1;
  const std::size_t half = (n + 1) / 2;
  std::vector<std::size_t> slots;
  switch (placement) {
    case Placement::all:
      for (std::size_t i = 0; i < n; ++i) slots.push_back(i);
      break;
    case Placement::early:
      for (std::size_t i = 0; i < half; ++i) slots.push_back(i);
      break;
    case Placement::later:
      for (std::size_t i = n - half; i < n; ++i) slots.push_back(i);
      break;
    case Placement::alternating:
      for (std::size_t i = 0; i < n; i += 2) slots.push_back(i);
      break;
    case Placement::explicit_slots:
      slots = explicit_slots;
      std::sort(slots.begin(), slots.end());
      slots.erase(std::unique(slots.begin(), slots.end()), slots.end());
      break;
  }
  return slots;
}

struct AdapterConfig {
  std::size_t stride = 2;
  std::size_t window = 13;  // N, odd; radius k = (N-1)/2
  std::size_t c_in = 64;
  std::size_t c_out = 16;
  Aggregation aggregation = Aggregation::attn1d;
  Placement placement = Placement::all;
  std::vector<std::size_t> slots;  // used with Placement::explicit_slots
  bool temporal_bias = false;

  std::size_t radius() const { return (window - 1) / 2; }
  std::size_t down_kernel() const { return 2 * (stride / 2) + 1; }
  std::size_t down_pad() const { return stride / 2; }
  std::size_t up_kernel() const { return 2 * stride - stride % 2; }
  std::size_t up_pad() const { return (up_kernel() - stride) / 2; }

  void validate(std::size_t grid_h, std::size_t grid_w) const {
    if (window < 1 || window % 2 == 0) {
      throw ConfigError("adapter: window N must be odd and >= 1, got " + std::to_string(window));
    }
    if (stride < 1) throw ConfigError("adapter: stride must be >= 1");
    if (grid_h % stride != 0 || grid_w % stride != 0) {
      throw ConfigError("adapter: feature grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                        " is not divisible by stride " + std::to_string(stride));
    }
    if (c_out == 0 || c_out >= c_in) {
      throw ConfigError("adapter: bottleneck width " + std::to_string(c_out) +
                        " must be positive and below C_in " + std::to_string(c_in));
    }
  }
};

template <typename T>
class TemporalAdapter {
 public:
  TemporalAdapter() = default;

  static TemporalAdapter init(const AdapterConfig& cfg, std::uint64_t seed) {
    TemporalAdapter a;
    a.cfg_ = cfg;
    Rng rng(seed);
    const std::size_t ci = cfg.c_in, co = cfg.c_out, kd = cfg.down_kernel(), ku = cfg.up_kernel(),
                      n = cfg.window;
    auto bound = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    a.down_w_ = uniform_init<T>({kd, kd, ci, co}, bound(kd * kd * ci), rng);
    a.down_b_ = Tensor<T>::zeros({co});
    switch (cfg.aggregation) {
      case Aggregation::attn1d:
        a.q_w_ = uniform_init<T>({co, co}, bound(co), rng);
        a.q_b_ = Tensor<T>::zeros({co});
        a.k_w_ = uniform_init<T>({co, co}, bound(co), rng);
        a.k_b_ = Tensor<T>::zeros({co});
        a.v_w_ = uniform_init<T>({co, co}, bound(co), rng);
        a.v_b_ = Tensor<T>::zeros({co});
        if (cfg.temporal_bias) a.t_bias_ = Tensor<T>::zeros({n});
        break;
      case Aggregation::conv1d:
        a.tconv_w_ = uniform_init<T>({n, co}, bound(n), rng);
        a.tconv_b_ = Tensor<T>::zeros({co});
        break;
      case Aggregation::conv3d:
        a.conv3_w_ = uniform_init<T>({n, 3, 3, co, co}, bound(n * 9 * co), rng);
        a.conv3_b_ = Tensor<T>::zeros({co});
        break;
    }
    a.up_w_ = Tensor<T>::zeros({ku, ku, co, ci});
    a.up_b_ = Tensor<T>::zeros({ci});
    auto ps = a.parameters("");
    set_trainable(ps, true);
    return a;
  }

  const AdapterConfig& config() const { return cfg_; }

  ParamList<T> parameters(const std::string& prefix) const {
    ParamList<T> out{{prefix + "down.weight", down_w_}, {prefix + "down.bias", down_b_}};
    switch (cfg_.aggregation) {
      case Aggregation::attn1d:
        out.push_back({prefix + "attn.q.weight", q_w_});
        out.push_back({prefix + "attn.q.bias", q_b_});
        out.push_back({prefix + "attn.k.weight", k_w_});
        out.push_back({prefix + "attn.k.bias", k_b_});
        out.push_back({prefix + "attn.v.weight", v_w_});
        out.push_back({prefix + "attn.v.bias", v_b_});
        if (t_bias_.defined()) out.push_back({prefix + "attn.temporal_bias", t_bias_});
        break;
      case Aggregation::conv1d:
        out.push_back({prefix + "tconv.weight", tconv_w_});
        out.push_back({prefix + "tconv.bias", tconv_b_});
        break;
      case Aggregation::conv3d:
        out.push_back({prefix + "conv3d.weight", conv3_w_});
        out.push_back({prefix + "conv3d.bias", conv3_b_});
        break;
    }
    out.push_back({prefix + "up.weight", up_w_});
    out.push_back({prefix + "up.bias", up_b_});
    return out;
  }

  // Mutable access by the names parameters() reports (without prefix).
  Tensor<T>* find(std::string_view name) {
    const std::pair<std::string_view, Tensor<T>*> table[] = {
        {"down.weight", &down_w_},   {"down.bias", &down_b_},     {"attn.q.weight", &q_w_},
        {"attn.q.bias", &q_b_},      {"attn.k.weight", &k_w_},    {"attn.k.bias", &k_b_},
        {"attn.v.weight", &v_w_},    {"attn.v.bias", &v_b_},      {"attn.temporal_bias", &t_bias_},
        {"tconv.weight", &tconv_w_}, {"tconv.bias", &tconv_b_},   {"conv3d.weight", &conv3_w_},
        {"conv3d.bias", &conv3_b_},  {"up.weight", &up_w_},       {"up.bias", &up_b_}};
    for (const auto& [n, t] : table) {
      if (n == name) return t->defined() ? t : nullptr;
    }
    return nullptr;
  }

  // [T×Hp×Wp×C_in] -> [T×Hp'×Wp'×C_out], per frame.
  Tensor<T> down_project(const Tensor<T>& f_in) const {
    check_input(f_in);
    return conv2d(f_in, down_w_, down_b_, cfg_.stride, cfg_.down_pad());
  }

  Tensor<T> aggregate(const Tensor<T>& f_down) const {
    switch (cfg_.aggregation) {
      case Aggregation::attn1d: {
        Tensor<T> q = linear(f_down, q_w_, q_b_);
        Tensor<T> k = linear(f_down, k_w_, k_b_);
        Tensor<T> v = linear(f_down, v_w_, v_b_);
        return temporal_window_attention(q, k, v, cfg_.radius(), t_bias_);
      }
      case Aggregation::conv1d:
        return temporal_conv1d(f_down, tconv_w_, tconv_b_);
      case Aggregation::conv3d:
        return conv3d(f_down, conv3_w_, conv3_b_);
    }
    throw ConfigError("adapter: unknown aggregation kind");
  }

  // [T×Hp'×Wp'×C_out] -> [T×Hp×Wp×C_in]
  Tensor<T> up_project(const Tensor<T>& f_attn) const {
    return conv_transpose2d(f_attn, up_w_, up_b_, cfg_.stride, cfg_.up_pad());
  }

  Tensor<T> forward(const Tensor<T>& f_in) const {
    Tensor<T> up = up_project(aggregate(down_project(f_in)));
    if (up.shape() != f_in.shape()) {
      throw DimensionError("adapter: up-projection produced " + shape_str(up.shape()) +
                           " for input " + shape_str(f_in.shape()));
    }
    return add(up, f_in);
  }

 private:
  void check_input(const Tensor<T>& f) const {
    if (f.rank() != 4 || f.dim(3) != cfg_.c_in) {
      throw DimensionError("adapter: expected [T×Hp×Wp×" + std::to_string(cfg_.c_in) + "], got " +
                           shape_str(f.shape()));
    }
    if (f.dim(1) % cfg_.stride != 0 || f.dim(2) % cfg_.stride != 0) {
      throw ConfigError("adapter: grid " + std::to_string(f.dim(1)) + "x" + std::to_string(f.dim(2)) +
                        " is not divisible by stride " + std::to_string(cfg_.stride));
    }
  }

  AdapterConfig cfg_;
  Tensor<T> down_w_, down_b_;
  Tensor<T> q_w_, q_b_, k_w_, k_b_, v_w_, v_b_, t_bias_;
  Tensor<T> tconv_w_, tconv_b_;
  Tensor<T> conv3_w_, conv3_b_;
  Tensor<T> up_w_, up_b_;
};

// Independent adapters keyed by slot.
template <typename T>
class AdapterSet {
 public:
  AdapterSet() = default;

  static AdapterSet init(const AdapterConfig& cfg, std::size_t depth, std::size_t grid_h,
                         std::size_t grid_w, std::uint64_t seed) {
    cfg.validate(grid_h, grid_w);
    AdapterSet s;
    s.cfg_ = cfg;
    for (std::size_t slot : placement_slots(cfg.placement, depth, cfg.slots)) {
      if (slot + 1 >= depth) {
        throw ConfigError("adapter slot " + std::to_string(slot) + " out of range for depth " +
                          std::to_string(depth));
      }
      s.adapters_.emplace(slot, TemporalAdapter<T>::init(cfg, mix_seed(seed, 0xA0 + slot)));
    }
    return s;
  }

  const AdapterConfig& config() const { return cfg_; }
  bool empty() const { return adapters_.empty(); }
  std::size_t size() const { return adapters_.size(); }

  std::vector<std::size_t> slots() const {
    std::vector<std::size_t> out;
    for (const auto& [slot, a] : adapters_) out.push_back(slot);
    return out;
  }

  const TemporalAdapter<T>* at_slot(std::size_t slot) const {
    auto it = adapters_.find(slot);
    return it == adapters_.end() ? nullptr : &it->second;
  }
  TemporalAdapter<T>* at_slot(std::size_t slot) {
    auto it = adapters_.find(slot);
    return it == adapters_.end() ? nullptr : &it->second;
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (const auto& [slot, a] : adapters_) {
      auto ps = a.parameters("adapter." + std::to_string(slot) + ".");
      out.insert(out.end(), ps.begin(), ps.end());
    }
    return out;
  }

 private:
  AdapterConfig cfg_;
  std::map<std::size_t, TemporalAdapter<T>> adapters_;
};

}  // namespace chronotrack
