#pragma once

// Dense row-major tensors with a tape-based reverse-mode autodiff.
//
// A Tensor is a cheap handle (shared ownership) onto a TensorImpl holding the
// shape, the contiguous data buffer and an optional gradient buffer. Ops that
// see at least one input with requires_grad while a Graph is active append a
// node to that graph; Graph::backward walks the nodes in reverse insertion
// order.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace chronotrack {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "tensors are f32 or f64");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  int node = -1;        // index of producing node in the active graph, -1 for leaves
  const void* graph = nullptr;
};

template <typename T>
class Graph;

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    const std::size_t n = numel(shape);
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(n, value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T value) { return from({}, {value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (size() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
  }

  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) {
      impl_->grad.clear();
      impl_->grad.shrink_to_fit();
    }
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }

  // Zero-filled grad buffer, allocated on first use.
  // Handle semantics: callable on const handles held by backward closures.
  std::vector<T>& grad_buffer() const {
    if (impl_->grad.size() != impl_->data.size()) {
      impl_->grad.assign(impl_->data.size(), T(0));
    }
    return impl_->grad;
  }

  void zero_grad() {
    if (!impl_->grad.empty()) {
      std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }
  }

  // Deep copy without graph history.
  Tensor detach() const {
    Tensor t = from(shape(), values());
    return t;
  }

  bool is_leaf() const { return impl_->node < 0; }
  int node() const { return impl_->node; }

  TensorImpl<T>* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<T>>& shared() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
class Graph {
 public:
  struct Node {
    std::string_view op;
    std::vector<int> parents;  // producing node of each input, -1 for leaves
    std::shared_ptr<TensorImpl<T>> output;
    std::function<void()> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph*& active() {
    thread_local Graph* current = nullptr;
    return current;
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  int append(std::string_view op, std::vector<int> parents, std::shared_ptr<TensorImpl<T>> output,
             std::function<void()> backward) {
    const int id = static_cast<int>(nodes_.size());
    output->node = id;
    output->graph = this;
    nodes_.push_back({op, std::move(parents), std::move(output), std::move(backward)});
    return id;
  }

  void backward(Tensor<T> root) {
    if (root.size() != 1) {
      throw ArgumentError("backward root must be a scalar, got shape " + shape_str(root.shape()));
    }
    if (root.node() < 0 || root.impl()->graph != this) {
      throw ArgumentError("backward root is not on this graph");
    }
    for (auto& n : nodes_) {
      std::fill(n.output->grad.begin(), n.output->grad.end(), T(0));
    }
    root.grad_buffer()[0] = T(1);
    for (int i = root.node(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.output->grad.empty()) {
        continue;
      }
      n.backward();
    }
  }

  // Releases saved activations; tensors produced on this graph become leaves.
  void clear() {
    for (auto& n : nodes_) {
      n.output->node = -1;
      n.output->graph = nullptr;
    }
    nodes_.clear();
  }

  ~Graph() { clear(); }

 private:
  std::vector<Node> nodes_;
};

// Makes a graph the recording target for the current thread within a scope.
template <typename T>
class GraphScope {
 public:
  explicit GraphScope(Graph<T>& g) : previous_(Graph<T>::active()) { Graph<T>::active() = &g; }
  ~GraphScope() { Graph<T>::active() = previous_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<T>* previous_;
};

template <typename T>
void backward(Tensor<T> root) {
  if (root.size() != 1) {
    throw ArgumentError("backward root must be a scalar, got shape " + shape_str(root.shape()));
  }
  auto* g = static_cast<Graph<T>*>(const_cast<void*>(root.impl()->graph));
  if (g == nullptr) {
    throw ArgumentError("backward root is not on a graph");
  }
  g->backward(root);
}

namespace detail {

// Registers `out` as produced by `op` from `inputs` when recording is on.
// The closure reads out's grad and accumulates into whichever inputs need it.
template <typename T, typename F>
void record(std::string_view op, Tensor<T>& out, std::initializer_list<Tensor<T>> inputs, F&& fn) {
  Graph<T>* g = Graph<T>::active();
  if (g == nullptr) {
    return;
  }
  bool any = false;
  std::vector<int> parents;
  for (const auto& in : inputs) {
    if (!in.defined()) {
      continue;
    }
    any = any || in.requires_grad();
    parents.push_back(in.impl()->graph == g ? in.node() : -1);
  }
  if (!any) {
    return;
  }
  out.set_requires_grad(true);
  g->append(op, std::move(parents), out.shared(), std::forward<F>(fn));
}

inline void require(bool ok, const std::string& what) {
  if (!ok) {
    throw DimensionError(what);
  }
}

}  // namespace detail

// Max over elements of |analytic - central difference| / max(1, |central difference|)
// for a scalar-valued f. x is perturbed in place and restored.
template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, T eps) {
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Graph<T> g;
    GraphScope<T> scope(g);
    Tensor<T> y = f(x);
    if (y.size() != 1) {
      throw ArgumentError("grad_check needs a scalar function");
    }
    g.backward(y);
  }
  std::vector<T> analytic(x.size(), T(0));
  if (x.has_grad()) {
    std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  }
  T worst = 0;
  auto& xs = x.values();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const T saved = xs[i];
    xs[i] = saved + eps;
    const T up = f(x).item();
    xs[i] = saved - eps;
    const T down = f(x).item();
    xs[i] = saved;
    const T numeric = (up - down) / (T(2) * eps);
    const T err = std::abs(analytic[i] - numeric) / std::max(T(1), std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace chronotrack
