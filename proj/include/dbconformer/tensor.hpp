#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dbconformer/error.hpp"

namespace dbc {

namespace detail {

/// Cache-line aligned allocation. Vectorized reductions then see the same
/// memory alignment on every run, which keeps results bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace detail

using Buffer = std::vector<double, detail::AlignedAllocator<double>>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// `Tensor` is a handle: copies share storage (like a framework tensor).
/// Use `clone()` for an independent deep copy. The gradient buffer is
/// allocated lazily the first time a gradient flows into the tensor.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<Impl>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    impl_->value.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, Buffer values) : impl_(std::make_shared<Impl>()) {
    if (numel(shape) != values.size()) {
      throw DimensionError("shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
  }

  Tensor(Shape shape, const std::vector<double>& values) : Tensor(std::move(shape), Buffer(values.begin(), values.end())) {}
  Tensor(Shape shape, std::initializer_list<double> values) : Tensor(std::move(shape), Buffer(values)) {}

  static Tensor scalar(double v) { return Tensor({1}, Buffer{v}); }

  bool defined() const noexcept { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->value.size(); }

  std::span<double> data() { return impl_->value; }
  std::span<const double> data() const { return impl_->value; }
  double* ptr() { return impl_->value.data(); }
  const double* ptr() const { return impl_->value.data(); }
  double& operator[](std::size_t i) { return impl_->value[i]; }
  double operator[](std::size_t i) const { return impl_->value[i]; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer, allocated (zero-filled) on first access. Constness of
  /// the handle does not extend to the gradient: backward rules accumulate
  /// into the gradients of tensors they only read.
  std::span<double> grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
  void drop_grad() { impl_->grad.clear(); }

  /// Deep copy of values; the copy does not require grad.
  Tensor clone() const { return Tensor(impl_->shape, impl_->value); }

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    Buffer value;
    Buffer grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Tape of executed differentiable operations.
///
/// Operations append a backward closure while a `Graph::Scope` is active on
/// the calling thread. `backward` replays closures in exact reverse order of
/// recording; each closure adds into its inputs' gradients, so a tensor used
/// by several operations receives the sum of all path gradients.
class Graph {
 public:
  class Scope {
   public:
    explicit Scope(Graph& g) : prev_(active_slot()) { active_slot() = &g; }
    ~Scope() { active_slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph* prev_;
  };

  /// Graph recording on this thread, or nullptr (forward-only evaluation).
  static Graph* active() noexcept { return active_slot(); }

  void record(std::string op, std::function<void()> backward) {
    nodes_.push_back({std::move(op), std::move(backward)});
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::string& op_name(std::size_t i) const { return nodes_.at(i).op; }

  /// Indices of nodes in the order the last backward pass visited them.
  const std::vector<std::size_t>& visit_order() const noexcept { return visited_; }

  void backward(Tensor loss) {
    if (loss.size() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor requiring grad");
    loss.grad()[0] += 1.0;
    visited_.clear();
    visited_.reserve(nodes_.size());
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      visited_.push_back(i);
      nodes_[i].backward();
    }
  }

  void clear() {
    nodes_.clear();
    visited_.clear();
  }

 private:
  struct Node {
    std::string op;
    std::function<void()> backward;
  };

  static Graph*& active_slot() noexcept {
    thread_local Graph* g = nullptr;
    return g;
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> visited_;
};

namespace detail {

/// True when an op with these inputs must be recorded on the tape.
template <typename... Ts>
bool needs_tape(const Ts&... inputs) {
  if (!Graph::active()) return false;
  return ((inputs.defined() && inputs.requires_grad()) || ...);
}

inline bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

}  // namespace detail

}  // namespace dbc
