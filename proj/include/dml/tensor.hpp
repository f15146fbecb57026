#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dml/error.hpp"

namespace dml {

// (batch, channel, height, width)
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t numel() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  constexpr bool operator==(const Shape&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
}

inline std::string to_string(const Shape& s) { return detail::concat(s); }

/// Dense rank-4 tensor with shared storage. Copies are handles onto the same
/// buffer; use clone() for a deep copy. A tensor that requires grad owns a
/// grad buffer of identical shape from construction on.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : st_(std::make_shared<Storage>()) {
    if (shape.numel() == 0) throw ConfigError(detail::concat("tensor shape must be positive, got ", shape));
    st_->shape = shape;
    st_->data.assign(shape.numel(), fill);
    st_->requires_grad = requires_grad;
    if (requires_grad) st_->grad.assign(shape.numel(), T(0));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape.numel())
      throw ConfigError(detail::concat("tensor of shape ", shape, " needs ", shape.numel(), " values, got ",
                                       values.size()));
    Tensor t(shape, T(0), requires_grad);
    t.st_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor(Shape{}, value, requires_grad); }

  bool defined() const noexcept { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  std::size_t numel() const { return st_->data.size(); }

  std::span<T> data() { return st_->data; }
  std::span<const T> data() const { return st_->data; }

  bool requires_grad() const { return st_->requires_grad; }
  bool has_grad() const { return !st_->grad.empty(); }

  // Allocates a zero grad buffer on first use.
  std::span<T> grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
    return st_->grad;
  }
  std::span<const T> grad() const { return st_->grad; }

  void zero_grad() {
    if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }

  T& operator[](std::size_t i) { return st_->data[i]; }
  T operator[](std::size_t i) const { return st_->data[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    const Shape& s = st_->shape;
    return ((n * s.c + c) * s.h + y) * s.w + x;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return st_->data[index(n, c, y, x)]; }
  T at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const { return st_->data[index(n, c, y, x)]; }

  T item() const {
    if (numel() != 1) throw UsageError(detail::concat("item() on tensor of shape ", shape()));
    return st_->data[0];
  }

  Tensor clone() const {
    Tensor t = Tensor::from(shape(), st_->data, st_->requires_grad);
    if (has_grad()) t.st_->grad = st_->grad;
    return t;
  }

  // Flags an op output as differentiable without allocating its grad yet.
  void mark_requires_grad() { st_->requires_grad = true; }

  // Identity of the underlying buffer.
  bool same_storage(const Tensor& other) const noexcept { return st_ == other.st_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> st_;
};

/// Recording tape for reverse-mode differentiation. Ops append a backward
/// closure when any input requires grad; backward() replays them in exact
/// reverse recording order.
template <typename T>
class Graph {
 public:
  struct Op {
    std::string name;
    Tensor<T> output;
    std::function<void()> backward;
  };

  void record(std::string name, Tensor<T> output, std::function<void()> backward) {
    if (!recording_) return;
    ops_.push_back(Op{std::move(name), std::move(output), std::move(backward)});
  }

  // Inference passes switch recording off.
  void set_recording(bool on) noexcept { recording_ = on; }
  bool recording() const noexcept { return recording_; }

  // When enabled, piecewise ops (relu, maxpool2d) hash their branch
  // decisions, so callers can tell whether two forward passes took the same
  // linear piece.
  void track_branches(bool on) noexcept {
    track_ = on;
    branch_hash_ = 0xcbf29ce484222325ULL;
  }
  bool tracking_branches() const noexcept { return track_; }
  void mix_branch(std::uint64_t v) noexcept {
    branch_hash_ ^= v;
    branch_hash_ *= 0x100000001b3ULL;
  }
  std::uint64_t branch_hash() const noexcept { return branch_hash_; }

  std::size_t size() const noexcept { return ops_.size(); }
  const std::vector<Op>& ops() const noexcept { return ops_; }
  void clear() { ops_.clear(); }

  // Serial mode is the only mode; kept explicit so callers can assert it.
  static constexpr bool serial = true;

 private:
  std::vector<Op> ops_;
  bool recording_ = true;
  bool track_ = false;
  std::uint64_t branch_hash_ = 0xcbf29ce484222325ULL;
};

template <typename T>
void backward(const Tensor<T>& loss, Graph<T>& graph) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError(detail::concat("backward() needs a scalar loss, got shape ",
                                    loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  Tensor<T> root = loss;
  root.grad()[0] += T(1);
  const auto& ops = graph.ops();
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    // Outputs that never received gradient contribute nothing.
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw NumericError(detail::concat(op, ": non-finite value at element ", i));
  }
}

}  // namespace dml
