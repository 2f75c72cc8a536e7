#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "koa/errors.hpp"

namespace koa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Element storage, maximally aligned.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

template <std::floating_point T>
constexpr DType dtype_of() {
  static_assert(std::same_as<T, float> || std::same_as<T, double>, "only f32 and f64 are supported");
  return std::same_as<T, float> ? DType::F32 : DType::F64;
}

// Dense row-major array with an optional gradient buffer of the same shape.
// The element type is a template parameter, so every tensor in one graph
// shares a dtype by construction.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}

  Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_size(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool is_scalar() const noexcept { return data_.size() == 1; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  Buffer<T>& storage() noexcept { return data_; }
  const Buffer<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (!is_scalar()) throw ArgumentError("item() on non-scalar tensor " + shape_string(shape_));
    return data_[0];
  }

  bool has_grad() const noexcept { return !grad_.empty(); }

  // Allocates a zero gradient if none is present.
  std::span<T> ensure_grad() {
    if (grad_.empty()) grad_.assign(data_.size(), T{0});
    return grad_;
  }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }
  void zero_grad() { grad_.assign(data_.size(), T{0}); }
  void clear_grad() noexcept {
    grad_.clear();
    grad_.shrink_to_fit();
  }

  // Same buffer, new shape with an equal element count.
  void reshape(Shape shape) {
    check_shape(shape);
    if (shape_size(shape) != data_.size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    shape_ = std::move(shape);
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }

  Shape shape_;
  Buffer<T> data_;
  Buffer<T> grad_;
};

template <std::floating_point T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <std::floating_point T>
TensorPtr<T> make_tensor(Shape shape, T fill = T{0}) {
  return std::make_shared<Tensor<T>>(std::move(shape), fill);
}

template <std::floating_point T>
TensorPtr<T> make_tensor(Shape shape, const std::vector<T>& data) {
  return std::make_shared<Tensor<T>>(std::move(shape), data);
}

template <std::floating_point T>
TensorPtr<T> make_scalar(T value) {
  return std::make_shared<Tensor<T>>(Shape{1}, value);
}

// Reverse-mode record of a forward pass. Each differentiable op pushes a
// closure that reads its output's gradient and accumulates into its inputs.
// A tape belongs to one training thread.
template <std::floating_point T>
class Tape {
 public:
  void record(const char* op_name, std::function<void()> backward_fn) {
    ops_.push_back({op_name, std::move(backward_fn)});
  }

  std::size_t size() const noexcept { return ops_.size(); }
  bool empty() const noexcept { return ops_.empty(); }
  void clear() { ops_.clear(); }

  std::vector<std::string> recorded_ops() const {
    std::vector<std::string> names;
    for (const auto& op : ops_) names.emplace_back(op.name);
    return names;
  }

  // Op names in the order the last backward() visited them.
  const std::vector<std::string>& last_replay() const noexcept { return replay_; }

  // Seeds d(loss)/d(loss) = 1 and replays the record in reverse order.
  void backward(const TensorPtr<T>& loss) {
    if (!loss || !loss->is_scalar())
      throw ArgumentError("backward() needs a scalar loss, got " +
                          (loss ? shape_string(loss->shape()) : std::string("null")));
    loss->ensure_grad()[0] += T{1};
    replay_.clear();
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      replay_.emplace_back(it->name);
      it->fn();
    }
    ops_.clear();
  }

 private:
  struct Entry {
    const char* name;
    std::function<void()> fn;
  };
  std::vector<Entry> ops_;
  std::vector<std::string> replay_;
};

template <std::floating_point T>
void backward(const TensorPtr<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

}  // namespace koa
