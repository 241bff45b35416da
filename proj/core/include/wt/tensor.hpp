#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace wt {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor. Storage is shared between handles; gradients are
// allocated (zeroed) only when the tensor participates in a traced graph.
// T is float for training runs and double for the gradient-check oracles.
template <class T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    const int64_t n = numel_of(shape);
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(static_cast<size_t>(n), T(0));
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(static_cast<size_t>(n), T(0));
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t;
    const int64_t n = numel_of(shape);
    if (n != static_cast<int64_t>(values.size())) {
      throw std::invalid_argument("tensor: " + shape_str(shape) + " needs " + std::to_string(n) +
                                  " values, got " + std::to_string(values.size()));
    }
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(static_cast<size_t>(n), T(0));
    return t;
  }

  int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t ndim() const { return shape.size(); }

  T* values() { return data->data(); }
  const T* values() const { return data->data(); }
  T* grads() { return grad->data(); }
  const T* grads() const { return grad->data(); }

  void ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<T>>(data->size(), T(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  // Deep copy of values (and shape); gradient buffer is fresh.
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<T>>(*data);
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(data->size(), T(0));
    return t;
  }
};

}  // namespace wt
