#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mbert/errors.hpp"

namespace mbert {

/// Dense row-major tensor. `grad` is either empty or has exactly the size of `data`.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {}

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor", {shape}, "data length " + std::to_string(data.size()));
    }
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  /// Trailing dimension; every kernel treats a tensor as [rows, cols].
  std::size_t cols() const noexcept { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data.size() / cols(); }

  bool has_grad() const noexcept { return !grad.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) {
      grad.assign(data.size(), T{0});
    }
  }
  void zero_grad() {
    if (!grad.empty()) {
      std::fill(grad.begin(), grad.end(), T{0});
    }
  }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  Tensor reshaped(Shape s) const {
    if (numel(s) != data.size()) {
      throw ShapeError("reshape", {shape, s});
    }
    return Tensor(std::move(s), data);
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) {
      out.data[i] = static_cast<U>(data[i]);
    }
    return out;
  }
};

}  // namespace mbert
