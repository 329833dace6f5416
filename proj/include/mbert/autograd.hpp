#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mbert/tensor.hpp"

namespace mbert {

/// Handle to a tensor participating in a recorded computation.
template <class T>
struct Var {
  std::shared_ptr<Tensor<T>> node;
  bool requires_grad = false;

  const Tensor<T>& value() const { return *node; }
  Tensor<T>& tensor() const { return *node; }
  const Shape& shape() const { return node->shape; }
};

/// Reverse-mode tape. Operations append a backward closure for every output that
/// depends on a grad-requiring input; `backward` replays them in reverse order.
///
/// Parameters enter through `param`, which aliases the caller's tensor so gradients
/// accumulate directly into `Tensor::grad`. A tape constructed with `record = false`
/// evaluates forward values only.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tensor<T>&)>;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> param(std::shared_ptr<Tensor<T>> p) const { return {std::move(p), record_}; }

  Var<T> constant(Tensor<T> t) const {
    return {std::make_shared<Tensor<T>>(std::move(t)), false};
  }

  /// Registers `out` as the result of an op. `bw` receives the output (with its grad).
  template <class... Inputs>
  Var<T> emit(Tensor<T> out, Backward bw, const Inputs&... inputs) {
    auto node = std::make_shared<Tensor<T>>(std::move(out));
    bool needs = record_ && (inputs.requires_grad || ...);
    if (needs) {
      entries_.push_back({node, std::move(bw)});
    }
    return {std::move(node), needs};
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold a single element.
  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) {
      throw ShapeError("backward", {loss.shape()}, "loss must be scalar");
    }
    if (!loss.requires_grad) {
      return;
    }
    loss.node->ensure_grad();
    loss.node->grad[0] += T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->out->has_grad()) {
        it->backward(*it->out);
      }
    }
  }

  void clear() { entries_.clear(); }
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<Tensor<T>> out;
    Backward backward;
  };

  bool record_;
  std::vector<Entry> entries_;
};

}  // namespace mbert
