#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbert/tensor.hpp"

namespace mbert {

/// A trainable tensor with a stable name. `decay` selects decoupled weight decay.
template <class T>
struct NamedParam {
  std::string name;
  std::shared_ptr<Tensor<T>> tensor;
  bool decay = true;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 1e-5;
};

/// First/second moments per parameter, in the same order as the parameter list.
template <class T>
struct AdamWState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;

  static AdamWState fresh(std::span<const NamedParam<T>> params) {
    AdamWState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor->shape);
      s.v.emplace_back(p.tensor->shape);
    }
    return s;
  }
};

/// One decoupled-weight-decay Adam update using each parameter's accumulated grad.
/// Parameters without a grad buffer are treated as having zero gradient.
template <class T>
void adamw_step(std::span<const NamedParam<T>> params, AdamWState<T>& state, double lr,
                const AdamWConfig& cfg) {
  if (lr < 0.0) {
    throw std::invalid_argument("adamw_step: negative learning rate");
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adamw_step: optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i].tensor;
    if (state.m[i].shape != p.shape || state.v[i].shape != p.shape) {
      throw ShapeError("adamw_step", {p.shape, state.m[i].shape, state.v[i].shape}, params[i].name);
    }
    for (const T g : p.grad) {
      if (!std::isfinite(g)) {
        throw NumericError("adamw_step: non-finite gradient in '" + params[i].name + "' at step " +
                           std::to_string(state.t + 1));
      }
    }
  }

  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].tensor;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    const double decay = params[i].decay ? cfg.weight_decay : 0.0;
    const bool has_grad = p.has_grad();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = has_grad ? static_cast<double>(p.grad[j]) : 0.0;
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * g;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double theta = static_cast<double>(p.data[j]);
      theta *= 1.0 - lr * decay;
      theta -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      p.data[j] = static_cast<T>(theta);
    }
  }
}

/// Scales every gradient by max_norm / ‖g‖₂ when the global norm exceeds max_norm.
/// Returns the pre-clip norm. Norms within rounding of max_norm count as already
/// clipped, which keeps the operation idempotent.
template <class T>
double clip_global_norm(std::span<Tensor<T>* const> tensors, double max_norm) {
  if (!(max_norm > 0.0)) {
    throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  }
  double sq = 0.0;
  for (const auto* t : tensors) {
    for (const T g : t->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw NumericError("clip_global_norm: non-finite gradient norm");
  }
  const double slack = 64.0 * static_cast<double>(std::numeric_limits<T>::epsilon());
  if (norm > max_norm * (1.0 + slack)) {
    const double s = max_norm / norm;
    for (auto* t : tensors) {
      for (T& g : t->grad) g = static_cast<T>(static_cast<double>(g) * s);
    }
  }
  return norm;
}

template <class T>
double clip_global_norm(std::span<const NamedParam<T>> params, double max_norm) {
  std::vector<Tensor<T>*> ts;
  for (const auto& p : params) ts.push_back(p.tensor.get());
  return clip_global_norm<T>(std::span<Tensor<T>* const>(ts), max_norm);
}

// ---------------------------------------------------------------------------------

struct LrSchedule {
  double peak_lr = 5e-4;
  std::int64_t warmup_steps = 24'000;
  std::int64_t total_steps = 500'000;

  void validate() const {
    if (!(peak_lr > 0.0)) throw std::invalid_argument("LrSchedule: peak_lr must be positive");
    if (warmup_steps <= 0 || warmup_steps >= total_steps) {
      throw std::invalid_argument("LrSchedule: require 0 < warmup_steps < total_steps");
    }
  }
};

/// Linear warmup from 0 to peak over warmup_steps, then linear decay to 0 at total_steps.
/// Steps past the end clamp to 0; `warning`, when given, receives a note.
inline double lr_at(std::int64_t step, const LrSchedule& s, std::string* warning = nullptr) {
  if (step < 0) {
    throw std::invalid_argument("lr_at: negative step");
  }
  if (step > s.total_steps) {
    if (warning != nullptr) {
      *warning = "lr_at: step " + std::to_string(step) + " beyond total_steps " +
                 std::to_string(s.total_steps) + "; clamped to 0";
    }
    return 0.0;
  }
  if (step <= s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  return s.peak_lr * static_cast<double>(s.total_steps - step) /
         static_cast<double>(s.total_steps - s.warmup_steps);
}

}  // namespace mbert
