#pragma once

// Differentiable kernels over row-major tensors. Every kernel views its operands as
// [rows, cols] with cols = trailing dimension, computes the forward value eagerly, and
// registers a backward closure on the tape when any input requires a gradient.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mbert/autograd.hpp"
#include "mbert/tensor.hpp"

namespace mbert {

inline constexpr std::int32_t kIgnoreLabel = -100;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
MatMap<T> as_mat(std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return MatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
ConstMatMap<T> as_mat(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(v.data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <class T>
std::vector<T>& grad_of(const Var<T>& v) {
  v.node->ensure_grad();
  return v.node->grad;
}

inline void require_rank2(const char* kernel, const Shape& s) {
  if (s.size() != 2) {
    throw ShapeError(kernel, {s}, "expected rank 2");
  }
}

template <class T>
Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s;
  if (out.empty()) {
    out.push_back(last);
  } else {
    out.back() = last;
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------------
// Linear algebra

/// a[m,k] · b[k,n]
template <class T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw ShapeError("matmul", {A.shape, B.shape});
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> out({m, n});
  detail::as_mat(out.data, m, n).noalias() = detail::as_mat(A.data, m, k) * detail::as_mat(B.data, k, n);
  return tape.emit(
      std::move(out),
      [a, b, m, k, n](Tensor<T>& o) {
        auto dO = detail::as_mat(std::as_const(o.grad), m, n);
        if (a.requires_grad) {
          detail::as_mat(detail::grad_of(a), m, k).noalias() +=
              dO * detail::as_mat(b.value().data, k, n).transpose();
        }
        if (b.requires_grad) {
          detail::as_mat(detail::grad_of(b), k, n).noalias() +=
              detail::as_mat(a.value().data, m, k).transpose() * dO;
        }
      },
      a, b);
}

/// x[..., k] · w[n, k]ᵀ: weights stored output-major, as in a dense layer.
template <class T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& w) {
  const auto& X = x.value();
  const auto& W = w.value();
  if (W.rank() != 2 || X.cols() != W.dim(1)) {
    throw ShapeError("linear", {X.shape, W.shape});
  }
  const std::size_t m = X.rows(), k = W.dim(1), n = W.dim(0);
  Tensor<T> out(detail::with_last<T>(X.shape, n));
  detail::as_mat(out.data, m, n).noalias() =
      detail::as_mat(X.data, m, k) * detail::as_mat(W.data, n, k).transpose();
  return tape.emit(
      std::move(out),
      [x, w, m, k, n](Tensor<T>& o) {
        auto dO = detail::as_mat(std::as_const(o.grad), m, n);
        if (x.requires_grad) {
          detail::as_mat(detail::grad_of(x), m, k).noalias() +=
              dO * detail::as_mat(w.value().data, n, k);
        }
        if (w.requires_grad) {
          detail::as_mat(detail::grad_of(w), n, k).noalias() +=
              dO.transpose() * detail::as_mat(x.value().data, m, k);
        }
      },
      x, w);
}

template <class T>
Var<T> transpose(Tape<T>& tape, const Var<T>& a) {
  const auto& A = a.value();
  detail::require_rank2("transpose", A.shape);
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor<T> out({n, m});
  detail::as_mat(out.data, n, m) = detail::as_mat(A.data, m, n).transpose();
  return tape.emit(
      std::move(out),
      [a, m, n](Tensor<T>& o) {
        detail::as_mat(detail::grad_of(a), m, n) +=
            detail::as_mat(std::as_const(o.grad), n, m).transpose();
      },
      a);
}

// ---------------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add", {a.shape(), b.shape()});
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = a.value().data[i] + b.value().data[i];
  }
  return tape.emit(
      std::move(out),
      [a, b](Tensor<T>& o) {
        for (const Var<T>* v : {&a, &b}) {
          if (v->requires_grad) {
            auto& g = detail::grad_of(*v);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
          }
        }
      },
      a, b);
}

/// a[rows, n] + bias[n] broadcast over rows.
template <class T>
Var<T> add_row(Tape<T>& tape, const Var<T>& a, const Var<T>& bias) {
  const std::size_t n = a.value().cols();
  if (bias.value().size() != n) {
    throw ShapeError("add_row", {a.shape(), bias.shape()});
  }
  const std::size_t rows = a.value().rows();
  Tensor<T> out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      out.data[r * n + c] = a.value().data[r * n + c] + bias.value().data[c];
    }
  }
  return tape.emit(
      std::move(out),
      [a, bias, rows, n](Tensor<T>& o) {
        if (a.requires_grad) {
          auto& g = detail::grad_of(a);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (bias.requires_grad) {
          auto& g = detail::grad_of(bias);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < n; ++c) g[c] += o.grad[r * n + c];
          }
        }
      },
      a, bias);
}

template <class T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul", {a.shape(), b.shape()});
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = a.value().data[i] * b.value().data[i];
  }
  return tape.emit(
      std::move(out),
      [a, b](Tensor<T>& o) {
        if (a.requires_grad) {
          auto& g = detail::grad_of(a);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * b.value().data[i];
        }
        if (b.requires_grad) {
          auto& g = detail::grad_of(b);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * a.value().data[i];
        }
      },
      a, b);
}

template <class T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * s;
  return tape.emit(
      std::move(out),
      [a, s](Tensor<T>& o) {
        auto& g = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
      },
      a);
}

/// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(Tape<T>& tape, const Var<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.value().data[i];
    out.data[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  return tape.emit(
      std::move(out),
      [a](Tensor<T>& o) {
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        auto& g = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T x = a.value().data[i];
          const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
          const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
          g[i] += o.grad[i] * (cdf + x * pdf);
        }
      },
      a);
}

// ---------------------------------------------------------------------------------
// Row-wise normalisers

template <class T>
void softmax_rows(std::span<T> values, std::size_t cols) {
  for (std::size_t r = 0; r * cols < values.size(); ++r) {
    T* row = values.data() + r * cols;
    const T mx = *std::max_element(row, row + cols);
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
  }
}

template <class T>
Var<T> softmax(Tape<T>& tape, const Var<T>& a) {
  const std::size_t cols = a.value().cols();
  Tensor<T> out = a.value();
  out.grad.clear();
  softmax_rows<T>(out.data, cols);
  return tape.emit(
      std::move(out),
      [a, cols](Tensor<T>& o) {
        auto& g = detail::grad_of(a);
        for (std::size_t r = 0; r < o.rows(); ++r) {
          T dot = 0;
          for (std::size_t c = 0; c < cols; ++c) dot += o.grad[r * cols + c] * o.data[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            g[r * cols + c] += o.data[r * cols + c] * (o.grad[r * cols + c] - dot);
          }
        }
      },
      a);
}

/// Layer normalisation over the trailing dimension with optional gain (no bias).
template <class T>
Var<T> layernorm(Tape<T>& tape, const Var<T>& x, const Var<T>* gamma, T eps) {
  const auto& X = x.value();
  const std::size_t n = X.cols(), rows = X.rows();
  if (gamma != nullptr && gamma->value().size() != n) {
    throw ShapeError("layernorm", {X.shape, gamma->shape()});
  }
  auto xhat = std::make_shared<std::vector<T>>(X.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(X.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = X.data.data() + r * n;
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += in[c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= T(n);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (in[c] - mean) * rs;
      (*xhat)[r * n + c] = h;
      out.data[r * n + c] = gamma != nullptr ? h * gamma->value().data[c] : h;
    }
  }
  const Var<T> g = gamma != nullptr ? *gamma : Var<T>{};
  auto bw = [x, g, xhat, rstd, rows, n](Tensor<T>& o) {
    const bool affine = static_cast<bool>(g.node);
    if (affine && g.requires_grad) {
      auto& gg = detail::grad_of(g);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) gg[c] += o.grad[r * n + c] * (*xhat)[r * n + c];
      }
    }
    if (!x.requires_grad) return;
    auto& gx = detail::grad_of(x);
    std::vector<T> dh(n);
    for (std::size_t r = 0; r < rows; ++r) {
      T mean_dh = 0, mean_dh_h = 0;
      for (std::size_t c = 0; c < n; ++c) {
        dh[c] = o.grad[r * n + c] * (affine ? g.value().data[c] : T(1));
        mean_dh += dh[c];
        mean_dh_h += dh[c] * (*xhat)[r * n + c];
      }
      mean_dh /= T(n);
      mean_dh_h /= T(n);
      for (std::size_t c = 0; c < n; ++c) {
        gx[r * n + c] += (*rstd)[r] * (dh[c] - mean_dh - (*xhat)[r * n + c] * mean_dh_h);
      }
    }
  };
  if (gamma != nullptr) {
    return tape.emit(std::move(out), bw, x, *gamma);
  }
  return tape.emit(std::move(out), bw, x);
}

// ---------------------------------------------------------------------------------
// Indexing

/// Rows of `weight` selected by `ids`; out-of-range ids are rejected.
template <class T>
Var<T> embedding(Tape<T>& tape, const Var<T>& weight, std::span<const std::int32_t> ids) {
  const auto& W = weight.value();
  detail::require_rank2("embedding", W.shape);
  const std::size_t vocab = W.dim(0), d = W.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding", {W.shape}, "token id " + std::to_string(id) + " out of range");
    }
  }
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(W.data.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return tape.emit(
      std::move(out),
      [weight, idx = std::move(idx), d](Tensor<T>& o) {
        auto& g = detail::grad_of(weight);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < d; ++c) g[idx[i] * d + c] += o.grad[i * d + c];
        }
      },
      weight);
}

template <class T>
Var<T> gather_rows(Tape<T>& tape, const Var<T>& a, std::span<const std::size_t> rows) {
  const std::size_t n = a.value().cols(), total = a.value().rows();
  for (auto r : rows) {
    if (r >= total) {
      throw ShapeError("gather_rows", {a.shape()}, "row " + std::to_string(r) + " out of range");
    }
  }
  Tensor<T> out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape.emit(
      std::move(out),
      [a, idx = std::move(idx), n](Tensor<T>& o) {
        auto& g = detail::grad_of(a);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < n; ++c) g[idx[i] * n + c] += o.grad[i * n + c];
        }
      },
      a);
}

/// Columns [begin, end) of every row.
template <class T>
Var<T> slice_cols(Tape<T>& tape, const Var<T>& a, std::size_t begin, std::size_t end) {
  const std::size_t n = a.value().cols(), rows = a.value().rows();
  if (begin >= end || end > n) {
    throw ShapeError("slice_cols", {a.shape()},
                     "range [" + std::to_string(begin) + ", " + std::to_string(end) + ")");
  }
  const std::size_t w = end - begin;
  Tensor<T> out(detail::with_last<T>(a.shape(), w));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(r * n + begin), w,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  return tape.emit(
      std::move(out),
      [a, begin, w, n, rows](Tensor<T>& o) {
        auto& g = detail::grad_of(a);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < w; ++c) g[r * n + begin + c] += o.grad[r * w + c];
        }
      },
      a);
}

template <class T>
Var<T> concat_cols(Tape<T>& tape, const std::vector<Var<T>>& parts) {
  if (parts.empty()) {
    throw ShapeError("concat_cols", {}, "no operands");
  }
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  std::vector<Shape> shapes;
  for (const auto& p : parts) {
    shapes.push_back(p.shape());
    total += p.value().cols();
  }
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw ShapeError("concat_cols", shapes);
  }
  Tensor<T> out(detail::with_last<T>(parts.front().shape(), total));
  std::size_t offset = 0;
  bool any = false;
  for (const auto& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.value().data.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  out.data.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += w;
    any = any || p.requires_grad;
  }
  Var<T> flag{nullptr, any};
  return tape.emit(
      std::move(out),
      [parts, rows, total](Tensor<T>& o) {
        std::size_t off = 0;
        for (const auto& p : parts) {
          const std::size_t w = p.value().cols();
          if (p.requires_grad) {
            auto& g = detail::grad_of(p);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < w; ++c) g[r * w + c] += o.grad[r * total + off + c];
            }
          }
          off += w;
        }
      },
      flag);
}

// ---------------------------------------------------------------------------------
// Rotary position encoding

/// Rotates each consecutive pair (2i, 2i+1) of every head by pos · theta^(-2i/head_dim).
/// `data` is [rows, num_heads * head_dim]; `positions` holds one position per row.
/// A negative `direction` applies the inverse rotation.
template <class T>
void rotate_pairs(std::span<T> data, std::span<const std::int64_t> positions, std::size_t num_heads,
                  std::size_t head_dim, double theta, int direction = 1) {
  const std::size_t width = num_heads * head_dim;
  const std::size_t half = head_dim / 2;
  std::vector<double> inv_freq(half);
  for (std::size_t i = 0; i < half; ++i) {
    inv_freq[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  }
  std::vector<T> cs(half), sn(half);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(positions[r]) * inv_freq[i];
      cs[i] = static_cast<T>(std::cos(angle));
      sn[i] = static_cast<T>(direction * std::sin(angle));
    }
    T* row = data.data() + r * width;
    for (std::size_t h = 0; h < num_heads; ++h) {
      T* v = row + h * head_dim;
      for (std::size_t i = 0; i < half; ++i) {
        const T x0 = v[2 * i], x1 = v[2 * i + 1];
        v[2 * i] = x0 * cs[i] - x1 * sn[i];
        v[2 * i + 1] = x0 * sn[i] + x1 * cs[i];
      }
    }
  }
}

template <class T>
Var<T> rope(Tape<T>& tape, const Var<T>& x, std::span<const std::int64_t> positions,
            std::size_t num_heads, double theta) {
  const std::size_t width = x.value().cols(), rows = x.value().rows();
  if (num_heads == 0 || width % num_heads != 0 || (width / num_heads) % 2 != 0 ||
      positions.size() != rows) {
    throw ShapeError("rope", {x.shape(), Shape{positions.size()}},
                     "heads " + std::to_string(num_heads));
  }
  const std::size_t head_dim = width / num_heads;
  Tensor<T> out = x.value();
  out.grad.clear();
  rotate_pairs<T>(out.data, positions, num_heads, head_dim, theta, 1);
  std::vector<std::int64_t> pos(positions.begin(), positions.end());
  return tape.emit(
      std::move(out),
      [x, pos = std::move(pos), num_heads, head_dim, theta](Tensor<T>& o) {
        std::vector<T> g = o.grad;
        rotate_pairs<T>(g, pos, num_heads, head_dim, theta, -1);
        auto& gx = detail::grad_of(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      },
      x);
}

// ---------------------------------------------------------------------------------
// Attention

/// Per-example boolean allowance matrices, [batch, seq_len, seq_len]; nonzero = key visible.
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::uint8_t> allowed;

  bool at(std::size_t b, std::size_t i, std::size_t j) const {
    return allowed[(b * seq_len + i) * seq_len + j] != 0;
  }
};

struct AttentionLayout {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t num_heads = 0;
};

/// Scaled dot-product attention with an additive -inf mask. q, k, v are
/// [batch * seq_len, num_heads * head_dim]. Rows with no visible key produce zeros.
template <class T>
Var<T> attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                 const AttentionLayout& layout, const AttentionMask& mask) {
  const std::size_t B = layout.batch, L = layout.seq_len, H = layout.num_heads;
  const std::size_t width = q.value().cols();
  if (k.shape() != q.shape() || v.shape() != q.shape() || q.value().rows() != B * L || H == 0 ||
      width % H != 0 || mask.batch != B || mask.seq_len != L) {
    throw ShapeError("attention", {q.shape(), k.shape(), v.shape(), Shape{mask.batch, mask.seq_len, mask.seq_len}});
  }
  const std::size_t hd = width / H;
  const T scale_factor = T(1) / std::sqrt(T(hd));
  const auto ld = static_cast<Eigen::Index>(width);
  const auto Li = static_cast<Eigen::Index>(L), hdi = static_cast<Eigen::Index>(hd);

  auto probs = std::make_shared<std::vector<T>>(B * H * L * L);
  Tensor<T> out(q.shape());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = b * L * width + h * hd;
      detail::ConstStridedMap<T> Q(q.value().data.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
      detail::ConstStridedMap<T> K(k.value().data.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
      detail::ConstStridedMap<T> V(v.value().data.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
      T* pbuf = probs->data() + (b * H + h) * L * L;
      detail::MatMap<T> P(pbuf, Li, Li);
      P.noalias() = (Q * K.transpose()) * scale_factor;
      for (std::size_t i = 0; i < L; ++i) {
        T* row = pbuf + i * L;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (mask.at(b, i, j)) mx = std::max(mx, row[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
          std::fill(row, row + L, T(0));
          continue;
        }
        T sum = 0;
        for (std::size_t j = 0; j < L; ++j) {
          row[j] = mask.at(b, i, j) ? std::exp(row[j] - mx) : T(0);
          sum += row[j];
        }
        for (std::size_t j = 0; j < L; ++j) row[j] /= sum;
      }
      detail::StridedMap<T> O(out.data.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
      O.noalias() = P * V;
    }
  }
  return tape.emit(
      std::move(out),
      [q, k, v, probs, B, L, H, hd, width, scale_factor](Tensor<T>& o) {
        const auto ld = static_cast<Eigen::Index>(width);
        const auto Li = static_cast<Eigen::Index>(L), hdi = static_cast<Eigen::Index>(hd);
        auto& gq = detail::grad_of(q);
        auto& gk = detail::grad_of(k);
        auto& gv = detail::grad_of(v);
        detail::RowMat<T> dP(Li, Li);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = b * L * width + h * hd;
            detail::ConstStridedMap<T> Q(q.value().data.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
            detail::ConstStridedMap<T> K(k.value().data.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
            detail::ConstStridedMap<T> V(v.value().data.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
            detail::ConstStridedMap<T> dO(o.grad.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
            detail::ConstMatMap<T> P(probs->data() + (b * H + h) * L * L, Li, Li);
            detail::StridedMap<T> dQ(gq.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
            detail::StridedMap<T> dK(gk.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
            detail::StridedMap<T> dV(gv.data() + off, Li, hdi, Eigen::OuterStride<>(ld));
            dV.noalias() += P.transpose() * dO;
            dP.noalias() = dO * V.transpose();
            for (Eigen::Index i = 0; i < Li; ++i) {
              const T dot = P.row(i).dot(dP.row(i));
              for (Eigen::Index j = 0; j < Li; ++j) {
                dP(i, j) = P(i, j) * (dP(i, j) - dot) * scale_factor;
              }
            }
            dQ.noalias() += dP * K;
            dK.noalias() += dP.transpose() * Q;
          }
        }
      },
      q, k, v);
}

// ---------------------------------------------------------------------------------
// Losses

/// Mean of -log softmax(logits)[target] over rows whose target is not `ignore_label`.
template <class T>
Var<T> cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const std::int32_t> targets,
                     std::int32_t ignore_label = kIgnoreLabel) {
  const auto& X = logits.value();
  const std::size_t V = X.cols(), N = X.rows();
  if (targets.size() != N) {
    throw ShapeError("cross_entropy", {X.shape, Shape{targets.size()}});
  }
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < N; ++r) {
    const auto t = targets[r];
    if (t == ignore_label) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw ShapeError("cross_entropy", {X.shape}, "target " + std::to_string(t) + " out of range");
    }
    const T* row = X.data.data() + r * V;
    const T mx = *std::max_element(row, row + V);
    double s = 0.0;
    for (std::size_t c = 0; c < V; ++c) s += std::exp(static_cast<double>(row[c] - mx));
    total += std::log(s) + static_cast<double>(mx) - static_cast<double>(row[t]);
    ++count;
  }
  if (count == 0) {
    throw NumericError("cross_entropy: empty loss (every position ignored)");
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(count)));
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return tape.emit(
      std::move(out),
      [logits, tg = std::move(tg), ignore_label, V, count](Tensor<T>& o) {
        auto& g = detail::grad_of(logits);
        const T upstream = o.grad[0] / static_cast<T>(count);
        const auto& data = logits.value().data;
        std::vector<T> p(V);
        for (std::size_t r = 0; r < tg.size(); ++r) {
          if (tg[r] == ignore_label) continue;
          std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(r * V), V, p.begin());
          softmax_rows<T>(p, V);
          for (std::size_t c = 0; c < V; ++c) g[r * V + c] += upstream * p[c];
          g[r * V + static_cast<std::size_t>(tg[r])] -= upstream;
        }
      },
      logits);
}

/// Mean squared error between a [N, 1] prediction and N targets.
template <class T>
Var<T> mse_loss(Tape<T>& tape, const Var<T>& pred, std::span<const T> targets) {
  if (pred.value().size() != targets.size() || targets.empty()) {
    throw ShapeError("mse_loss", {pred.shape(), Shape{targets.size()}});
  }
  const std::size_t n = targets.size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.value().data[i] - targets[i];
    total += d * d;
  }
  std::vector<T> tg(targets.begin(), targets.end());
  return tape.emit(
      Tensor<T>({1}, total / T(n)),
      [pred, tg = std::move(tg), n](Tensor<T>& o) {
        auto& g = detail::grad_of(pred);
        for (std::size_t i = 0; i < n; ++i) {
          g[i] += o.grad[0] * T(2) * (pred.value().data[i] - tg[i]) / T(n);
        }
      },
      pred);
}

/// Σ a ⊙ w for a constant `w`; reduces any tensor to a scalar objective.
template <class T>
Var<T> weighted_sum(Tape<T>& tape, const Var<T>& a, const Tensor<T>& w) {
  if (a.value().size() != w.size()) {
    throw ShapeError("weighted_sum", {a.shape(), w.shape});
  }
  T total = 0;
  for (std::size_t i = 0; i < w.size(); ++i) total += a.value().data[i] * w.data[i];
  return tape.emit(
      Tensor<T>({1}, total),
      [a, w](Tensor<T>& o) {
        auto& g = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0] * w.data[i];
      },
      a);
}

}  // namespace mbert
