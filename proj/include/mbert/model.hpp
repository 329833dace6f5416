#pragma once

// ModernBERT-style bidirectional encoder: token embedding + norm, a pre-norm stack of
// attention / gated-GELU blocks whose attention alternates between global and
// sliding-window layers, rotary positions, a final norm, and a tied MLM head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mbert/autograd.hpp"
#include "mbert/kernels.hpp"
#include "mbert/optim.hpp"
#include "mbert/rng.hpp"
#include "mbert/tensor.hpp"

namespace mbert {

struct ModelConfig {
  std::size_t vocab_size = 4096;
  std::size_t hidden_dim = 128;
  std::size_t num_layers = 6;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_seq_len = 128;
  double rope_theta = 10'000.0;
  std::optional<double> local_rope_theta;  // defaults to rope_theta
  std::size_t local_window = 32;
  std::size_t global_every = 3;
  double layernorm_eps = 1e-5;
  std::uint64_t seed = 0;
  bool tie_embeddings = true;
  bool linear_bias = false;
  double init_std = 0.02;

  std::size_t head_dim() const { return hidden_dim / num_heads; }
  double local_theta() const { return local_rope_theta.value_or(rope_theta); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("ModelConfig: " + m); };
    if (vocab_size == 0) fail("vocab_size must be positive");
    if (hidden_dim == 0 || num_heads == 0) fail("hidden_dim and num_heads must be positive");
    if (hidden_dim % num_heads != 0) fail("hidden_dim must be divisible by num_heads");
    if (head_dim() % 2 != 0) fail("head_dim must be even for rotary encoding");
    if (num_layers == 0) fail("num_layers must be positive");
    if (ffn_dim == 0) fail("ffn_dim must be positive");
    if (max_seq_len < 1) fail("max_seq_len must be >= 1");
    if (local_window < 2 || local_window % 2 != 0) fail("local_window must be even and >= 2");
    if (global_every < 1) fail("global_every must be >= 1");
    if (!(rope_theta > 0.0) || !(local_theta() > 0.0)) fail("rope_theta must be positive");
    if (!(layernorm_eps > 0.0)) fail("layernorm_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

enum class LayerKind { Global, Local };

inline LayerKind layer_kind(std::size_t layer_idx, std::size_t global_every) {
  return layer_idx % global_every == 0 ? LayerKind::Global : LayerKind::Local;
}

/// [L, L] allowance matrix for one example; `pad_mask[j] != 0` marks padding.
inline std::vector<std::uint8_t> attention_mask(LayerKind kind, std::size_t seq_len,
                                                std::size_t local_window,
                                                std::span<const std::uint8_t> pad_mask) {
  if (pad_mask.size() != seq_len) {
    throw ShapeError("attention_mask", {Shape{seq_len}, Shape{pad_mask.size()}});
  }
  const std::size_t radius = local_window / 2;
  std::vector<std::uint8_t> allowed(seq_len * seq_len, 0);
  for (std::size_t i = 0; i < seq_len; ++i) {
    for (std::size_t j = 0; j < seq_len; ++j) {
      const std::size_t dist = i > j ? i - j : j - i;
      const bool ok = pad_mask[j] == 0 && (kind == LayerKind::Global || dist <= radius);
      allowed[i * seq_len + j] = ok ? 1 : 0;
    }
  }
  return allowed;
}

/// Padded batch of token ids. `pad[b * seq_len + i] != 0` marks padding.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> pad;

  std::span<const std::uint8_t> pad_row(std::size_t b) const {
    return std::span<const std::uint8_t>(pad).subspan(b * seq_len, seq_len);
  }
};

inline AttentionMask batch_attention_mask(LayerKind kind, const TokenBatch& batch,
                                          std::size_t local_window) {
  AttentionMask m{batch.batch, batch.seq_len, {}};
  m.allowed.reserve(batch.batch * batch.seq_len * batch.seq_len);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    auto row = attention_mask(kind, batch.seq_len, local_window, batch.pad_row(b));
    m.allowed.insert(m.allowed.end(), row.begin(), row.end());
  }
  return m;
}

/// Rotates a [L, heads, head_dim] query or key tensor by per-row positions.
template <class T>
Tensor<T> apply_rope(const Tensor<T>& x, std::span<const std::int64_t> positions, double theta) {
  if (x.rank() != 3 || x.dim(2) % 2 != 0 || positions.size() != x.dim(0)) {
    throw ShapeError("apply_rope", {x.shape, Shape{positions.size()}}, "head_dim must be even");
  }
  Tensor<T> out(x.shape, x.data);
  rotate_pairs<T>(out.data, positions, x.dim(1), x.dim(2), theta, 1);
  return out;
}

// ---------------------------------------------------------------------------------

template <class T>
using ParamPtr = std::shared_ptr<Tensor<T>>;

template <class T>
struct LayerWeights {
  ParamPtr<T> attn_norm, wqkv, wo, mlp_norm, wi, wo_mlp;
  ParamPtr<T> bqkv, bo, bi, bo_mlp;  // only with linear_bias
};

template <class T>
struct EncoderWeights {
  ModelConfig config;
  ParamPtr<T> tok_emb, emb_norm;
  std::vector<LayerWeights<T>> layers;
  ParamPtr<T> final_norm;
  ParamPtr<T> head_dense, head_dense_bias, head_norm;
  ParamPtr<T> head_weight;  // aliases tok_emb when tied
  ParamPtr<T> head_bias;

  /// Unique parameters in a stable order; tied storage appears once.
  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    auto add = [&](std::string name, const ParamPtr<T>& p) {
      if (p) out.push_back({std::move(name), p, p->rank() >= 2});
    };
    add("embeddings.tok", tok_emb);
    add("embeddings.norm", emb_norm);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto pre = "layers." + std::to_string(i) + ".";
      const auto& l = layers[i];
      add(pre + "attn_norm", l.attn_norm);
      add(pre + "attn.wqkv", l.wqkv);
      add(pre + "attn.bqkv", l.bqkv);
      add(pre + "attn.wo", l.wo);
      add(pre + "attn.bo", l.bo);
      add(pre + "mlp_norm", l.mlp_norm);
      add(pre + "mlp.wi", l.wi);
      add(pre + "mlp.bi", l.bi);
      add(pre + "mlp.wo", l.wo_mlp);
      add(pre + "mlp.bo", l.bo_mlp);
    }
    add("final_norm", final_norm);
    add("head.dense", head_dense);
    add("head.dense_bias", head_dense_bias);
    add("head.norm", head_norm);
    if (head_weight != tok_emb) add("head.decoder", head_weight);
    add("head.bias", head_bias);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }

  /// Deep copy that preserves weight tying.
  EncoderWeights clone() const { return cast<T>(); }

  template <class U>
  EncoderWeights<U> cast() const {
    EncoderWeights<U> out;
    out.config = config;
    auto cp = [](const ParamPtr<T>& p) -> ParamPtr<U> {
      if (!p) return nullptr;
      auto t = std::make_shared<Tensor<U>>(p->template cast<U>());
      return t;
    };
    out.tok_emb = cp(tok_emb);
    out.emb_norm = cp(emb_norm);
    for (const auto& l : layers) {
      out.layers.push_back({cp(l.attn_norm), cp(l.wqkv), cp(l.wo), cp(l.mlp_norm), cp(l.wi),
                            cp(l.wo_mlp), cp(l.bqkv), cp(l.bo), cp(l.bi), cp(l.bo_mlp)});
    }
    out.final_norm = cp(final_norm);
    out.head_dense = cp(head_dense);
    out.head_dense_bias = cp(head_dense_bias);
    out.head_norm = cp(head_norm);
    out.head_weight = head_weight == tok_emb ? out.tok_emb : cp(head_weight);
    out.head_bias = cp(head_bias);
    return out;
  }

  void zero_grad() const {
    for (const auto& p : parameters()) p.tensor->zero_grad();
  }
};

/// Closed-form parameter count for a configuration.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t V = c.vocab_size, d = c.hidden_dim, f = c.ffn_dim, L = c.num_layers;
  std::size_t per_layer = 2 * d + 4 * d * d + 3 * f * d;
  if (c.linear_bias) per_layer += 3 * d + d + 2 * f + d;
  std::size_t n = V * d + d + L * per_layer + d + (d * d + d) + d + V;
  if (!c.tie_embeddings) n += V * d;
  return n;
}

/// Deterministic initialisation: truncated normal (std `init_std`, cut at 2 std) for
/// matrices, ones for norm gains, zeros for biases.
template <class T = float>
EncoderWeights<T> init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t V = config.vocab_size, d = config.hidden_dim, f = config.ffn_dim;
  auto matrix = [&](std::size_t rows, std::size_t cols) {
    auto t = std::make_shared<Tensor<T>>(Shape{rows, cols});
    for (auto& x : t->data) x = static_cast<T>(rng.truncated_normal(config.init_std));
    return t;
  };
  auto ones = [](std::size_t n) { return std::make_shared<Tensor<T>>(Shape{n}, T(1)); };
  auto zeros = [](std::size_t n) { return std::make_shared<Tensor<T>>(Shape{n}, T(0)); };

  EncoderWeights<T> w;
  w.config = config;
  w.tok_emb = matrix(V, d);
  w.emb_norm = ones(d);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    LayerWeights<T> l;
    l.attn_norm = ones(d);
    l.wqkv = matrix(3 * d, d);
    l.wo = matrix(d, d);
    l.mlp_norm = ones(d);
    l.wi = matrix(2 * f, d);
    l.wo_mlp = matrix(d, f);
    if (config.linear_bias) {
      l.bqkv = zeros(3 * d);
      l.bo = zeros(d);
      l.bi = zeros(2 * f);
      l.bo_mlp = zeros(d);
    }
    w.layers.push_back(std::move(l));
  }
  w.final_norm = ones(d);
  w.head_dense = matrix(d, d);
  w.head_dense_bias = zeros(d);
  w.head_norm = ones(d);
  w.head_weight = config.tie_embeddings ? w.tok_emb : matrix(V, d);
  w.head_bias = zeros(V);
  return w;
}

namespace detail {

template <class T>
Var<T> dense(Tape<T>& tape, const Var<T>& x, const ParamPtr<T>& w, const ParamPtr<T>& b) {
  auto y = linear(tape, x, tape.param(w));
  return b ? add_row(tape, y, tape.param(b)) : y;
}

}  // namespace detail

/// Hidden states [B, L, d] for a padded batch.
template <class T>
Var<T> encoder_forward(Tape<T>& tape, const EncoderWeights<T>& w, const TokenBatch& batch) {
  const ModelConfig& c = w.config;
  const std::size_t B = batch.batch, L = batch.seq_len, d = c.hidden_dim, f = c.ffn_dim;
  if (L > c.max_seq_len) {
    throw SequenceTooLong(L, c.max_seq_len);
  }
  if (batch.ids.size() != B * L || batch.pad.size() != B * L) {
    throw ShapeError("encoder_forward", {Shape{B, L}, Shape{batch.ids.size()}, Shape{batch.pad.size()}});
  }
  const T eps = static_cast<T>(c.layernorm_eps);

  std::vector<std::int64_t> positions(B * L);
  for (std::size_t r = 0; r < B * L; ++r) positions[r] = static_cast<std::int64_t>(r % L);
  const AttentionMask global_mask = batch_attention_mask(LayerKind::Global, batch, c.local_window);
  const AttentionMask local_mask = batch_attention_mask(LayerKind::Local, batch, c.local_window);
  const AttentionLayout layout{B, L, c.num_heads};

  Var<T> x = embedding(tape, tape.param(w.tok_emb), std::span<const std::int32_t>(batch.ids));
  {
    auto g = tape.param(w.emb_norm);
    x = layernorm(tape, x, &g, eps);
  }
  for (std::size_t li = 0; li < w.layers.size(); ++li) {
    const auto& l = w.layers[li];
    const LayerKind kind = layer_kind(li, c.global_every);
    const double theta = kind == LayerKind::Global ? c.rope_theta : c.local_theta();

    auto an = tape.param(l.attn_norm);
    auto h = layernorm(tape, x, &an, eps);
    auto qkv = detail::dense(tape, h, l.wqkv, l.bqkv);
    auto q = rope(tape, slice_cols(tape, qkv, 0, d), positions, c.num_heads, theta);
    auto k = rope(tape, slice_cols(tape, qkv, d, 2 * d), positions, c.num_heads, theta);
    auto v = slice_cols(tape, qkv, 2 * d, 3 * d);
    auto a = attention(tape, q, k, v, layout, kind == LayerKind::Global ? global_mask : local_mask);
    x = add(tape, x, detail::dense(tape, a, l.wo, l.bo));

    auto mn = tape.param(l.mlp_norm);
    h = layernorm(tape, x, &mn, eps);
    auto u = detail::dense(tape, h, l.wi, l.bi);
    auto gated = mul(tape, gelu(tape, slice_cols(tape, u, 0, f)), slice_cols(tape, u, f, 2 * f));
    x = add(tape, x, detail::dense(tape, gated, l.wo_mlp, l.bo_mlp));
  }
  auto fn = tape.param(w.final_norm);
  auto hidden = layernorm(tape, x, &fn, eps);
  hidden.node->shape = Shape{B, L, d};
  return hidden;
}

/// Vocabulary logits for every row of `hidden` (any leading shape, trailing d).
template <class T>
Var<T> mlm_logits(Tape<T>& tape, const EncoderWeights<T>& w, const Var<T>& hidden) {
  auto h = detail::dense(tape, hidden, w.head_dense, w.head_dense_bias);
  h = gelu(tape, h);
  auto hn = tape.param(w.head_norm);
  h = layernorm(tape, h, &hn, static_cast<T>(w.config.layernorm_eps));
  auto logits = linear(tape, h, tape.param(w.head_weight));
  return add_row(tape, logits, tape.param(w.head_bias));
}

struct PooledEmbedding {
  std::vector<float> vector;
  bool normalized = false;
};

/// Mean over non-pad positions of each example; optional L2 normalisation.
template <class T>
std::vector<PooledEmbedding> mean_pool(const Tensor<T>& hidden, std::span<const std::uint8_t> pad_mask,
                                       std::size_t batch, std::size_t seq_len, bool normalize) {
  const std::size_t d = hidden.cols();
  if (hidden.rows() != batch * seq_len || pad_mask.size() != batch * seq_len) {
    throw ShapeError("mean_pool", {hidden.shape, Shape{pad_mask.size()}});
  }
  std::vector<PooledEmbedding> out;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> acc(d, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < seq_len; ++i) {
      if (pad_mask[b * seq_len + i] != 0) continue;
      const T* row = hidden.data.data() + (b * seq_len + i) * d;
      for (std::size_t c = 0; c < d; ++c) acc[c] += static_cast<double>(row[c]);
      ++count;
    }
    if (count == 0) {
      throw std::invalid_argument("mean_pool: empty sequence (row " + std::to_string(b) + " is all padding)");
    }
    PooledEmbedding e;
    e.vector.resize(d);
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      acc[c] /= static_cast<double>(count);
      norm += acc[c] * acc[c];
    }
    norm = std::sqrt(norm);
    const double s = (normalize && norm > 0.0) ? 1.0 / norm : 1.0;
    for (std::size_t c = 0; c < d; ++c) e.vector[c] = static_cast<float>(acc[c] * s);
    e.normalized = normalize;
    out.push_back(std::move(e));
  }
  return out;
}

template <class T>
std::vector<PooledEmbedding> mean_pool(const Tensor<T>& hidden, const TokenBatch& batch, bool normalize) {
  return mean_pool(hidden, std::span<const std::uint8_t>(batch.pad), batch.batch, batch.seq_len, normalize);
}

/// Pads id lists to a common length (at most `max_len` is not enforced here).
inline TokenBatch pad_batch(const std::vector<std::vector<std::int32_t>>& seqs, std::int32_t pad_id) {
  TokenBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.seq_len = std::max(b.seq_len, s.size());
  b.ids.assign(b.batch * b.seq_len, pad_id);
  b.pad.assign(b.batch * b.seq_len, 1);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    for (std::size_t j = 0; j < seqs[i].size(); ++j) {
      b.ids[i * b.seq_len + j] = seqs[i][j];
      b.pad[i * b.seq_len + j] = 0;
    }
  }
  return b;
}

}  // namespace mbert
