#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mbert/errors.hpp"
#include "mbert/kernels.hpp"
#include "mbert/model.hpp"
#include "mbert/rng.hpp"
#include "mbert/tokenizer.hpp"

namespace mbert {

struct MaskingConfig {
  double probability = 0.30;
  double mask_fraction = 0.8;    // of selected tokens, replaced by [MASK]
  double random_fraction = 0.1;  // of selected tokens, replaced by a random non-special id

  void validate() const {
    if (!(probability >= 0.0 && probability <= 1.0)) throw ConfigError("masking: probability must be in [0, 1]");
    if (!(mask_fraction >= 0.0 && random_fraction >= 0.0 && mask_fraction + random_fraction <= 1.0)) {
      throw ConfigError("masking: mask_fraction + random_fraction must be within [0, 1]");
    }
  }
};

/// Corrupted inputs plus labels: the original id where a token was selected,
/// kIgnoreLabel elsewhere.
struct MaskedBatch {
  TokenBatch input;
  std::vector<std::int32_t> labels;

  std::size_t selected() const {
    std::size_t n = 0;
    for (auto l : labels) n += l != kIgnoreLabel ? 1 : 0;
    return n;
  }
};

/// Corrupts one sequence in place. Special ids are never selected. Returns the labels.
inline std::vector<std::int32_t> mask_sequence(std::span<std::int32_t> ids, const MaskingConfig& cfg,
                                               std::size_t vocab_size, Rng& rng) {
  std::vector<std::int32_t> labels(ids.size(), kIgnoreLabel);
  const auto non_special = vocab_size - static_cast<std::size_t>(kNumSpecial);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (is_special(ids[i])) continue;
    if (rng.uniform() >= cfg.probability) continue;
    labels[i] = ids[i];
    const double r = rng.uniform();
    if (r < cfg.mask_fraction) {
      ids[i] = kMaskId;
    } else if (r < cfg.mask_fraction + cfg.random_fraction) {
      ids[i] = kNumSpecial + static_cast<std::int32_t>(rng.below(non_special));
    }
  }
  return labels;
}

inline MaskedBatch apply_mlm_mask(const TokenBatch& batch, const MaskingConfig& cfg, std::size_t vocab_size,
                                  Rng& rng) {
  cfg.validate();
  if (vocab_size <= static_cast<std::size_t>(kNumSpecial)) throw ConfigError("masking: vocabulary too small");
  MaskedBatch out{batch, {}};
  out.labels.reserve(batch.ids.size());
  for (std::size_t b = 0; b < batch.batch; ++b) {
    std::span<std::int32_t> row(out.input.ids.data() + b * batch.seq_len, batch.seq_len);
    auto labels = mask_sequence(row, cfg, vocab_size, rng);
    out.labels.insert(out.labels.end(), labels.begin(), labels.end());
  }
  return out;
}

/// Masking whose randomness depends only on (seed, example index), so a fixed set
/// of sequences is corrupted identically no matter how it is batched.
inline MaskedBatch apply_mlm_mask_indexed(const TokenBatch& batch, std::span<const std::size_t> example_index,
                                          const MaskingConfig& cfg, std::size_t vocab_size, std::uint64_t seed) {
  cfg.validate();
  if (example_index.size() != batch.batch) throw ShapeError("apply_mlm_mask_indexed", {Shape{batch.batch}, Shape{example_index.size()}});
  MaskedBatch out{batch, {}};
  for (std::size_t b = 0; b < batch.batch; ++b) {
    Rng rng(derive_seed(seed, example_index[b]));
    std::span<std::int32_t> row(out.input.ids.data() + b * batch.seq_len, batch.seq_len);
    auto labels = mask_sequence(row, cfg, vocab_size, rng);
    out.labels.insert(out.labels.end(), labels.begin(), labels.end());
  }
  return out;
}

}  // namespace mbert
