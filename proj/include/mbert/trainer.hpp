#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mbert/autograd.hpp"
#include "mbert/checkpoint.hpp"
#include "mbert/io.hpp"
#include "mbert/kernels.hpp"
#include "mbert/masking.hpp"
#include "mbert/model.hpp"
#include "mbert/optim.hpp"
#include "mbert/rng.hpp"
#include "mbert/tokenizer.hpp"
#include "mbert/train_config.hpp"

namespace mbert {

using Sequences = std::vector<std::vector<std::int32_t>>;

/// Endless example stream: each epoch visits every sequence once in an order drawn
/// from (seed, epoch).
class DataStream {
 public:
  DataStream(std::shared_ptr<const Sequences> data, std::uint64_t seed, DataCursor cursor = {})
      : data_(std::move(data)), seed_(seed), cursor_(cursor) {
    if (!data_ || data_->empty()) throw ConfigError("training data is empty");
    if (cursor_.position > data_->size()) throw ConfigError("data cursor beyond end of data");
    shuffle();
  }

  std::vector<std::size_t> next(std::size_t n) {
    std::vector<std::size_t> out;
    out.reserve(n);
    while (out.size() < n) {
      if (cursor_.position == order_.size()) {
        ++cursor_.epoch;
        cursor_.position = 0;
        shuffle();
      }
      out.push_back(order_[cursor_.position++]);
    }
    return out;
  }

  const Sequences& data() const { return *data_; }
  DataCursor cursor() const { return cursor_; }

 private:
  void shuffle() {
    order_.resize(data_->size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, cursor_.epoch));
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
  }

  std::shared_ptr<const Sequences> data_;
  std::uint64_t seed_;
  DataCursor cursor_;
  std::vector<std::size_t> order_;
};

struct MlmResult {
  double loss = 0.0;
  std::size_t predictions = 0;
  std::size_t correct = 0;
};

/// Masked-token loss for one masked batch. Only selected rows reach the vocabulary
/// projection. With a recording tape the gradient flows into the weights.
template <class T>
MlmResult mlm_loss(Tape<T>& tape, const EncoderWeights<T>& w, const MaskedBatch& mb, Var<T>* loss_out = nullptr) {
  std::vector<std::size_t> rows;
  std::vector<std::int32_t> targets;
  for (std::size_t i = 0; i < mb.labels.size(); ++i) {
    if (mb.labels[i] != kIgnoreLabel) {
      rows.push_back(i);
      targets.push_back(mb.labels[i]);
    }
  }
  MlmResult r;
  if (rows.empty()) return r;
  auto hidden = encoder_forward(tape, w, mb.input);
  auto logits = mlm_logits(tape, w, gather_rows(tape, hidden, rows));
  auto loss = cross_entropy(tape, logits, targets);
  r.loss = static_cast<double>(loss.value().data[0]);
  r.predictions = rows.size();
  const std::size_t V = logits.value().cols();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const T* row = logits.value().data.data() + k * V;
    const auto best = static_cast<std::int32_t>(std::max_element(row, row + V) - row);
    r.correct += best == targets[k] ? 1 : 0;
  }
  if (loss_out != nullptr) *loss_out = loss;
  return r;
}

inline TokenBatch gather_batch(const Sequences& data, const std::vector<std::size_t>& idx) {
  std::vector<std::vector<std::int32_t>> seqs;
  seqs.reserve(idx.size());
  for (auto i : idx) seqs.push_back(data.at(i));
  return pad_batch(seqs, kPadId);
}

// ---------------------------------------------------------------------------------

/// Held-out sequences whose corruption depends only on (seed, example index).
struct ValidationSet {
  Sequences sequences;
  std::uint64_t seed = 1234;
  MaskingConfig masking{};
  std::size_t batch_size = 32;
};

struct ValidationResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t predictions = 0;
};

template <class T>
ValidationResult validate(const EncoderWeights<T>& w, const ValidationSet& vs) {
  if (vs.sequences.empty()) throw std::invalid_argument("validate: empty validation set");
  double loss_sum = 0.0;
  std::size_t n = 0, correct = 0;
  for (std::size_t start = 0; start < vs.sequences.size(); start += vs.batch_size) {
    const std::size_t end = std::min(vs.sequences.size(), start + vs.batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const TokenBatch batch = gather_batch(vs.sequences, idx);
    const MaskedBatch mb = apply_mlm_mask_indexed(batch, idx, vs.masking, w.config.vocab_size, vs.seed);
    Tape<T> tape(false);
    const MlmResult r = mlm_loss(tape, w, mb);
    loss_sum += r.loss * static_cast<double>(r.predictions);
    n += r.predictions;
    correct += r.correct;
  }
  if (n == 0) throw std::invalid_argument("validate: no masked positions in validation set");
  return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n), n};
}

// ---------------------------------------------------------------------------------

struct StepResult {
  std::int64_t step = 0;  // 1-based index of the update just applied
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::size_t predictions = 0;
};

/// Fresh training state for a new stage-1 run.
inline Checkpoint fresh_checkpoint(const ModelConfig& model, const TrainConfig& train, const std::string& fingerprint) {
  train.validate();
  if (train.stage != 1) throw ConfigError("a fresh run must be stage 1; stage 2 starts from a stage-1 checkpoint");
  ModelConfig mc = model;
  mc.max_seq_len = train.max_seq_len;
  Checkpoint c;
  c.train = train;
  c.weights = init_model<float>(mc);
  c.optimizer = AdamWState<float>::fresh(c.weights.parameters());
  c.rng_state = Rng(derive_seed(train.seed, 0x5EEDull)).state();
  c.tokenizer_fingerprint = fingerprint;
  return c;
}

/// Stage-2 state: carries weights bit-exactly, admits longer inputs, restarts the step
/// count and schedule, and resets the optimizer unless the config asks otherwise.
inline Checkpoint extend_context(const Checkpoint& stage1, const TrainConfig& stage2) {
  stage2.validate();
  if (stage2.stage != 2) throw ConfigError("extend_context: target config must be stage 2");
  if (stage1.stage() != 1) throw ConfigError("extend_context: source checkpoint must be stage 1");
  if (stage2.max_seq_len <= stage1.model().max_seq_len) {
    throw ConfigError("extend_context: stage-2 max_seq_len " + std::to_string(stage2.max_seq_len) +
                      " must exceed stage-1 max_seq_len " + std::to_string(stage1.model().max_seq_len));
  }
  Checkpoint c;
  c.train = stage2;
  c.weights = stage1.weights.clone();
  c.weights.config.max_seq_len = stage2.max_seq_len;
  c.optimizer = stage2.reset_optimizer ? AdamWState<float>::fresh(c.weights.parameters()) : stage1.optimizer;
  c.step = 0;
  c.rng_state = Rng(derive_seed(stage2.seed, 0x5EEDull)).state();
  c.tokenizer_fingerprint = stage1.tokenizer_fingerprint;
  return c;
}

/// Owns the mutable training state of one stage.
class Trainer {
 public:
  Trainer(Checkpoint state, std::shared_ptr<const Sequences> data)
      : state_(std::move(state)), stream_(std::move(data), derive_seed(state_.train.seed, 0xDA7Aull), state_.cursor) {
    state_.train.validate();
    rng_.set_state(state_.rng_state);
    for (const auto& s : stream_.data()) {
      if (s.size() > state_.model().max_seq_len) {
        throw ConfigError("training sequence of length " + std::to_string(s.size()) + " exceeds max_seq_len " +
                          std::to_string(state_.model().max_seq_len));
      }
    }
    params_ = state_.weights.parameters();
  }

  StepResult step() {
    const TrainConfig& cfg = state_.train;
    if (state_.step >= cfg.total_steps) throw std::logic_error("Trainer: step budget exhausted");
    const auto idx = stream_.next(cfg.batch_size);
    const MaskedBatch mb = apply_mlm_mask(gather_batch(stream_.data(), idx), cfg.masking, state_.model().vocab_size, rng_);

    StepResult r;
    r.step = state_.step + 1;
    r.lr = lr_at(r.step, cfg.schedule());
    state_.weights.zero_grad();
    Tape<float> tape;
    Var<float> loss;
    const MlmResult m = mlm_loss(tape, state_.weights, mb, &loss);
    r.loss = m.loss;
    r.predictions = m.predictions;
    if (m.predictions > 0) {
      if (!std::isfinite(r.loss)) {
        throw NumericError("non-finite training loss at step " + std::to_string(r.step));
      }
      tape.backward(loss);
      tape.clear();
      r.grad_norm = clip_global_norm<float>(std::span<const NamedParam<float>>(params_), cfg.grad_clip);
      adamw_step<float>(params_, state_.optimizer, r.lr, cfg.adamw);
    }
    state_.step = r.step;
    state_.cursor = stream_.cursor();
    state_.rng_state = rng_.state();
    return r;
  }

  const Checkpoint& state() const { return state_; }
  const EncoderWeights<float>& weights() const { return state_.weights; }
  std::int64_t steps_done() const { return state_.step; }
  bool finished() const { return state_.step >= state_.train.total_steps; }

 private:
  Checkpoint state_;
  DataStream stream_;
  Rng rng_;
  std::vector<NamedParam<float>> params_;
};

struct RunOptions {
  const ValidationSet* validation = nullptr;
  std::optional<std::filesystem::path> checkpoint_dir;
  MetricLog* metrics = nullptr;
  std::function<void(const StepResult&)> on_step;
  std::function<void(std::int64_t, const ValidationResult&)> on_validate;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int stage, std::int64_t step) {
  return dir / ("stage" + std::to_string(stage) + "_step" + std::to_string(step) + ".ckpt");
}

/// Runs up to `max_steps` updates (all remaining when negative), validating at step 0
/// and on the configured cadence and checkpointing on schedule.
inline void run_training(Trainer& trainer, const RunOptions& opt, std::int64_t max_steps = -1) {
  const TrainConfig& cfg = trainer.state().train;
  const int stage = cfg.stage;
  std::optional<std::filesystem::path> last_good;
  auto emit = [&](std::int64_t step, const std::string& name, double value) {
    if (opt.metrics != nullptr) opt.metrics->append({step, stage, name, value});
  };
  auto maybe_validate = [&](std::int64_t step) {
    if (opt.validation == nullptr || cfg.validate_every == 0) return;
    if (step % cfg.validate_every != 0 && step != cfg.total_steps) return;
    const auto v = validate(trainer.weights(), *opt.validation);
    emit(step, "val_loss", v.loss);
    emit(step, "val_accuracy", v.accuracy);
    if (opt.on_validate) opt.on_validate(step, v);
  };
  auto maybe_checkpoint = [&](std::int64_t step) {
    if (!opt.checkpoint_dir) return;
    if (step % cfg.checkpoint_interval() != 0 && step != cfg.total_steps) return;
    const auto path = checkpoint_path(*opt.checkpoint_dir, stage, step);
    save_checkpoint(trainer.state(), path);
    last_good = path;
  };

  if (trainer.steps_done() == 0) {
    maybe_validate(0);
    maybe_checkpoint(0);
  }
  std::int64_t done = 0;
  while (!trainer.finished() && (max_steps < 0 || done < max_steps)) {
    StepResult r;
    try {
      r = trainer.step();
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + "; last good checkpoint: " +
                         (last_good ? last_good->string() : std::string("none")));
    }
    ++done;
    emit(r.step, "train_loss", r.loss);
    emit(r.step, "lr", r.lr);
    emit(r.step, "grad_norm", r.grad_norm);
    if (opt.on_step) opt.on_step(r);
    maybe_validate(r.step);
    maybe_checkpoint(r.step);
  }
}

}  // namespace mbert
