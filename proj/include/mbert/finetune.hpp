#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mbert/autograd.hpp"
#include "mbert/kernels.hpp"
#include "mbert/model.hpp"
#include "mbert/optim.hpp"
#include "mbert/rng.hpp"
#include "mbert/tokenizer.hpp"

namespace mbert {

struct ClassificationExample {
  std::string text;
  std::string text2;  // used only for sentence-pair tasks
  double label = 0.0;
};

/// `num_labels == 0` declares a regression task scored by Pearson correlation.
struct ClassificationTask {
  bool sentence_pair = false;
  std::size_t num_labels = 2;
  std::vector<ClassificationExample> train;
  std::vector<ClassificationExample> dev;
};

struct FineTuneConfig {
  std::vector<double> learning_rates{5e-6, 1e-5, 2e-5, 3e-5, 5e-5, 1e-4};
  std::vector<int> epochs{1, 2, 3, 4, 5, 10};
  std::size_t batch_size = 16;
  double warmup_ratio = 0.1;
  double grad_clip = 1.0;
  AdamWConfig adamw{};
  std::uint64_t seed = 0;
};

struct GridCell {
  double lr = 0.0;
  int epochs = 0;
  double score = 0.0;
};

struct FineTuneResult {
  std::string metric;  // "accuracy" or "pearson"
  double best_score = 0.0;
  double best_lr = 0.0;
  int best_epochs = 0;
  std::vector<GridCell> grid;
  EncoderWeights<float> best_encoder;
  Tensor<float> head_weight;  // [num_outputs, d]
  Tensor<float> head_bias;    // [num_outputs]
};

/// [CLS] a [SEP] or [CLS] a [SEP] b [SEP], content truncated to fit max_len.
inline std::vector<std::int32_t> encode_for_classification(const Tokenizer& tok, const ClassificationExample& ex,
                                                           bool pair, std::size_t max_len) {
  auto a = tok.encode(ex.text);
  std::vector<std::int32_t> b = pair ? tok.encode(ex.text2) : std::vector<std::int32_t>{};
  const std::size_t budget = max_len - (pair ? 3 : 2);
  while (a.size() + b.size() > budget) {
    if (a.size() >= b.size()) {
      a.pop_back();
    } else {
      b.pop_back();
    }
  }
  std::vector<std::int32_t> ids{kClsId};
  ids.insert(ids.end(), a.begin(), a.end());
  ids.push_back(kSepId);
  if (pair) {
    ids.insert(ids.end(), b.begin(), b.end());
    ids.push_back(kSepId);
  }
  return ids;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

namespace detail {

struct Classifier {
  EncoderWeights<float> encoder;
  std::shared_ptr<Tensor<float>> w, b;
};

inline Var<float> classifier_forward(Tape<float>& tape, const Classifier& c, const TokenBatch& batch) {
  auto hidden = encoder_forward(tape, c.encoder, batch);
  std::vector<std::size_t> cls_rows(batch.batch);
  for (std::size_t i = 0; i < batch.batch; ++i) cls_rows[i] = i * batch.seq_len;
  auto pooled = gather_rows(tape, hidden, cls_rows);
  return add_row(tape, linear(tape, pooled, tape.param(c.w)), tape.param(c.b));
}

}  // namespace detail

/// Full-model fine-tuning with a linear head on the [CLS] state, repeated from the
/// same starting weights for every (learning rate, epochs) cell; reports the best
/// dev score.
inline FineTuneResult fine_tune_classifier(const EncoderWeights<float>& base, const Tokenizer& tok,
                                           const ClassificationTask& task, const FineTuneConfig& cfg) {
  if (cfg.learning_rates.empty() || cfg.epochs.empty()) throw ConfigError("fine_tune: grid must be non-empty");
  if (task.train.empty() || task.dev.empty()) throw ConfigError("fine_tune: train and dev sets must be non-empty");
  if (cfg.batch_size == 0) throw ConfigError("fine_tune: batch_size must be positive");
  const bool regression = task.num_labels == 0;
  if (!regression) {
    if (task.num_labels < 2) throw ConfigError("fine_tune: classification needs at least 2 labels");
    for (const auto* split : {&task.train, &task.dev}) {
      for (const auto& ex : *split) {
        if (ex.label != std::floor(ex.label) || ex.label < 0 || ex.label >= static_cast<double>(task.num_labels)) {
          throw ConfigError("fine_tune: label " + std::to_string(ex.label) + " outside 0.." +
                            std::to_string(task.num_labels - 1) + " (label cardinality mismatch)");
        }
      }
    }
  }
  const std::size_t outputs = regression ? 1 : task.num_labels;
  const std::size_t max_len = base.config.max_seq_len;
  auto encode_all = [&](const std::vector<ClassificationExample>& xs) {
    std::vector<std::vector<std::int32_t>> out;
    for (const auto& ex : xs) out.push_back(encode_for_classification(tok, ex, task.sentence_pair, max_len));
    return out;
  };
  const auto train_ids = encode_all(task.train);
  const auto dev_ids = encode_all(task.dev);

  auto evaluate = [&](const detail::Classifier& c) {
    std::vector<double> pred, gold;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < dev_ids.size(); s += cfg.batch_size) {
      const std::size_t e = std::min(dev_ids.size(), s + cfg.batch_size);
      std::vector<std::vector<std::int32_t>> seqs(dev_ids.begin() + s, dev_ids.begin() + e);
      Tape<float> tape(false);
      const auto logits = detail::classifier_forward(tape, c, pad_batch(seqs, kPadId));
      const auto& out = logits.value();
      for (std::size_t i = 0; i < e - s; ++i) {
        const float* row = out.data.data() + i * outputs;
        const double label = task.dev[s + i].label;
        if (regression) {
          pred.push_back(row[0]);
          gold.push_back(label);
        } else {
          const auto best = static_cast<double>(std::max_element(row, row + outputs) - row);
          correct += best == label ? 1 : 0;
        }
      }
    }
    return regression ? pearson(pred, gold) : static_cast<double>(correct) / static_cast<double>(dev_ids.size());
  };

  FineTuneResult result;
  result.metric = regression ? "pearson" : "accuracy";
  bool have_best = false;
  for (double lr : cfg.learning_rates) {
    for (int epochs : cfg.epochs) {
      if (epochs <= 0) throw ConfigError("fine_tune: epochs must be positive");
      detail::Classifier c{base.clone(), nullptr, nullptr};
      Rng rng(derive_seed(cfg.seed, 0xF17Eull));
      c.w = std::make_shared<Tensor<float>>(Shape{outputs, base.config.hidden_dim});
      for (auto& x : c.w->data) x = static_cast<float>(rng.truncated_normal(base.config.init_std));
      c.b = std::make_shared<Tensor<float>>(Shape{outputs});
      auto params = c.encoder.parameters();
      params.push_back({"classifier.weight", c.w, true});
      params.push_back({"classifier.bias", c.b, false});
      auto opt = AdamWState<float>::fresh(params);
      const std::size_t per_epoch = (train_ids.size() + cfg.batch_size - 1) / cfg.batch_size;
      LrSchedule sched{lr, 0, static_cast<std::int64_t>(per_epoch) * epochs};
      sched.warmup_steps = std::max<std::int64_t>(1, static_cast<std::int64_t>(cfg.warmup_ratio * double(sched.total_steps)));
      if (sched.warmup_steps >= sched.total_steps) sched.total_steps = sched.warmup_steps + 1;
      std::int64_t step = 0;
      std::vector<std::size_t> order(train_ids.size());
      for (int ep = 0; ep < epochs; ++ep) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed(cfg.seed, static_cast<std::uint64_t>(ep)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
          const std::size_t e = std::min(order.size(), s + cfg.batch_size);
          std::vector<std::vector<std::int32_t>> seqs;
          std::vector<std::int32_t> labels;
          std::vector<float> targets;
          for (std::size_t k = s; k < e; ++k) {
            seqs.push_back(train_ids[order[k]]);
            labels.push_back(static_cast<std::int32_t>(task.train[order[k]].label));
            targets.push_back(static_cast<float>(task.train[order[k]].label));
          }
          for (const auto& p : params) p.tensor->zero_grad();
          Tape<float> tape;
          auto out = detail::classifier_forward(tape, c, pad_batch(seqs, kPadId));
          auto loss = regression ? mse_loss(tape, out, std::span<const float>(targets))
                                 : cross_entropy(tape, out, std::span<const std::int32_t>(labels));
          if (!std::isfinite(loss.value().data[0])) throw NumericError("fine_tune: non-finite loss");
          tape.backward(loss);
          clip_global_norm<float>(std::span<const NamedParam<float>>(params), cfg.grad_clip);
          ++step;
          adamw_step<float>(params, opt, lr_at(std::min(step, sched.total_steps), sched), cfg.adamw);
        }
      }
      const double score = evaluate(c);
      result.grid.push_back({lr, epochs, score});
      if (!have_best || score > result.best_score) {
        have_best = true;
        result.best_score = score;
        result.best_lr = lr;
        result.best_epochs = epochs;
        result.best_encoder = c.encoder;
        result.head_weight = *c.w;
        result.head_bias = *c.b;
      }
    }
  }
  return result;
}

}  // namespace mbert
