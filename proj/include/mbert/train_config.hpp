#pragma once

#include <cstdint>
#include <string>

#include "mbert/errors.hpp"
#include "mbert/masking.hpp"
#include "mbert/optim.hpp"

namespace mbert {

/// One training stage. Defaults are the desk-scale stage-1 run.
struct TrainConfig {
  int stage = 1;
  std::size_t max_seq_len = 128;
  std::int64_t total_steps = 2000;
  std::size_t batch_size = 16;
  double peak_lr = 5e-4;
  std::int64_t warmup_steps = 96;
  MaskingConfig masking{};
  double grad_clip = 1.0;
  AdamWConfig adamw{};
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0 selects total_steps / 25
  std::int64_t validate_every = 50;
  bool reset_optimizer = false;       // stage 2 only: start from fresh AdamW moments
  bool add_cls_sep = true;

  LrSchedule schedule() const { return {peak_lr, warmup_steps, total_steps}; }

  std::int64_t checkpoint_interval() const {
    if (checkpoint_every > 0) return checkpoint_every;
    return std::max<std::int64_t>(1, total_steps / 25);
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("TrainConfig: " + m); };
    if (stage != 1 && stage != 2) fail("stage must be 1 or 2");
    if (max_seq_len < 3) fail("max_seq_len must be >= 3");
    if (total_steps <= 0) fail("total_steps must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
    if (validate_every < 0 || checkpoint_every < 0) fail("cadences must be non-negative");
    if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0 && adamw.beta2 >= 0.0 && adamw.beta2 < 1.0)) {
      fail("adamw betas must be in [0, 1)");
    }
    if (!(adamw.eps > 0.0) || adamw.weight_decay < 0.0) fail("adamw eps must be positive, weight_decay >= 0");
    try {
      schedule().validate();
      masking.validate();
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
  }
};

}  // namespace mbert
