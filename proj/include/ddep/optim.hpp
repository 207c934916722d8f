#pragma once

#include <cstdint>

#include "ddep/param_set.hpp"

namespace ddep {

struct OptimizerConfig {
  double base_lr = 1e-3;
  std::int64_t total_steps = 1;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// Adam with bias correction and decoupled weight decay on weight tensors.
/// Frozen entries are skipped entirely (value, moments and step counter).
void adam_step(ParamSet& params, double lr, const OptimizerConfig& cfg);

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)); steps past the end
/// clamp to the final value.
double cosine_lr(std::int64_t step, const OptimizerConfig& cfg);

}  // namespace ddep
