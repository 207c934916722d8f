#include "ddep/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ddep/error.hpp"

namespace ddep {

void OptimizerConfig::validate() const {
  require(base_lr >= 0.0 && std::isfinite(base_lr), ErrorKind::InvalidArgument, "base_lr must be >= 0");
  require(total_steps > 0, ErrorKind::InvalidArgument, "total_steps must be positive");
  require(weight_decay >= 0.0, ErrorKind::InvalidArgument, "weight_decay must be >= 0");
  require(beta1 > 0.0 && beta1 < 1.0, ErrorKind::InvalidArgument, "beta1 must lie in (0,1)");
  require(beta2 > 0.0 && beta2 < 1.0, ErrorKind::InvalidArgument, "beta2 must lie in (0,1)");
  require(eps > 0.0, ErrorKind::InvalidArgument, "eps must be positive");
}

void adam_step(ParamSet& params, double lr, const OptimizerConfig& cfg) {
  for (auto& [name, e] : params) {
    if (!e.trainable) continue;
    require(e.has_grad, ErrorKind::ContractViolation, "no gradient for trainable parameter " + name);
  }
  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  const float eps = static_cast<float>(cfg.eps);
  for (auto& [name, e] : params) {
    if (!e.trainable) continue;
    ++e.step;
    const auto t = static_cast<double>(e.step);
    const float step_size = static_cast<float>(lr / (1.0 - std::pow(cfg.beta1, t)));
    const float v_correction = static_cast<float>(1.0 / std::sqrt(1.0 - std::pow(cfg.beta2, t)));
    const float decay = e.decays ? static_cast<float>(1.0 - lr * cfg.weight_decay) : 1.0f;
    float* p = e.value.ptr();
    const float* g = e.grad.ptr();
    float* m = e.first_moment.ptr();
    float* v = e.second_moment.ptr();
    const std::size_t n = e.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      p[i] = p[i] * decay - step_size * m[i] / (std::sqrt(v[i]) * v_correction + eps);
    }
  }
}

double cosine_lr(std::int64_t step, const OptimizerConfig& cfg) {
  require(step >= 0, ErrorKind::InvalidArgument, "step must be non-negative");
  require(cfg.total_steps > 0, ErrorKind::InvalidArgument, "total_steps must be positive");
  const std::int64_t clamped = std::min(step, cfg.total_steps);
  const double progress = static_cast<double>(clamped) / static_cast<double>(cfg.total_steps);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace ddep
