#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "ddep/param_set.hpp"
#include "ddep/rng.hpp"

namespace ddep {

/// Evaluates a scalar loss at the current parameter values. When
/// `with_grad` is true it must also leave d(loss)/d(param) in each entry's
/// grad (the checker zeroes grads beforehand).
using LossFn = std::function<double(ParamSet& params, bool with_grad)>;

/// Fingerprint of the piecewise-smooth region the loss is evaluated in
/// (e.g. a hash of ReLU activation patterns). Optional.
using RegionFn = std::function<std::uint64_t(const ParamSet& params)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  int probes = 0;
  /// Probes discarded because the stencil straddled a kink.
  int redrawn = 0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Error of the analytic value relative to the finite-difference oracle:
/// |a - n| / max(|n|, floor).
double relative_error(double analytic, double numeric, double floor);

/// Compares analytic gradients with central finite differences on `probes`
/// coordinates drawn uniformly over all trainable elements. `floor` bounds
/// the denominator for vanishing gradients. Throws Diagnostic if the loss
/// is not reproducible at fixed parameters.
///
/// Central differences are only an oracle where the loss is smooth across
/// [p - h, p + h]. When `region` is given, a probe whose two stencil points
/// fall in different regions is redrawn; more than 20 redraws per requested
/// probe is a Diagnostic failure.
GradCheckResult grad_check(const LossFn& loss, ParamSet& params, int probes, Rng& rng,
                           double h = 1e-3, double floor = 1e-3, const RegionFn& region = {});

}  // namespace ddep
