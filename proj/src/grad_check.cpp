#include "ddep/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "ddep/error.hpp"

namespace ddep {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max(std::abs(numeric), floor);
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const LossFn& loss, ParamSet& params, int probes, Rng& rng, double h,
                           double floor, const RegionFn& region) {
  require(probes > 0, ErrorKind::InvalidArgument, "grad_check needs at least one probe");
  std::vector<std::pair<std::string, std::size_t>> extents;
  std::size_t total = 0;
  for (const auto& [name, e] : params) {
    if (!e.trainable) continue;
    extents.emplace_back(name, e.value.size());
    total += e.value.size();
  }
  require(total > 0, ErrorKind::InvalidArgument, "grad_check: no trainable parameters");

  params.zero_grad();
  const double reference = loss(params, true);
  const double again = loss(params, false);
  if (reference != again) {
    fail(ErrorKind::Diagnostic, "loss is not deterministic at fixed parameters");
  }

  GradCheckResult result;
  result.probes = probes;
  const int max_redraws = 20 * probes;
  for (int p = 0; p < probes; ++p) {
    std::size_t flat = rng.below(total);
    std::size_t slot = 0;
    while (flat >= extents[slot].second) flat -= extents[slot++].second;
    const std::string& name = extents[slot].first;
    ParamEntry& e = params.entry(name);
    const float original = e.value[flat];
    e.value[flat] = original + static_cast<float>(h);
    const double up = loss(params, false);
    const std::uint64_t up_region = region ? region(params) : 0;
    e.value[flat] = original - static_cast<float>(h);
    const double down = loss(params, false);
    const std::uint64_t down_region = region ? region(params) : 0;
    e.value[flat] = original;
    if (up_region != down_region) {
      if (++result.redrawn > max_redraws) {
        fail(ErrorKind::Diagnostic, "grad_check: too many probes straddle kinks; reduce h or the model");
      }
      --p;
      continue;
    }
    // use the perturbation actually representable in float32
    const double step = static_cast<double>(original + static_cast<float>(h)) -
                        static_cast<double>(original - static_cast<float>(h));
    const double numeric = (up - down) / step;
    const double analytic = e.grad[flat];
    const double err = relative_error(analytic, numeric, floor);
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_name = name;
      result.worst_index = flat;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace ddep
