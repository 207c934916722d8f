#pragma once

#include <string>
#include <variant>
#include <vector>

#include "ddep/rng.hpp"
#include "ddep/tensor.hpp"

namespace ddep {

enum class Formulation { Simple, Scaled };
enum class DenoiseTarget { CleanImage, Noise };

struct FixedSigma {
  double sigma = 0.0;
};
struct FixedGamma {
  double gamma = 1.0;
};
struct UniformGamma {
  double lo = 1.0;
  double hi = 1.0;
};
using NoiseMagnitude = std::variant<FixedSigma, FixedGamma, UniformGamma>;

/// Corruption recipe. Simple additive noise is parameterized by sigma
/// (x + sigma * eps); scaled additive noise by gamma
/// (sqrt(gamma) x + sqrt(1 - gamma) eps). Mixing the two is rejected, use
/// sigma_to_gamma / gamma_to_sigma to convert explicitly.
class NoiseSpec {
 public:
  NoiseSpec(Formulation formulation, DenoiseTarget target, NoiseMagnitude magnitude);

  Formulation formulation() const { return formulation_; }
  DenoiseTarget target() const { return target_; }
  const NoiseMagnitude& magnitude() const { return magnitude_; }
  /// True when no noise is added at all (sigma = 0 or gamma = 1).
  bool degenerate() const;
  std::string describe() const;

 private:
  Formulation formulation_;
  DenoiseTarget target_;
  NoiseMagnitude magnitude_;
};

struct CorruptionSample {
  Tensor noisy;
  Tensor noise;
  /// One gamma per batch element; 1/(1+sigma^2) under the simple formulation.
  std::vector<double> gamma_used;
};

double sigma_to_gamma(double sigma);
double gamma_to_sigma(double gamma);

/// Draws eps ~ N(0,1) per element from `rng` and applies `spec` to the
/// batch `x` (first axis = batch). Under UniformGamma one gamma is drawn per
/// batch element from a child stream, so the eps sequence is identical to
/// the fixed-gamma case for the same rng state.
CorruptionSample corrupt(const Tensor& x, const NoiseSpec& spec, Rng& rng);

/// Same as `corrupt` with an injected noise tensor and per-element gammas
/// (ignored for FixedSigma / FixedGamma).
CorruptionSample corrupt_with_noise(const Tensor& x, const NoiseSpec& spec, Tensor noise,
                                    std::vector<double> gammas = {});

/// The regression target: the clean batch or the drawn noise.
const Tensor& denoise_target(const Tensor& x, const CorruptionSample& sample, const NoiseSpec& spec);

/// Mean over all elements of the squared difference.
double denoising_loss(const Tensor& prediction, const Tensor& target);

/// Inverts the corruption given a noise estimate:
/// scaled: (noisy - sqrt(1-gamma) eps) / sqrt(gamma); simple: noisy - sigma eps
/// with sigma = gamma_to_sigma(gamma).
Tensor recover_clean(const Tensor& noisy, const Tensor& predicted_noise, double gamma,
                     Formulation formulation = Formulation::Scaled);
/// Per-batch-element gammas, as produced by UniformGamma.
Tensor recover_clean(const Tensor& noisy, const Tensor& predicted_noise, const std::vector<double>& gammas,
                     Formulation formulation = Formulation::Scaled);

}  // namespace ddep
