#include "ddep/corruption.hpp"

#include <cmath>
#include <sstream>

#include "ddep/error.hpp"

namespace ddep {

namespace {

void check_gamma(double gamma, const char* what) {
  require(std::isfinite(gamma) && gamma > 0.0 && gamma <= 1.0, ErrorKind::InvalidArgument,
          std::string(what) + " must lie in (0, 1], got " + std::to_string(gamma));
}

std::size_t per_element(const Tensor& x) {
  require(x.rank() >= 1 && !x.empty(), ErrorKind::InvalidArgument, "corruption needs a non-empty batch");
  return x.size() / static_cast<std::size_t>(x.dim(0));
}

}  // namespace

NoiseSpec::NoiseSpec(Formulation formulation, DenoiseTarget target, NoiseMagnitude magnitude)
    : formulation_(formulation), target_(target), magnitude_(magnitude) {
  if (const auto* s = std::get_if<FixedSigma>(&magnitude_)) {
    require(formulation_ == Formulation::Simple, ErrorKind::InvalidArgument,
            "a fixed sigma parameterizes the simple formulation; convert with sigma_to_gamma for scaled noise");
    require(std::isfinite(s->sigma) && s->sigma >= 0.0, ErrorKind::InvalidArgument,
            "sigma must be finite and >= 0");
  } else {
    require(formulation_ == Formulation::Scaled, ErrorKind::InvalidArgument,
            "gamma parameterizes the scaled formulation; convert with gamma_to_sigma for simple noise");
    if (const auto* g = std::get_if<FixedGamma>(&magnitude_)) {
      check_gamma(g->gamma, "gamma");
    } else {
      const auto& u = std::get<UniformGamma>(magnitude_);
      check_gamma(u.lo, "gamma_lo");
      check_gamma(u.hi, "gamma_hi");
      require(u.lo <= u.hi, ErrorKind::InvalidArgument, "gamma_lo must not exceed gamma_hi");
    }
  }
}

bool NoiseSpec::degenerate() const {
  if (const auto* s = std::get_if<FixedSigma>(&magnitude_)) return s->sigma == 0.0;
  if (const auto* g = std::get_if<FixedGamma>(&magnitude_)) return g->gamma == 1.0;
  return std::get<UniformGamma>(magnitude_).lo == 1.0;
}

std::string NoiseSpec::describe() const {
  std::ostringstream os;
  os << (formulation_ == Formulation::Simple ? "simple" : "scaled") << ",target="
     << (target_ == DenoiseTarget::Noise ? "noise" : "image") << ",";
  if (const auto* s = std::get_if<FixedSigma>(&magnitude_)) {
    os << "sigma=" << s->sigma;
  } else if (const auto* g = std::get_if<FixedGamma>(&magnitude_)) {
    os << "gamma=" << g->gamma;
  } else {
    const auto& u = std::get<UniformGamma>(magnitude_);
    os << "gamma~U[" << u.lo << "," << u.hi << "]";
  }
  return os.str();
}

double sigma_to_gamma(double sigma) {
  require(std::isfinite(sigma) && sigma >= 0.0, ErrorKind::InvalidArgument,
          "sigma must be finite and >= 0, got " + std::to_string(sigma));
  return 1.0 / (1.0 + sigma * sigma);
}

double gamma_to_sigma(double gamma) {
  check_gamma(gamma, "gamma");
  return std::sqrt(1.0 / gamma - 1.0);
}

CorruptionSample corrupt(const Tensor& x, const NoiseSpec& spec, Rng& rng) {
  require(x.all_finite(), ErrorKind::InvalidArgument, "corrupt: input contains non-finite values");
  const int batch = x.dim(0);
  std::vector<double> gammas;
  if (const auto* u = std::get_if<UniformGamma>(&spec.magnitude())) {
    Rng gamma_stream = rng.split(0x67616d6d61ULL);
    gammas.reserve(static_cast<std::size_t>(batch));
    for (int n = 0; n < batch; ++n) gammas.push_back(gamma_stream.uniform(u->lo, u->hi));
  }
  Tensor noise(x.shape());
  for (float& e : noise.data()) e = static_cast<float>(rng.normal());
  return corrupt_with_noise(x, spec, std::move(noise), std::move(gammas));
}

CorruptionSample corrupt_with_noise(const Tensor& x, const NoiseSpec& spec, Tensor noise,
                                    std::vector<double> gammas) {
  check_same_shape(x, noise, "corrupt");
  require(x.all_finite(), ErrorKind::InvalidArgument, "corrupt: input contains non-finite values");
  const int batch = x.dim(0);
  const std::size_t stride = per_element(x);
  CorruptionSample out;
  out.noisy = Tensor(x.shape());

  if (const auto* s = std::get_if<FixedSigma>(&spec.magnitude())) {
    const auto sigma = static_cast<float>(s->sigma);
    for (std::size_t i = 0; i < x.size(); ++i) out.noisy[i] = x[i] + sigma * noise[i];
    out.gamma_used.assign(static_cast<std::size_t>(batch), sigma_to_gamma(s->sigma));
  } else {
    if (const auto* g = std::get_if<FixedGamma>(&spec.magnitude())) {
      gammas.assign(static_cast<std::size_t>(batch), g->gamma);
    }
    require(gammas.size() == static_cast<std::size_t>(batch), ErrorKind::InvalidArgument,
            "corrupt: need one gamma per batch element");
    for (int n = 0; n < batch; ++n) {
      check_gamma(gammas[n], "gamma");
      const auto signal = static_cast<float>(std::sqrt(gammas[n]));
      const auto scale = static_cast<float>(std::sqrt(1.0 - gammas[n]));
      const std::size_t base = n * stride;
      for (std::size_t i = base; i < base + stride; ++i) out.noisy[i] = signal * x[i] + scale * noise[i];
    }
    out.gamma_used = std::move(gammas);
  }
  out.noise = std::move(noise);
  return out;
}

const Tensor& denoise_target(const Tensor& x, const CorruptionSample& sample, const NoiseSpec& spec) {
  check_same_shape(x, sample.noise, "denoise_target");
  return spec.target() == DenoiseTarget::CleanImage ? x : sample.noise;
}

double denoising_loss(const Tensor& prediction, const Tensor& target) {
  check_same_shape(prediction, target, "denoising_loss");
  require(!prediction.empty(), ErrorKind::InvalidArgument, "denoising_loss of empty tensors");
  double total = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = static_cast<double>(prediction[i]) - target[i];
    total += d * d;
  }
  return total / static_cast<double>(prediction.size());
}

Tensor recover_clean(const Tensor& noisy, const Tensor& predicted_noise, double gamma, Formulation formulation) {
  return recover_clean(noisy, predicted_noise, std::vector<double>(static_cast<std::size_t>(noisy.dim(0)), gamma),
                       formulation);
}

Tensor recover_clean(const Tensor& noisy, const Tensor& predicted_noise, const std::vector<double>& gammas,
                     Formulation formulation) {
  check_same_shape(noisy, predicted_noise, "recover_clean");
  require(gammas.size() == static_cast<std::size_t>(noisy.dim(0)), ErrorKind::InvalidArgument,
          "recover_clean: need one gamma per batch element");
  const std::size_t stride = per_element(noisy);
  Tensor out(noisy.shape());
  for (std::size_t n = 0; n < gammas.size(); ++n) {
    check_gamma(gammas[n], "gamma");
    const std::size_t base = n * stride;
    if (formulation == Formulation::Simple) {
      const auto sigma = static_cast<float>(gamma_to_sigma(gammas[n]));
      for (std::size_t i = base; i < base + stride; ++i) out[i] = noisy[i] - sigma * predicted_noise[i];
    } else {
      const auto signal = static_cast<float>(std::sqrt(gammas[n]));
      const auto scale = static_cast<float>(std::sqrt(1.0 - gammas[n]));
      for (std::size_t i = base; i < base + stride; ++i) {
        out[i] = (noisy[i] - scale * predicted_noise[i]) / signal;
      }
    }
  }
  return out;
}

}  // namespace ddep
