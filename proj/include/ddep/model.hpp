#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ddep/autodiff.hpp"
#include "ddep/param_set.hpp"

namespace ddep {

enum class Head { Classifier, Denoiser, Segmenter };
enum class TrainScope { All, DecoderAndHeadOnly, EncoderAndHeadOnly };

std::string to_string(Head head);
Head parse_head(const std::string& text);

/// Architecture of the encoder-decoder family.
///
/// The encoder is a full-resolution stem conv followed by one residual stage
/// per entry of `encoder_widths`, each halving the resolution. The decoder
/// has the same number of stages; stage j upsamples (nearest x2 + 3x3 conv)
/// and fuses the encoder feature at the new resolution (stem output for the
/// last stage), so skips pair one-to-one with stages. The network input
/// itself never reaches the heads except through the encoder.
struct ModelConfig {
  int in_channels = 3;
  std::vector<int> encoder_widths{16, 32, 64, 128};
  std::vector<int> base_decoder_widths{64, 32, 16, 8};
  int decoder_width_multiplier = 1;
  bool bottleneck_attention = false;
  int num_classes = 5;
  Head head = Head::Segmenter;

  void validate() const;
  int num_stages() const { return static_cast<int>(encoder_widths.size()); }
  /// Spatial extents must be multiples of this.
  int divisor() const { return 1 << num_stages(); }
  std::vector<int> decoder_widths() const;
  /// Names of architecture fields (everything but the head) that differ.
  std::vector<std::string> architecture_diff(const ModelConfig& other) const;
  bool operator==(const ModelConfig&) const = default;
};

class Model {
 public:
  Model(ModelConfig config, ParamSet params) : config_(std::move(config)), params_(std::move(params)) {}

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  std::map<std::string, bool> trainable_mask() const;

 private:
  ModelConfig config_;
  ParamSet params_;
};

/// Deterministic He-normal initialization; each tensor draws from a stream
/// derived from (seed, parameter name) so adding or removing a head never
/// perturbs the other tensors.
Model build_model(const ModelConfig& config, std::uint64_t seed);

/// Fresh parameters for the given head, initialized from (seed, name).
void init_head(ParamSet& params, const ModelConfig& config, std::uint64_t seed);

struct ForwardOptions {
  /// Replace the skip feature of this decoder stage (1-based) with zeros.
  std::optional<int> ablate_skip_stage;
};

/// Records the forward pass on `tape`. Classifier -> [N, classes];
/// Denoiser -> [N, in_channels, H, W]; Segmenter -> [N, classes, H, W].
ad::Var forward(const Model& model, ad::Tape& tape, ad::Var x, const ForwardOptions& options = {});
/// Gradient-free forward.
Tensor forward(const Model& model, const Tensor& x, const ForwardOptions& options = {});

void set_trainable(Model& model, TrainScope scope);

/// Replaces the head; encoder and decoder tensors are untouched.
void swap_head(Model& model, Head head, int num_classes, std::uint64_t seed);

/// Throws InvalidArgument naming the required divisor when x does not fit.
void check_input(const ModelConfig& config, const Shape& shape);

}  // namespace ddep
