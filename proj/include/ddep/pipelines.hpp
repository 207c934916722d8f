#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ddep/config.hpp"
#include "ddep/corruption.hpp"
#include "ddep/data.hpp"
#include "ddep/eval.hpp"
#include "ddep/model.hpp"
#include "ddep/optim.hpp"

namespace ddep {

enum class Stage { EncoderSupervised, DeP, DDeP, FineTune };
std::string to_string(Stage stage);
Stage parse_stage(const std::string& text);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Stage stage = Stage::FineTune;
  ModelConfig model;
  /// Values only; optimizer state is not persisted.
  ParamSet params;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  std::string config_hash;
  /// Effective stage configuration (flat key = value text).
  std::string config_text;
  NormStats norm;

  /// The embedded config blob: config_text plus checkpoint.* metadata.
  std::string blob() const;
};

/// Binary layout: "DDEP", u32 version, u32-length-prefixed config blob,
/// u32 tensor count, then per tensor a u32-length-prefixed name, u8 rank,
/// u32 extents and little-endian float32 values. Tensors are written in name
/// order, so save -> load -> save is byte-identical.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes, const std::string& origin = "<memory>");
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Throws ConfigMismatch listing the differing architecture fields. With
/// `encoder_only`, decoder fields are not compared.
void check_compatible(const ModelConfig& expected, const ModelConfig& found, bool encoder_only, const std::string& origin);

struct TrainLog {
  struct Step {
    std::int64_t step;
    double lr;
    double loss;
  };
  struct Metric {
    int epoch;
    std::string name;
    double value;
  };
  std::vector<Step> steps;
  std::vector<Metric> metrics;

  std::string steps_csv() const;
  std::string metrics_csv() const;
  /// Writes `<prefix>steps.csv` and `<prefix>metrics.csv`.
  void write(const std::string& prefix) const;
};

struct StageOutput {
  Checkpoint checkpoint;
  TrainLog log;
  /// Fine-tuning only: the best round and the last round.
  std::optional<EvalReport> report;
  std::optional<EvalReport> final_report;
  std::vector<std::string> warnings;
};

/// Progress callback; receives one line per epoch or evaluation round.
using ProgressFn = std::function<void(const std::string&)>;

// Config -> domain objects.
DatasetSpec dataset_spec(const Config& cfg, const std::string& section);
std::vector<Sample> load_dataset(const Config& cfg, const std::string& section);
ModelConfig model_config(const Config& cfg, Head head);
NoiseSpec noise_spec(const Config& cfg);
InferenceProtocol inference_protocol(const Config& cfg);

/// Builds every domain object the config describes, so config errors surface
/// before any training. Domain validation failures become InvalidConfig.
void validate_config(const Config& cfg);

/// Content hash of the keys a stage reads, chained with the hash of its
/// input checkpoint (empty when it has none). Checkpoint paths are excluded so a
/// cached stage is found regardless of where its inputs live.
std::string stage_hash(const Config& cfg, Stage stage, const std::string& upstream_hash);
/// The stage the denoise section configures.
Stage denoise_stage(const Config& cfg);
/// Whether the denoise stage consumes an encoder checkpoint.
bool denoise_needs_encoder(const Config& cfg);

/// Supervised classification pretraining of the encoder. The decoder is
/// frozen and not saved; the checkpoint holds encoder.* and
/// head.classifier.*.
StageOutput pretrain_encoder(const Config& cfg, const ProgressFn& progress = {});

/// Denoising pretraining. DDeP loads encoder.* from denoise.init_from and
/// keeps it bit-frozen; DeP trains every parameter, from seed init or (with
/// denoise.dep_init = encoder) from the supervised encoder.
StageOutput pretrain_denoise(const Config& cfg, const ProgressFn& progress = {});

/// Segmentation fine-tuning on the label-fraction subset. Initialization by
/// finetune.init: none (seed init), encoder (encoder.* from init_from),
/// ddep / dep (encoder.* and decoder.* from init_from). Returns the
/// best-validation-mIoU checkpoint and its evaluation under the configured
/// protocol.
StageOutput finetune(const Config& cfg, const ProgressFn& progress = {});

}  // namespace ddep
