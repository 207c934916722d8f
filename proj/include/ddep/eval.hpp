#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddep/data.hpp"
#include "ddep/model.hpp"

namespace ddep {

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return num_classes_; }
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt * num_classes_ + pred)]; }
  std::uint64_t& at(int gt, int pred) { return counts_[static_cast<std::size_t>(gt * num_classes_ + pred)]; }
  std::uint64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int num_classes_;
  std::vector<std::uint64_t> counts_;
};

/// Counts every pixel whose ground truth is not the ignore label.
void confusion_update(ConfusionMatrix& cm, const Mask& pred, const Mask& gt);

struct EvalReport {
  /// Absent for classes with an empty union.
  std::vector<std::optional<double>> iou;
  double miou = 0.0;
  std::uint64_t pixels = 0;
  std::string protocol;
};

/// Mean IoU over classes with a non-empty union. Throws UndefinedMetric if
/// there are none.
EvalReport miou(const ConfusionMatrix& cm, const std::string& protocol = "");

/// CSV: a `# protocol: ...` comment, `class_id,iou` rows (empty iou for
/// absent classes) and a `miou,<value>` footer.
void write_report(const std::string& path, const EvalReport& report);
std::string format_report(const EvalReport& report);

/// Per-pixel argmax over the class axis of N x C x H x W logits; ties go to
/// the lowest class index.
std::vector<Mask> argmax_masks(const Tensor& logits);

/// Maps an N x 3 x H x W batch to N x C x H x W logits.
using Predictor = std::function<Tensor(const Tensor&)>;
Predictor model_predictor(const Model& model);

Tensor flip_width(const Tensor& x);
/// Bilinear resize of N x C x H x W with half-pixel centers and edge clamp.
/// Same-size resize is an exact copy.
Tensor resize_bilinear(const Tensor& x, int height, int width);

/// (f(x) + unflip(f(flip(x)))) / 2.
Tensor infer_flip(const Predictor& f, const Tensor& x);

/// Averages logits over distinct scales (duplicates do not change a uniform
/// average). Each scaled extent is rounded to the nearest multiple of
/// `divisor` and must be at least `divisor`.
Tensor infer_multiscale(const Predictor& f, const Tensor& x, std::span<const double> scales, bool flip, int divisor);

/// Splits the width into patch_width tiles, runs `per_patch` on each and
/// concatenates; no overlap blending.
Tensor infer_patched(const Predictor& per_patch, const Tensor& x, int patch_height, int patch_width);

struct InferenceProtocol {
  std::vector<double> scales{1.0};
  bool flip = false;
  /// 0 disables patching.
  int patch_width = 0;

  void validate() const;
  std::string describe() const;
};

Tensor infer(const Model& model, const Tensor& x, const InferenceProtocol& protocol);

/// Runs `protocol` on every image (already normalized) and scores against
/// the masks.
EvalReport evaluate(const Model& model, std::span<const Tensor> images, std::span<const Mask> masks,
                    const InferenceProtocol& protocol, int batch_size = 16);

}  // namespace ddep
