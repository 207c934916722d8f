#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ddep/rng.hpp"
#include "ddep/tensor.hpp"

namespace ddep {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Class ids of the synthetic shapes dataset.
enum ShapeClass : std::uint8_t { kBackground = 0, kDisk = 1, kSquare = 2, kTriangle = 3, kAnnulus = 4 };

struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;  // row-major

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = kBackground);
  std::uint8_t& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  bool operator==(const Mask&) const = default;
};

struct Sample {
  Tensor image;  // 3 x H x W, values in [0, 1] before normalization
  Mask mask;
  int class_label = 0;
};

struct DatasetSpec {
  int num_samples = 1000;
  int image_size = 64;
  int num_classes = 5;
  std::uint64_t seed = 0;
  int min_shapes = 1;
  int max_shapes = 3;
  bool noise_free = false;

  void validate() const;
};

/// Renders sample `index` of the dataset described by `spec`. A pure
/// function of (spec, index).
Sample gen_sample(const DatasetSpec& spec, int index);
std::vector<Sample> gen_dataset(const DatasetSpec& spec);

struct NormStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
};

/// Per-channel statistics over every pixel of every image. Per-image partial
/// sums are combined in sorted order, so the result does not depend on the
/// order of `samples`.
NormStats compute_norm_stats(std::span<const Sample> samples);
Tensor normalize(const Tensor& image, const NormStats& stats);

/// ceil(fraction * n) distinct indices drawn uniformly, sorted ascending.
std::vector<int> subset_labels(int n, double fraction, std::uint64_t seed);

/// Random crop of `crop_size` x `crop_size` followed by a left-right flip
/// with probability 0.5, applied identically to image and mask. Draws the
/// row offset, column offset and flip coin from `rng`, in that order.
std::pair<Tensor, Mask> augment(const Tensor& image, const Mask& mask, Rng& rng, int crop_size);
std::pair<Tensor, Mask> crop_flip(const Tensor& image, const Mask& mask, int top, int left, int crop_size, bool flip);

/// Stacks images into an N x 3 x H x W batch and masks into NHW labels.
Tensor stack_images(std::span<const Tensor> images);
std::vector<int> stack_masks(std::span<const Mask> masks);

void save_image_png(const std::string& path, const Tensor& image);
Tensor load_image_png(const std::string& path);
void save_mask_png(const std::string& path, const Mask& mask);
/// Rejects labels >= num_classes other than the ignore label.
Mask load_mask_png(const std::string& path, int num_classes);

struct ManifestEntry {
  std::string image_path;
  std::string mask_path;
  int class_label = 0;
};

/// Writes `<stem>.png` and `<stem>_mask.png` under `dir`.
ManifestEntry save_sample(const std::string& dir, const std::string& stem, const Sample& sample);
Sample load_sample(const ManifestEntry& entry, int num_classes);

/// One line per sample: image_path<TAB>mask_path<TAB>class_label.
void write_manifest(const std::string& path, std::span<const ManifestEntry> entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace ddep
