#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "ddep/data.hpp"
#include "ddep/error.hpp"

using namespace ddep;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::Diagnostic;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ddep_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// 4 x 4 mask with distinct labels per column and a tagged image channel.
std::pair<Tensor, Mask> labeled_grid() {
  Tensor image(Shape{3, 4, 4});
  Mask mask(4, 4);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      mask.at(r, c) = static_cast<std::uint8_t>((r + c) % 5);
      for (int ch = 0; ch < 3; ++ch) image.at(ch, r, c) = static_cast<float>(100 * ch + 10 * r + c);
    }
  }
  return {image, mask};
}

}  // namespace

TEST(GenSample, SameSeedAndIndexIsBitIdentical) {
  DatasetSpec spec;
  spec.seed = 7;
  const Sample a = gen_sample(spec, 0);
  const Sample b = gen_sample(spec, 0);
  ASSERT_EQ(a.image.size(), b.image.size());
  EXPECT_EQ(0, std::memcmp(a.image.ptr(), b.image.ptr(), a.image.size() * sizeof(float)));
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.class_label, b.class_label);
  const Sample c = gen_sample(spec, 1);
  EXPECT_NE(a.mask, c.mask);
}

TEST(GenSample, NoShapesMeansAllBackground) {
  DatasetSpec spec;
  spec.min_shapes = 0;
  spec.max_shapes = 0;
  for (int i = 0; i < 5; ++i) {
    const Sample s = gen_sample(spec, i);
    EXPECT_TRUE(std::all_of(s.mask.labels.begin(), s.mask.labels.end(), [](auto v) { return v == kBackground; }));
    EXPECT_EQ(s.class_label, kBackground);
  }
}

TEST(GenSample, EveryClassAppearsAtDefaults) {
  DatasetSpec spec;
  spec.num_samples = 1000;
  std::set<int> seen, labels;
  for (int i = 0; i < spec.num_samples; ++i) {
    const Sample s = gen_sample(spec, i);
    seen.insert(s.mask.labels.begin(), s.mask.labels.end());
    labels.insert(s.class_label);
  }
  EXPECT_EQ(seen, (std::set<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(labels, (std::set<int>{1, 2, 3, 4}));
}

TEST(GenSample, ValuesInRangeAndLabelVisible) {
  DatasetSpec spec;
  spec.num_samples = 50;
  for (int i = 0; i < spec.num_samples; ++i) {
    const Sample s = gen_sample(spec, i);
    EXPECT_EQ(s.image.shape(), (Shape{3, 64, 64}));
    for (float v : s.image.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (auto v : s.mask.labels) ASSERT_LT(v, 5);
    EXPECT_NE(std::count(s.mask.labels.begin(), s.mask.labels.end(), s.class_label), 0);
  }
}

TEST(GenSample, RejectsBadSpec) {
  DatasetSpec spec;
  spec.image_size = 60;
  EXPECT_EQ(kind_of([&] { gen_sample(spec, 0); }), ErrorKind::InvalidArgument);
  spec.image_size = 64;
  EXPECT_EQ(kind_of([&] { gen_sample(spec, spec.num_samples); }), ErrorKind::InvalidArgument);
}

TEST(NormStats, NormalizedDatasetHasUnitMoments) {
  DatasetSpec spec;
  spec.num_samples = 64;
  const std::vector<Sample> data = gen_dataset(spec);
  const NormStats stats = compute_norm_stats(data);
  std::vector<Sample> normalized = data;
  for (Sample& s : normalized) s.image = normalize(s.image, stats);
  const NormStats again = compute_norm_stats(normalized);
  for (int ch = 0; ch < 3; ++ch) {
    EXPECT_NEAR(again.mean[ch], 0.0, 0.01);
    EXPECT_NEAR(again.std[ch], 1.0, 0.01);
  }
}

TEST(NormStats, ConstantChannelIsInvalidData) {
  Sample s{Tensor(Shape{3, 4, 4}, 0.5f), Mask(4, 4), 0};
  std::vector<Sample> data{s, s};
  EXPECT_EQ(kind_of([&] { compute_norm_stats(data); }), ErrorKind::InvalidData);
}

TEST(NormStats, HandComputedToySet) {
  // channel 0: {0, 1} and {0.5, 0.5} -> mean 0.5, var (0.25 + 0.25 + 0 + 0) / 4
  // channel 1: {0, 0} and {0, 1}     -> mean 0.25, var (3 * 0.0625 + 0.5625) / 4
  // channel 2: {1, 1} and {0, 0}     -> mean 0.5, var 0.25
  Sample a{Tensor(Shape{3, 1, 2}, std::vector<float>{0, 1, 0, 0, 1, 1}), Mask(1, 2), 0};
  Sample b{Tensor(Shape{3, 1, 2}, std::vector<float>{0.5f, 0.5f, 0, 1, 0, 0}), Mask(1, 2), 0};
  std::vector<Sample> data{a, b};
  const NormStats st = compute_norm_stats(data);
  EXPECT_NEAR(st.mean[0], 0.5, 1e-12);
  EXPECT_NEAR(st.std[0], std::sqrt(0.125), 1e-12);
  EXPECT_NEAR(st.mean[1], 0.25, 1e-12);
  EXPECT_NEAR(st.std[1], std::sqrt(0.1875), 1e-12);
  EXPECT_NEAR(st.mean[2], 0.5, 1e-12);
  EXPECT_NEAR(st.std[2], 0.5, 1e-12);
}

TEST(NormStats, IndependentOfOrder) {
  DatasetSpec spec;
  spec.num_samples = 40;
  std::vector<Sample> data = gen_dataset(spec);
  const NormStats forward_order = compute_norm_stats(data);
  std::reverse(data.begin(), data.end());
  std::rotate(data.begin(), data.begin() + 13, data.end());
  const NormStats shuffled = compute_norm_stats(data);
  for (int ch = 0; ch < 3; ++ch) {
    EXPECT_EQ(forward_order.mean[ch], shuffled.mean[ch]);
    EXPECT_EQ(forward_order.std[ch], shuffled.std[ch]);
  }
}

TEST(SubsetLabels, FullFractionIsEveryIndex) {
  const std::vector<int> all = subset_labels(37, 1.0, 3);
  ASSERT_EQ(all.size(), 37u);
  for (int i = 0; i < 37; ++i) EXPECT_EQ(all[static_cast<std::size_t>(i)], i);
}

TEST(SubsetLabels, CountRoundsUp) {
  EXPECT_EQ(subset_labels(100, 1.0 / 30.0, 1).size(), 4u);
  EXPECT_EQ(subset_labels(1000, 0.05, 1).size(), 50u);
  EXPECT_EQ(subset_labels(1000, 0.01, 1).size(), 10u);
  EXPECT_EQ(subset_labels(1000, 0.1, 1).size(), 100u);
  EXPECT_EQ(subset_labels(1000, 0.2, 1).size(), 200u);
  EXPECT_EQ(subset_labels(10, 0.01, 1).size(), 1u);
}

TEST(SubsetLabels, DeterministicSortedUnique) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::vector<int> a = subset_labels(500, 0.13, seed);
    EXPECT_EQ(a, subset_labels(500, 0.13, seed));
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
    EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
    EXPECT_GE(a.front(), 0);
    EXPECT_LT(a.back(), 500);
  }
  EXPECT_NE(subset_labels(500, 0.1, 1), subset_labels(500, 0.1, 2));
}

TEST(SubsetLabels, RejectsBadFraction) {
  EXPECT_EQ(kind_of([] { subset_labels(10, 0.0, 1); }), ErrorKind::InvalidArgument);
  EXPECT_EQ(kind_of([] { subset_labels(10, -0.5, 1); }), ErrorKind::InvalidArgument);
  EXPECT_EQ(kind_of([] { subset_labels(10, 1.01, 1); }), ErrorKind::InvalidArgument);
}

TEST(Augment, FullCropNoFlipIsIdentity) {
  const auto [image, mask] = labeled_grid();
  const auto [out_image, out_mask] = crop_flip(image, mask, 0, 0, 4, false);
  EXPECT_EQ(out_mask, mask);
  for (std::size_t i = 0; i < image.size(); ++i) EXPECT_EQ(out_image[i], image[i]);
}

TEST(Augment, FlipIsInvolution) {
  const auto [image, mask] = labeled_grid();
  const auto [once_image, once_mask] = crop_flip(image, mask, 0, 0, 4, true);
  const auto [twice_image, twice_mask] = crop_flip(once_image, once_mask, 0, 0, 4, true);
  EXPECT_EQ(twice_mask, mask);
  for (std::size_t i = 0; i < image.size(); ++i) EXPECT_EQ(twice_image[i], image[i]);
}

TEST(Augment, FlippedPixelMirrorsColumn) {
  const auto [image, mask] = labeled_grid();
  const auto [flipped_image, flipped] = crop_flip(image, mask, 0, 0, 4, true);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      EXPECT_EQ(flipped.at(r, c), mask.at(r, 3 - c));
      // image channel 1 value encodes 100 + 10 r + c
      EXPECT_EQ(flipped_image.at(1, r, c), 100.0f + 10.0f * r + (3 - c));
    }
  }
}

TEST(Augment, ImageAndMaskStayAligned) {
  const auto [image, mask] = labeled_grid();
  Rng rng(5);
  int flips = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const auto [ci, cm] = augment(image, mask, rng, 3);
    // recover the source column from the tagged image and check the label there
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        const int v = static_cast<int>(ci.at(0, r, c));
        EXPECT_EQ(cm.at(r, c), mask.at(v / 10, v % 10));
      }
    }
    const int c0 = static_cast<int>(ci.at(0, 0, 0)) % 10;
    const int c1 = static_cast<int>(ci.at(0, 0, 1)) % 10;
    if (c1 < c0) ++flips;
  }
  EXPECT_NEAR(flips / 400.0, 0.5, 0.1);
}

TEST(Augment, FullCropPreservesLabelMultiset) {
  DatasetSpec spec;
  const Sample s = gen_sample(spec, 3);
  Rng rng(2);
  for (int t = 0; t < 4; ++t) {
    auto [img, m] = augment(s.image, s.mask, rng, 64);
    std::vector<std::uint8_t> a = s.mask.labels, b = m.labels;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

TEST(Augment, CropLargerThanImageRejected) {
  const auto [image, mask] = labeled_grid();
  Rng rng(1);
  EXPECT_EQ(kind_of([&] { augment(image, mask, rng, 5); }), ErrorKind::InvalidArgument);
}

TEST(Png, MaskRoundTripIsBitExactWithIgnore) {
  const fs::path dir = scratch_dir("mask");
  Mask m(5, 7);
  for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = static_cast<std::uint8_t>(i % 6 == 5 ? 255 : i % 5);
  save_mask_png((dir / "m.png").string(), m);
  const Mask back = load_mask_png((dir / "m.png").string(), 5);
  EXPECT_EQ(back, m);
  EXPECT_EQ(std::count(back.labels.begin(), back.labels.end(), 255), std::count(m.labels.begin(), m.labels.end(), 255));
}

TEST(Png, ImageRoundTripWithinQuantum) {
  const fs::path dir = scratch_dir("image");
  const Sample s = gen_sample(DatasetSpec{}, 0);
  save_image_png((dir / "i.png").string(), s.image);
  const Tensor back = load_image_png((dir / "i.png").string());
  ASSERT_EQ(back.shape(), s.image.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < back.size(); ++i) worst = std::max(worst, std::abs(double(back[i]) - s.image[i]));
  EXPECT_LE(worst, 1.0 / 255.0);
}

TEST(Png, OutOfRangeMaskValueIsInvalidData) {
  const fs::path dir = scratch_dir("badmask");
  Mask m(2, 2);
  m.at(1, 1) = 7;
  save_mask_png((dir / "m.png").string(), m);
  EXPECT_EQ(kind_of([&] { load_mask_png((dir / "m.png").string(), 5); }), ErrorKind::InvalidData);
}

TEST(Png, CorruptFileIsIoErrorNamingPath) {
  const fs::path dir = scratch_dir("corrupt");
  const std::string path = (dir / "x.png").string();
  std::ofstream(path) << "not a png";
  try {
    load_image_png(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
    EXPECT_NE(std::string(e.what()).find(path), std::string::npos);
  }
  EXPECT_EQ(kind_of([&] { load_mask_png((dir / "missing.png").string(), 5); }), ErrorKind::Io);
}

TEST(Manifest, SamplesRoundTrip) {
  const fs::path dir = scratch_dir("manifest");
  DatasetSpec spec;
  spec.num_samples = 3;
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < 3; ++i) entries.push_back(save_sample(dir.string(), "s" + std::to_string(i), gen_sample(spec, i)));
  write_manifest((dir / "manifest.tsv").string(), entries);
  const std::vector<ManifestEntry> back = read_manifest((dir / "manifest.tsv").string());
  ASSERT_EQ(back.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    const Sample s = load_sample(back[static_cast<std::size_t>(i)], 5);
    const Sample ref = gen_sample(spec, i);
    EXPECT_EQ(s.mask, ref.mask);
    EXPECT_EQ(s.class_label, ref.class_label);
  }
  std::ofstream((dir / "bad.tsv").string()) << "a.png\tb.png\n";
  EXPECT_EQ(kind_of([&] { read_manifest((dir / "bad.tsv").string()); }), ErrorKind::InvalidData);
}
