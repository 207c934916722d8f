#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ddep/error.hpp"
#include "ddep/eval.hpp"

using namespace ddep;

namespace {

Mask mask_of(int h, int w, std::vector<std::uint8_t> v) {
  Mask m(h, w);
  m.labels = std::move(v);
  return m;
}

ModelConfig tiny_segmenter() {
  ModelConfig cfg;
  cfg.encoder_widths = {8, 8, 16, 16};
  cfg.base_decoder_widths = {16, 8, 8, 8};
  cfg.num_classes = 5;
  cfg.head = Head::Segmenter;
  return cfg;
}

Tensor random_batch(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(s);
  for (float& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - b[i]));
  return worst;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(float)) == 0;
}

// Per-class pixel sets, intersected and united directly.
double brute_force_miou(const Mask& pred, const Mask& gt, int classes, bool& defined) {
  double sum = 0.0;
  int counted = 0;
  for (int k = 0; k < classes; ++k) {
    std::set<std::size_t> p, g;
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      if (gt.labels[i] == kIgnoreLabel) continue;
      if (pred.labels[i] == k) p.insert(i);
      if (gt.labels[i] == k) g.insert(i);
    }
    std::set<std::size_t> uni = p;
    uni.insert(g.begin(), g.end());
    std::size_t inter = 0;
    for (std::size_t i : p) inter += g.count(i);
    if (uni.empty()) continue;
    sum += static_cast<double>(inter) / static_cast<double>(uni.size());
    ++counted;
  }
  defined = counted > 0;
  return defined ? sum / counted : 0.0;
}

// Independent bilinear resize in double for recomposition checks.
Tensor naive_resize(const Tensor& x, int oh, int ow) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{n, c, oh, ow});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < oh; ++r)
        for (int col = 0; col < ow; ++col) {
          const double sy = std::clamp((r + 0.5) * h / oh - 0.5, 0.0, h - 1.0);
          const double sx = std::clamp((col + 0.5) * w / ow - 0.5, 0.0, w - 1.0);
          const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
          const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const double fy = sy - y0, fx = sx - x0;
          const double v = (1 - fy) * ((1 - fx) * x.at(b, ch, y0, x0) + fx * x.at(b, ch, y0, x1)) +
                           fy * ((1 - fx) * x.at(b, ch, y1, x0) + fx * x.at(b, ch, y1, x1));
          out.at(b, ch, r, col) = static_cast<float>(v);
        }
  return out;
}

}  // namespace

TEST(Confusion, PerfectPredictionIsDiagonal) {
  const Mask m = mask_of(2, 3, {0, 1, 2, 2, 1, 0});
  ConfusionMatrix cm(3);
  confusion_update(cm, m, m);
  for (int g = 0; g < 3; ++g)
    for (int p = 0; p < 3; ++p) EXPECT_EQ(cm.at(g, p), g == p ? 2u : 0u);
}

TEST(Confusion, IgnoredPixelsNotCounted) {
  ConfusionMatrix cm(3);
  confusion_update(cm, mask_of(2, 2, {0, 1, 2, 0}), mask_of(2, 2, {255, 255, 255, 255}));
  EXPECT_EQ(cm.total(), 0u);
}

TEST(Confusion, HandCountedTwoByTwo) {
  ConfusionMatrix cm(2);
  confusion_update(cm, mask_of(2, 2, {0, 1, 1, 1}), mask_of(2, 2, {0, 0, 1, 1}));
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.at(1, 0), 0u);
  EXPECT_EQ(cm.at(1, 1), 2u);
  const EvalReport r = miou(cm);
  EXPECT_DOUBLE_EQ(*r.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(*r.iou[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.miou, 7.0 / 12.0);
}

TEST(Confusion, OutOfRangePredictionIsInvalidData) {
  ConfusionMatrix cm(2);
  try {
    confusion_update(cm, mask_of(1, 2, {0, 2}), mask_of(1, 2, {0, 1}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidData);
  }
}

TEST(Miou, PerfectPredictionIsOne) {
  ConfusionMatrix cm(5);
  confusion_update(cm, mask_of(2, 2, {0, 3, 3, 1}), mask_of(2, 2, {0, 3, 3, 255}));
  const EvalReport r = miou(cm);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_FALSE(r.iou[1].has_value());
  EXPECT_EQ(*r.iou[3], 1.0);
}

TEST(Miou, HalfAndHalfAgainstAllZero) {
  ConfusionMatrix cm(2);
  confusion_update(cm, mask_of(2, 2, {0, 0, 0, 0}), mask_of(2, 2, {0, 0, 1, 1}));
  const EvalReport r = miou(cm);
  EXPECT_DOUBLE_EQ(*r.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(*r.iou[1], 0.0);
  EXPECT_DOUBLE_EQ(r.miou, 0.25);
}

TEST(Miou, AllUnionsZeroIsUndefined) {
  ConfusionMatrix cm(3);
  try {
    miou(cm);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UndefinedMetric);
  }
}

TEST(Miou, MatchesBruteForceOracleExactly) {
  Rng rng(11);
  int checked = 0;
  for (int classes : {2, 3, 5}) {
    for (int trial = 0; trial < 100; ++trial) {
      Mask gt(8, 8), pred(8, 8);
      for (std::size_t i = 0; i < 64; ++i) {
        gt.labels[i] = rng.bernoulli(0.15) ? kIgnoreLabel : static_cast<std::uint8_t>(rng.below(classes));
        pred.labels[i] = static_cast<std::uint8_t>(rng.below(classes));
      }
      ConfusionMatrix cm(classes);
      confusion_update(cm, pred, gt);
      bool defined = false;
      const double oracle = brute_force_miou(pred, gt, classes, defined);
      if (!defined) continue;
      EXPECT_EQ(miou(cm).miou, oracle);
      ++checked;
    }
  }
  EXPECT_EQ(checked, 300);
}

TEST(Confusion, AdditiveUnderSharding) {
  Rng rng(3);
  std::vector<Mask> preds, gts;
  for (int i = 0; i < 12; ++i) {
    Mask g(4, 4), p(4, 4);
    for (std::size_t k = 0; k < 16; ++k) {
      g.labels[k] = rng.bernoulli(0.1) ? kIgnoreLabel : static_cast<std::uint8_t>(rng.below(3));
      p.labels[k] = static_cast<std::uint8_t>(rng.below(3));
    }
    preds.push_back(p);
    gts.push_back(g);
  }
  ConfusionMatrix whole(3), a(3), b(3);
  for (int i = 0; i < 12; ++i) confusion_update(whole, preds[i], gts[i]);
  for (int i = 11; i >= 0; --i) confusion_update(i % 2 ? a : b, preds[i], gts[i]);
  a += b;
  EXPECT_EQ(a, whole);
}

TEST(Argmax, TiesGoToLowestIndex) {
  Tensor logits(Shape{1, 3, 1, 3}, std::vector<float>{1, 0, 2, 1, 5, 2, 0, 5, 2});
  const std::vector<Mask> m = argmax_masks(logits);
  EXPECT_EQ(m[0].labels, (std::vector<std::uint8_t>{0, 1, 0}));
}

TEST(Report, CsvLayout) {
  EvalReport r;
  r.iou = {0.5, std::nullopt, 1.0};
  r.miou = 0.75;
  r.pixels = 10;
  r.protocol = "scales=1;flip=off;patch_width=none";
  const std::string text = format_report(r);
  EXPECT_NE(text.find("# protocol: scales=1;flip=off;patch_width=none\n"), std::string::npos);
  EXPECT_NE(text.find("class_id,iou\n0,0.5\n1,\n2,1\nmiou,0.75\n"), std::string::npos);
}

TEST(InferFlip, SymmetricInputAndEquivariantModelEqualsPlain) {
  // A per-pixel channel mix commutes with mirroring.
  const Predictor pointwise = [](const Tensor& x) {
    Tensor y(Shape{x.dim(0), 2, x.dim(2), x.dim(3)});
    for (int b = 0; b < x.dim(0); ++b)
      for (int r = 0; r < x.dim(2); ++r)
        for (int c = 0; c < x.dim(3); ++c) {
          y.at(b, 0, r, c) = x.at(b, 0, r, c) - 2 * x.at(b, 1, r, c);
          y.at(b, 1, r, c) = x.at(b, 2, r, c) * x.at(b, 0, r, c);
        }
    return y;
  };
  Tensor x = random_batch(Shape{2, 3, 4, 6}, 1);
  x = Tensor(x.shape(), [&] {
    std::vector<float> v(x.data().begin(), x.data().end());
    Tensor half = x;
    for (int b = 0; b < 2; ++b)
      for (int ch = 0; ch < 3; ++ch)
        for (int r = 0; r < 4; ++r)
          for (int c = 3; c < 6; ++c) v[((b * 3 + ch) * 4 + r) * 6 + c] = half.at(b, ch, r, 5 - c);
    return v;
  }());
  EXPECT_TRUE(bit_equal(infer_flip(pointwise, x), pointwise(x)));
}

TEST(InferFlip, IdempotentForConstantPredictor) {
  const Tensor field = random_batch(Shape{1, 3, 4, 4}, 2);
  const Predictor constant = [&](const Tensor&) { return field; };
  const Tensor once = infer_flip(constant, random_batch(Shape{1, 3, 4, 4}, 3));
  const Predictor averaged = [&](const Tensor&) { return once; };
  EXPECT_TRUE(bit_equal(infer_flip(averaged, once), once));
}

TEST(InferFlip, MatchesHandComposedTwoPass) {
  const Model m = build_model(tiny_segmenter(), 4);
  const Tensor x = random_batch(Shape{2, 3, 32, 32}, 5);
  const Tensor got = infer_flip(model_predictor(m), x);
  const Tensor a = forward(m, x);
  Tensor mirrored_in(x.shape());
  for (int b = 0; b < 2; ++b)
    for (int ch = 0; ch < 3; ++ch)
      for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c) mirrored_in.at(b, ch, r, c) = x.at(b, ch, r, 31 - c);
  const Tensor bm = forward(m, mirrored_in);
  Tensor expect(a.shape());
  for (int b = 0; b < 2; ++b)
    for (int k = 0; k < 5; ++k)
      for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c) expect.at(b, k, r, c) = 0.5f * (a.at(b, k, r, c) + bm.at(b, k, r, 31 - c));
  EXPECT_LE(max_abs_diff(got, expect), 1e-6);
}

TEST(Multiscale, UnitScaleWithoutFlipIsForward) {
  const Model m = build_model(tiny_segmenter(), 6);
  const Tensor x = random_batch(Shape{1, 3, 64, 64}, 7);
  const std::vector<double> scales{1.0};
  EXPECT_LE(max_abs_diff(infer_multiscale(model_predictor(m), x, scales, false, 16), forward(m, x)), 1e-6);
}

TEST(Multiscale, DuplicatedScalesChangeNothing) {
  const Model m = build_model(tiny_segmenter(), 6);
  const Tensor x = random_batch(Shape{1, 3, 64, 64}, 8);
  const Predictor f = model_predictor(m);
  const std::vector<double> one{1.0}, three{1.0, 1.0, 1.0}, mixed{0.5, 1.0}, mixed_dup{0.5, 1.0, 0.5, 1.0};
  EXPECT_TRUE(bit_equal(infer_multiscale(f, x, three, false, 16), infer_multiscale(f, x, one, false, 16)));
  EXPECT_TRUE(bit_equal(infer_multiscale(f, x, mixed_dup, true, 16), infer_multiscale(f, x, mixed, true, 16)));
}

TEST(Multiscale, SixScalesMatchExplicitRecomposition) {
  const Model m = build_model(tiny_segmenter(), 9);
  const Tensor x = random_batch(Shape{1, 3, 64, 64}, 10);
  const std::vector<double> scales{0.5, 0.75, 1.0, 1.25, 1.5, 1.75};
  const Tensor got = infer_multiscale(model_predictor(m), x, scales, false, 16);
  EXPECT_EQ(got.shape(), (Shape{1, 5, 64, 64}));
  std::vector<double> acc(got.size(), 0.0);
  const int extents[] = {32, 48, 64, 80, 96, 112};
  for (int e : extents) {
    const Tensor back = naive_resize(forward(m, naive_resize(x, e, e)), 64, 64);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += back[i] / 6.0;
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < acc.size(); ++i) worst = std::max(worst, std::abs(acc[i] - got[i]));
  EXPECT_LE(worst, 1e-5);
}

TEST(Multiscale, SubMinimumScaleNamesTheScale) {
  const Predictor id = [](const Tensor& t) { return t; };
  const Tensor x = random_batch(Shape{1, 3, 64, 64}, 1);
  const std::vector<double> scales{1.0, 0.1};
  try {
    infer_multiscale(id, x, scales, false, 16);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidArgument);
    EXPECT_NE(std::string(e.what()).find("scale 0.1"), std::string::npos) << e.what();
  }
}

TEST(Patched, FullWidthPatchIsUnpatched) {
  const Model m = build_model(tiny_segmenter(), 12);
  const Tensor x = random_batch(Shape{1, 3, 64, 64}, 13);
  EXPECT_TRUE(bit_equal(infer_patched(model_predictor(m), x, 64, 64), forward(m, x)));
}

TEST(Patched, HalvesAreStandalonePatches) {
  const Model m = build_model(tiny_segmenter(), 12);
  const Tensor x = random_batch(Shape{1, 3, 64, 128}, 14);
  const Tensor stitched = infer_patched(model_predictor(m), x, 64, 64);
  EXPECT_EQ(stitched.shape(), (Shape{1, 5, 64, 128}));
  Tensor left(Shape{1, 3, 64, 64}), right(Shape{1, 3, 64, 64});
  for (int ch = 0; ch < 3; ++ch)
    for (int r = 0; r < 64; ++r)
      for (int c = 0; c < 64; ++c) {
        left.at(0, ch, r, c) = x.at(0, ch, r, c);
        right.at(0, ch, r, c) = x.at(0, ch, r, c + 64);
      }
  const Tensor l = forward(m, left), rr = forward(m, right);
  for (int k = 0; k < 5; ++k)
    for (int r = 0; r < 64; ++r)
      for (int c = 0; c < 64; ++c) {
        ASSERT_EQ(stitched.at(0, k, r, c), l.at(0, k, r, c));
        ASSERT_EQ(stitched.at(0, k, r, c + 64), rr.at(0, k, r, c));
      }
}

TEST(Patched, SeamOnConstantImageIsLogged) {
  const Model m = build_model(tiny_segmenter(), 15);
  const Tensor x(Shape{1, 3, 64, 128}, 0.3f);
  const Tensor y = infer_patched(model_predictor(m), x, 64, 64);
  // Interior columns of a constant image agree with each other; the seam
  // jump comes only from zero padding at patch edges.
  double seam = 0.0, interior = 0.0;
  for (int k = 0; k < 5; ++k)
    for (int r = 16; r < 48; ++r) {
      seam = std::max(seam, double(std::abs(y.at(0, k, r, 64) - y.at(0, k, r, 63))));
      interior = std::max(interior, double(std::abs(y.at(0, k, r, 32) - y.at(0, k, r, 31))));
    }
  RecordProperty("seam_jump", std::to_string(seam));
  RecordProperty("interior_jump", std::to_string(interior));
  std::cout << "seam jump " << seam << " vs interior jump " << interior << "\n";
  EXPECT_TRUE(std::isfinite(seam));
}

TEST(Patched, NonIntegralSplitRejected) {
  const Predictor id = [](const Tensor& t) { return t; };
  const Tensor x = random_batch(Shape{1, 3, 64, 96}, 1);
  try {
    infer_patched(id, x, 64, 64);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidArgument);
  }
}

TEST(Evaluate, DeterministicAndBounded) {
  const Model m = build_model(tiny_segmenter(), 16);
  DatasetSpec spec;
  spec.num_samples = 6;
  std::vector<Tensor> images;
  std::vector<Mask> masks;
  for (int i = 0; i < 6; ++i) {
    const Sample s = gen_sample(spec, i);
    images.push_back(s.image);
    masks.push_back(s.mask);
  }
  InferenceProtocol p;
  p.scales = {0.75, 1.0};
  p.flip = true;
  const EvalReport a = evaluate(m, images, masks, p, 4);
  const EvalReport b = evaluate(m, images, masks, p, 3);
  EXPECT_EQ(a.miou, b.miou);
  EXPECT_EQ(a.pixels, 6u * 64 * 64);
  for (const auto& v : a.iou) {
    if (v) {
      EXPECT_TRUE(*v >= 0.0 && *v <= 1.0);
    }
  }
  EXPECT_EQ(a.protocol, "scales=0.75 1;flip=on;patch_width=none");
}
