#include "ddep/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ddep/error.hpp"

namespace ddep {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  require(num_classes > 0 && num_classes < kIgnoreLabel, ErrorKind::InvalidArgument,
          "num_classes must lie in [1, 254]");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts_) t += c;
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  require(other.num_classes_ == num_classes_, ErrorKind::ShapeMismatch, "confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

void confusion_update(ConfusionMatrix& cm, const Mask& pred, const Mask& gt) {
  require(pred.height == gt.height && pred.width == gt.width, ErrorKind::ShapeMismatch,
          "prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) + " vs ground truth " +
              std::to_string(gt.height) + "x" + std::to_string(gt.width));
  const int c = cm.num_classes();
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int p = pred.labels[i];
    require(p < c, ErrorKind::InvalidData, "predicted class " + std::to_string(p) + " out of range");
    const int g = gt.labels[i];
    if (g == kIgnoreLabel) continue;
    require(g < c, ErrorKind::InvalidData, "ground-truth class " + std::to_string(g) + " out of range");
    ++cm.at(g, p);
  }
}

EvalReport miou(const ConfusionMatrix& cm, const std::string& protocol) {
  const int c = cm.num_classes();
  EvalReport report;
  report.protocol = protocol;
  report.pixels = cm.total();
  double sum = 0.0;
  int counted = 0;
  for (int k = 0; k < c; ++k) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < c; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const std::uint64_t inter = cm.at(k, k);
    const std::uint64_t uni = row + col - inter;
    if (uni == 0) {
      report.iou.emplace_back();
      continue;
    }
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    report.iou.emplace_back(iou);
    sum += iou;
    ++counted;
  }
  require(counted > 0, ErrorKind::UndefinedMetric, "mIoU undefined: no class has a non-empty union");
  report.miou = sum / counted;
  return report;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "# protocol: " << report.protocol << "\n# pixels: " << report.pixels << "\nclass_id,iou\n";
  for (std::size_t k = 0; k < report.iou.size(); ++k) {
    os << k << ',';
    if (report.iou[k]) os << *report.iou[k];
    os << '\n';
  }
  os << "miou," << report.miou << '\n';
  return os.str();
}

void write_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path);
  out << format_report(report);
  require(static_cast<bool>(out), ErrorKind::Io, "write failed: " + path);
}

std::vector<Mask> argmax_masks(const Tensor& logits) {
  require(logits.rank() == 4, ErrorKind::InvalidArgument, "argmax expects N x C x H x W, got " + logits.shape().str());
  const int n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  require(c < kIgnoreLabel, ErrorKind::InvalidArgument, "too many classes for a mask");
  std::vector<Mask> out;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    Mask m(h, w);
    const float* base = logits.ptr() + static_cast<std::size_t>(b) * c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      float best_v = base[i];
      for (int k = 1; k < c; ++k) {
        const float v = base[static_cast<std::size_t>(k) * plane + i];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      m.labels[i] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

Predictor model_predictor(const Model& model) {
  return [&model](const Tensor& x) { return forward(model, x); };
}

Tensor flip_width(const Tensor& x) {
  require(x.rank() == 4, ErrorKind::InvalidArgument, "flip expects N x C x H x W");
  Tensor out(x.shape());
  const int w = x.dim(3);
  const std::size_t rows = x.size() / static_cast<std::size_t>(w);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* src = x.ptr() + r * w;
    float* dst = out.ptr() + r * w;
    for (int c = 0; c < w; ++c) dst[c] = src[w - 1 - c];
  }
  return out;
}

namespace {

struct Tap {
  int i0, i1;
  float frac;
};

std::vector<Tap> taps(int in, int out) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    t[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in - 1), static_cast<float>(src - i0)};
  }
  return t;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, int height, int width) {
  require(x.rank() == 4, ErrorKind::InvalidArgument, "resize expects N x C x H x W");
  require(height > 0 && width > 0, ErrorKind::InvalidArgument, "resize target must be positive");
  const int h = x.dim(2), w = x.dim(3);
  if (h == height && w == width) return x;
  const std::vector<Tap> ty = taps(h, height), tx = taps(w, width);
  const int planes = x.dim(0) * x.dim(1);
  Tensor out(Shape{x.dim(0), x.dim(1), height, width});
  for (int p = 0; p < planes; ++p) {
    const float* src = x.ptr() + static_cast<std::size_t>(p) * h * w;
    float* dst = out.ptr() + static_cast<std::size_t>(p) * height * width;
    for (int r = 0; r < height; ++r) {
      const Tap& a = ty[static_cast<std::size_t>(r)];
      const float* row0 = src + static_cast<std::size_t>(a.i0) * w;
      const float* row1 = src + static_cast<std::size_t>(a.i1) * w;
      for (int c = 0; c < width; ++c) {
        const Tap& b = tx[static_cast<std::size_t>(c)];
        const float top = row0[b.i0] + (row0[b.i1] - row0[b.i0]) * b.frac;
        const float bottom = row1[b.i0] + (row1[b.i1] - row1[b.i0]) * b.frac;
        dst[static_cast<std::size_t>(r) * width + c] = top + (bottom - top) * a.frac;
      }
    }
  }
  return out;
}

Tensor infer_flip(const Predictor& f, const Tensor& x) {
  const Tensor plain = f(x);
  const Tensor mirrored = flip_width(f(flip_width(x)));
  check_same_shape(plain, mirrored, "infer_flip");
  Tensor out(plain.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (plain[i] + mirrored[i]) * 0.5f;
  return out;
}

Tensor infer_multiscale(const Predictor& f, const Tensor& x, std::span<const double> scales, bool flip, int divisor) {
  require(x.rank() == 4, ErrorKind::InvalidArgument, "inference expects N x C x H x W, got " + x.shape().str());
  require(!scales.empty(), ErrorKind::InvalidArgument, "at least one inference scale is required");
  require(divisor > 0, ErrorKind::InvalidArgument, "divisor must be positive");
  std::vector<double> distinct;
  for (double s : scales) {
    require(std::isfinite(s) && s > 0.0, ErrorKind::InvalidArgument, "scale " + std::to_string(s) + " must be positive");
    if (std::find(distinct.begin(), distinct.end(), s) == distinct.end()) distinct.push_back(s);
  }
  const int h = x.dim(2), w = x.dim(3);
  const auto extent = [&](int native, double s) {
    const int e = static_cast<int>(std::lround(native * s / divisor)) * divisor;
    if (e < divisor) {
      std::ostringstream os;
      os << "scale " << s << " maps extent " << native << " to " << e << ", below the minimum " << divisor;
      fail(ErrorKind::InvalidArgument, os.str());
    }
    return e;
  };
  std::vector<double> sum;
  Shape out_shape{1};
  for (double s : distinct) {
    const Tensor scaled = resize_bilinear(x, extent(h, s), extent(w, s));
    const Tensor logits = flip ? infer_flip(f, scaled) : f(scaled);
    const Tensor back = resize_bilinear(logits, h, w);
    if (sum.empty()) {
      out_shape = back.shape();
      sum.assign(back.size(), 0.0);
    }
    require(back.shape() == out_shape, ErrorKind::ShapeMismatch, "predictor output shape changed across scales");
    for (std::size_t i = 0; i < back.size(); ++i) sum[i] += back[i];
  }
  Tensor out(out_shape);
  const double inv = 1.0 / static_cast<double>(distinct.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(sum[i] * inv);
  return out;
}

Tensor infer_patched(const Predictor& per_patch, const Tensor& x, int patch_height, int patch_width) {
  require(x.rank() == 4, ErrorKind::InvalidArgument, "inference expects N x C x H x W, got " + x.shape().str());
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(patch_width > 0 && w % patch_width == 0, ErrorKind::InvalidArgument,
          "image width " + std::to_string(w) + " is not a multiple of patch width " + std::to_string(patch_width));
  require(h <= patch_height, ErrorKind::InvalidArgument,
          "image height " + std::to_string(h) + " exceeds patch height " + std::to_string(patch_height));
  const int tiles = w / patch_width;
  const auto offset = [](const Tensor& t, int b, int ch, int r, int col) {
    return ((static_cast<std::size_t>(b) * t.dim(1) + ch) * t.dim(2) + r) * t.dim(3) + col;
  };
  if (tiles == 1) return per_patch(x);
  Tensor out;
  for (int t = 0; t < tiles; ++t) {
    Tensor tile(Shape{n, c, h, patch_width});
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < h; ++r) {
          const float* src = x.ptr() + offset(x, b, ch, r, t * patch_width);
          std::copy(src, src + patch_width, tile.ptr() + offset(tile, b, ch, r, 0));
        }
    const Tensor y = per_patch(tile);
    require(y.rank() == 4 && y.dim(3) == patch_width, ErrorKind::ShapeMismatch,
            "patch output must keep the patch width, got " + y.shape().str());
    if (t == 0) out = Tensor(Shape{y.dim(0), y.dim(1), y.dim(2), w});
    for (int b = 0; b < y.dim(0); ++b)
      for (int ch = 0; ch < y.dim(1); ++ch)
        for (int r = 0; r < y.dim(2); ++r) {
          const float* src = y.ptr() + offset(y, b, ch, r, 0);
          std::copy(src, src + patch_width, out.ptr() + offset(out, b, ch, r, t * patch_width));
        }
  }
  return out;
}

void InferenceProtocol::validate() const {
  require(!scales.empty(), ErrorKind::InvalidArgument, "eval.scales must list at least one scale");
  for (double s : scales) require(std::isfinite(s) && s > 0.0, ErrorKind::InvalidArgument, "eval.scales must be positive");
  require(patch_width >= 0, ErrorKind::InvalidArgument, "eval.patch_width must be >= 0");
}

std::string InferenceProtocol::describe() const {
  std::ostringstream os;
  os << "scales=";
  for (std::size_t i = 0; i < scales.size(); ++i) os << (i ? " " : "") << scales[i];
  os << ";flip=" << (flip ? "on" : "off") << ";patch_width=";
  if (patch_width > 0) {
    os << patch_width;
  } else {
    os << "none";
  }
  return os.str();
}

Tensor infer(const Model& model, const Tensor& x, const InferenceProtocol& protocol) {
  protocol.validate();
  const Predictor f = model_predictor(model);
  const int divisor = model.config().divisor();
  const Predictor per_patch = [&](const Tensor& t) { return infer_multiscale(f, t, protocol.scales, protocol.flip, divisor); };
  if (protocol.patch_width > 0) return infer_patched(per_patch, x, x.dim(2), protocol.patch_width);
  return per_patch(x);
}

EvalReport evaluate(const Model& model, std::span<const Tensor> images, std::span<const Mask> masks,
                    const InferenceProtocol& protocol, int batch_size) {
  require(images.size() == masks.size(), ErrorKind::InvalidArgument, "images and masks differ in count");
  require(!images.empty(), ErrorKind::InvalidArgument, "evaluation set is empty");
  require(batch_size > 0, ErrorKind::InvalidArgument, "batch size must be positive");
  ConfusionMatrix cm(model.config().num_classes);
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
    const Tensor batch = stack_images(images.subspan(start, end - start));
    const std::vector<Mask> pred = argmax_masks(infer(model, batch, protocol));
    for (std::size_t i = start; i < end; ++i) confusion_update(cm, pred[i - start], masks[i]);
  }
  return miou(cm, protocol.describe());
}

}  // namespace ddep
