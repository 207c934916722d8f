#include "ddep/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ddep/error.hpp"

namespace ddep {

Mask::Mask(int h, int w, std::uint8_t fill)
    : height(h), width(w), labels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {
  require(h > 0 && w > 0, ErrorKind::InvalidArgument, "mask extents must be positive");
}

void DatasetSpec::validate() const {
  require(num_samples > 0, ErrorKind::InvalidArgument, "data.num_samples must be > 0");
  require(image_size > 0 && image_size % 16 == 0, ErrorKind::InvalidArgument,
          "data.image_size must be a positive multiple of 16, got " + std::to_string(image_size));
  require(num_classes == 5, ErrorKind::InvalidArgument,
          "data.num_classes must be 5 (background + 4 shapes), got " + std::to_string(num_classes));
  require(min_shapes >= 0 && min_shapes <= max_shapes, ErrorKind::InvalidArgument,
          "data.min_shapes must satisfy 0 <= min_shapes <= max_shapes");
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

// Unit direction without trigonometry, so rasterization stays bit-identical
// across libm implementations.
void random_direction(Rng& rng, double& ux, double& uy) {
  for (;;) {
    const double a = rng.uniform(-1.0, 1.0);
    const double b = rng.uniform(-1.0, 1.0);
    const double n2 = a * a + b * b;
    if (n2 > 0.04 && n2 <= 1.0) {
      const double n = std::sqrt(n2);
      ux = a / n;
      uy = b / n;
      return;
    }
  }
}

struct Shape2d {
  ShapeClass cls;
  double cx, cy, radius;
  double ux, uy;  // orientation for square and triangle
  Rgb color;

  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    switch (cls) {
      case kDisk:
        return dx * dx + dy * dy <= radius * radius;
      case kAnnulus: {
        const double d2 = dx * dx + dy * dy;
        const double inner = 0.55 * radius;
        return d2 <= radius * radius && d2 > inner * inner;
      }
      case kSquare: {
        const double u = dx * ux + dy * uy;
        const double v = -dx * uy + dy * ux;
        const double half = 0.8 * radius;
        return std::abs(u) <= half && std::abs(v) <= half;
      }
      case kTriangle: {
        // Isosceles, apex at distance radius along (ux, uy), base at -0.6 radius.
        const double u = dx * ux + dy * uy;
        const double v = -dx * uy + dy * ux;
        if (u > radius || u < -0.6 * radius) return false;
        return std::abs(v) <= (radius - u) * (1.0 / 1.6);
      }
      default:
        return false;
    }
  }
};

// Bilinear value noise on a (cells+1)^2 lattice.
class ValueNoise {
 public:
  ValueNoise(Rng& rng, int cells) : cells_(cells), lattice_(static_cast<std::size_t>((cells + 1) * (cells + 1))) {
    for (double& v : lattice_) v = rng.uniform();
  }
  double at(double u, double v) const {  // u, v in [0, 1]
    const double x = u * cells_;
    const double y = v * cells_;
    const int i = std::min(static_cast<int>(x), cells_ - 1);
    const int j = std::min(static_cast<int>(y), cells_ - 1);
    const double fx = x - i;
    const double fy = y - j;
    const auto node = [&](int a, int b) { return lattice_[static_cast<std::size_t>(b * (cells_ + 1) + a)]; };
    const double top = node(i, j) * (1 - fx) + node(i + 1, j) * fx;
    const double bottom = node(i, j + 1) * (1 - fx) + node(i + 1, j + 1) * fx;
    return top * (1 - fy) + bottom * fy;
  }

 private:
  int cells_;
  std::vector<double> lattice_;
};

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

Sample gen_sample(const DatasetSpec& spec, int index) {
  spec.validate();
  require(index >= 0 && index < spec.num_samples, ErrorKind::InvalidArgument,
          "sample index " + std::to_string(index) + " outside [0, " + std::to_string(spec.num_samples) + ")");
  Rng rng = Rng(spec.seed).split(static_cast<std::uint64_t>(index));
  const int size = spec.image_size;

  const Rgb bg_a = random_color(rng);
  const Rgb bg_b = random_color(rng);
  const ValueNoise texture(rng, 8);

  const int count = spec.min_shapes + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_shapes - spec.min_shapes + 1)));
  std::vector<Shape2d> shapes;
  for (int s = 0; s < count; ++s) {
    Shape2d sh{};
    sh.cls = static_cast<ShapeClass>(1 + rng.below(4));
    sh.radius = rng.uniform(0.1, 0.28) * size;
    sh.cx = rng.uniform(0.15, 0.85) * size;
    sh.cy = rng.uniform(0.15, 0.85) * size;
    random_direction(rng, sh.ux, sh.uy);
    sh.color = random_color(rng);
    shapes.push_back(sh);
  }

  Sample out{Tensor(Shape{3, size, size}), Mask(size, size), 0};
  std::vector<int> owner(static_cast<std::size_t>(size) * size, -1);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double x = c + 0.5;
      const double y = r + 0.5;
      const double t = texture.at(x / size, y / size);
      Rgb px{bg_a.r * (1 - t) + bg_b.r * t, bg_a.g * (1 - t) + bg_b.g * t, bg_a.b * (1 - t) + bg_b.b * t};
      int top = -1;
      for (int s = 0; s < count; ++s) {
        if (shapes[static_cast<std::size_t>(s)].contains(x, y)) top = s;
      }
      if (top >= 0) {
        const Shape2d& sh = shapes[static_cast<std::size_t>(top)];
        // Mild shading keeps flat fills from being trivially separable by color.
        const double shade = 0.85 + 0.15 * t;
        px = {sh.color.r * shade, sh.color.g * shade, sh.color.b * shade};
        out.mask.at(r, c) = sh.cls;
      }
      owner[static_cast<std::size_t>(r) * size + c] = top;
      out.image.at(0, r, c) = static_cast<float>(px.r);
      out.image.at(1, r, c) = static_cast<float>(px.g);
      out.image.at(2, r, c) = static_cast<float>(px.b);
    }
  }
  if (!spec.noise_free) {
    for (float& v : out.image.data()) v = clamp01(v + rng.uniform(-0.04, 0.04));
  }

  std::vector<int> visible(static_cast<std::size_t>(count), 0);
  for (int o : owner) {
    if (o >= 0) ++visible[static_cast<std::size_t>(o)];
  }
  int best = 0;
  for (int s = 0; s < count; ++s) {
    const int area = visible[static_cast<std::size_t>(s)];
    const int cls = shapes[static_cast<std::size_t>(s)].cls;
    if (area > best || (area == best && area > 0 && cls < out.class_label)) {
      best = area;
      out.class_label = cls;
    }
  }
  return out;
}

std::vector<Sample> gen_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.num_samples));
  for (int i = 0; i < spec.num_samples; ++i) out.push_back(gen_sample(spec, i));
  return out;
}

NormStats compute_norm_stats(std::span<const Sample> samples) {
  require(!samples.empty(), ErrorKind::InvalidArgument, "compute_norm_stats needs a non-empty dataset");
  std::array<std::vector<double>, 3> sums, squares;
  std::size_t pixels = 0;
  for (const Sample& s : samples) {
    require(s.image.rank() == 3 && s.image.dim(0) == 3, ErrorKind::InvalidData,
            "expected a 3 x H x W image, got " + s.image.shape().str());
    const std::size_t plane = s.image.size() / 3;
    pixels += plane;
    for (int ch = 0; ch < 3; ++ch) {
      double sum = 0.0, sq = 0.0;
      const float* p = s.image.ptr() + ch * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum += p[i];
        sq += static_cast<double>(p[i]) * p[i];
      }
      sums[ch].push_back(sum);
      squares[ch].push_back(sq);
    }
  }
  NormStats stats;
  for (int ch = 0; ch < 3; ++ch) {
    std::sort(sums[ch].begin(), sums[ch].end());
    std::sort(squares[ch].begin(), squares[ch].end());
    const double n = static_cast<double>(pixels);
    const double mean = std::accumulate(sums[ch].begin(), sums[ch].end(), 0.0) / n;
    const double var = std::accumulate(squares[ch].begin(), squares[ch].end(), 0.0) / n - mean * mean;
    const double sd = var > 0.0 ? std::sqrt(var) : 0.0;
    require(sd > 1e-6, ErrorKind::InvalidData, "channel " + std::to_string(ch) + " is constant; cannot normalize");
    stats.mean[ch] = mean;
    stats.std[ch] = sd;
  }
  return stats;
}

Tensor normalize(const Tensor& image, const NormStats& stats) {
  require(image.rank() == 3 || image.rank() == 4, ErrorKind::InvalidArgument,
          "normalize expects C x H x W or N x C x H x W, got " + image.shape().str());
  const int channel_axis = image.rank() - 3;
  require(image.dim(channel_axis) == 3, ErrorKind::ShapeMismatch, "normalize expects 3 channels");
  Tensor out = image;
  const std::size_t plane = static_cast<std::size_t>(image.dim(channel_axis + 1)) * image.dim(channel_axis + 2);
  const std::size_t planes = image.size() / plane;
  for (std::size_t p = 0; p < planes; ++p) {
    const int ch = static_cast<int>(p % 3);
    const float mean = static_cast<float>(stats.mean[ch]);
    const float inv = static_cast<float>(1.0 / stats.std[ch]);
    float* d = out.ptr() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) d[i] = (d[i] - mean) * inv;
  }
  return out;
}

std::vector<int> subset_labels(int n, double fraction, std::uint64_t seed) {
  require(n > 0, ErrorKind::InvalidArgument, "subset_labels needs n > 0");
  require(std::isfinite(fraction) && fraction > 0.0 && fraction <= 1.0, ErrorKind::InvalidArgument,
          "label fraction must lie in (0, 1], got " + std::to_string(fraction));
  // Relative slack so that e.g. 0.05 * 1000 counts as exactly 50.
  const double exact = fraction * n;
  const int k = std::clamp(static_cast<int>(std::ceil(exact * (1.0 - 1e-12))), 1, n);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::pair<Tensor, Mask> crop_flip(const Tensor& image, const Mask& mask, int top, int left, int crop_size, bool flip) {
  require(image.rank() == 3, ErrorKind::InvalidArgument, "augment expects a C x H x W image");
  const int channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  require(mask.height == h && mask.width == w, ErrorKind::ShapeMismatch,
          "mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) + " vs image " + image.shape().str());
  require(crop_size > 0 && crop_size <= h && crop_size <= w, ErrorKind::InvalidArgument,
          "crop " + std::to_string(crop_size) + " does not fit image " + image.shape().str());
  require(top >= 0 && left >= 0 && top + crop_size <= h && left + crop_size <= w, ErrorKind::InvalidArgument,
          "crop window outside image");
  Tensor out_image(Shape{channels, crop_size, crop_size});
  Mask out_mask(crop_size, crop_size);
  for (int r = 0; r < crop_size; ++r) {
    for (int c = 0; c < crop_size; ++c) {
      const int src_c = left + (flip ? crop_size - 1 - c : c);
      for (int ch = 0; ch < channels; ++ch) out_image.at(ch, r, c) = image.at(ch, top + r, src_c);
      out_mask.at(r, c) = mask.at(top + r, src_c);
    }
  }
  return {std::move(out_image), std::move(out_mask)};
}

std::pair<Tensor, Mask> augment(const Tensor& image, const Mask& mask, Rng& rng, int crop_size) {
  require(image.rank() == 3, ErrorKind::InvalidArgument, "augment expects a C x H x W image");
  const int h = image.dim(1), w = image.dim(2);
  require(crop_size > 0 && crop_size <= h && crop_size <= w, ErrorKind::InvalidArgument,
          "crop " + std::to_string(crop_size) + " larger than image " + image.shape().str());
  const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - crop_size + 1)));
  const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - crop_size + 1)));
  const bool flip = rng.bernoulli(0.5);
  return crop_flip(image, mask, top, left, crop_size, flip);
}

Tensor stack_images(std::span<const Tensor> images) {
  require(!images.empty(), ErrorKind::InvalidArgument, "cannot stack an empty batch");
  const Shape& s = images.front().shape();
  std::vector<int> dims{static_cast<int>(images.size())};
  for (int d : s.dims()) dims.push_back(d);
  Tensor out{Shape(dims)};
  float* dst = out.ptr();
  for (const Tensor& t : images) {
    check_same_shape(t, images.front(), "stack_images");
    dst = std::copy(t.ptr(), t.ptr() + t.size(), dst);
  }
  return out;
}

std::vector<int> stack_masks(std::span<const Mask> masks) {
  std::vector<int> out;
  for (const Mask& m : masks) {
    require(m.height == masks.front().height && m.width == masks.front().width, ErrorKind::ShapeMismatch,
            "masks in a batch must share extents");
    out.insert(out.end(), m.labels.begin(), m.labels.end());
  }
  return out;
}

namespace {

void write_png(const std::string& path, int width, int height, png_uint_32 format, const std::vector<std::uint8_t>& pixels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = format;
  if (!png_image_write_to_file(&img, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    fail(ErrorKind::Io, "cannot write " + path + ": " + img.message);
  }
}

std::vector<std::uint8_t> read_png(const std::string& path, png_uint_32 format, int& width, int& height) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    fail(ErrorKind::Io, "cannot read " + path + ": " + img.message);
  }
  img.format = format;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    fail(ErrorKind::Io, "cannot decode " + path + ": " + msg);
  }
  width = static_cast<int>(img.width);
  height = static_cast<int>(img.height);
  return pixels;
}

}  // namespace

void save_image_png(const std::string& path, const Tensor& image) {
  require(image.rank() == 3 && image.dim(0) == 3, ErrorKind::InvalidArgument,
          "save_image_png expects 3 x H x W, got " + image.shape().str());
  const int h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> px(static_cast<std::size_t>(h) * w * 3);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(static_cast<double>(image.at(ch, r, c)), 0.0, 1.0);
        px[(static_cast<std::size_t>(r) * w + c) * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  write_png(path, w, h, PNG_FORMAT_RGB, px);
}

Tensor load_image_png(const std::string& path) {
  int w = 0, h = 0;
  const std::vector<std::uint8_t> px = read_png(path, PNG_FORMAT_RGB, w, h);
  Tensor out(Shape{3, h, w});
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        out.at(ch, r, c) = static_cast<float>(px[(static_cast<std::size_t>(r) * w + c) * 3 + ch] / 255.0);
      }
    }
  }
  return out;
}

void save_mask_png(const std::string& path, const Mask& mask) {
  write_png(path, mask.width, mask.height, PNG_FORMAT_GRAY, mask.labels);
}

Mask load_mask_png(const std::string& path, int num_classes) {
  int w = 0, h = 0;
  std::vector<std::uint8_t> px = read_png(path, PNG_FORMAT_GRAY, w, h);
  for (std::uint8_t v : px) {
    require(v < num_classes || v == kIgnoreLabel, ErrorKind::InvalidData,
            path + ": mask value " + std::to_string(v) + " is not a class id below " + std::to_string(num_classes) +
                " nor the ignore label");
  }
  Mask m(h, w);
  m.labels = std::move(px);
  return m;
}

ManifestEntry save_sample(const std::string& dir, const std::string& stem, const Sample& sample) {
  const std::filesystem::path base(dir);
  ManifestEntry e{(base / (stem + ".png")).string(), (base / (stem + "_mask.png")).string(), sample.class_label};
  save_image_png(e.image_path, sample.image);
  save_mask_png(e.mask_path, sample.mask);
  return e;
}

Sample load_sample(const ManifestEntry& entry, int num_classes) {
  Sample s{load_image_png(entry.image_path), load_mask_png(entry.mask_path, num_classes), entry.class_label};
  require(s.mask.height == s.image.dim(1) && s.mask.width == s.image.dim(2), ErrorKind::InvalidData,
          entry.mask_path + ": mask extents differ from " + entry.image_path);
  require(s.class_label >= 0 && s.class_label < num_classes, ErrorKind::InvalidData,
          entry.image_path + ": class label " + std::to_string(s.class_label) + " out of range");
  return s;
}

void write_manifest(const std::string& path, std::span<const ManifestEntry> entries) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path);
  for (const ManifestEntry& e : entries) out << e.image_path << '\t' << e.mask_path << '\t' << e.class_label << '\n';
  require(static_cast<bool>(out), ErrorKind::Io, "write failed: " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot read " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream fields(line);
    ManifestEntry e;
    std::string label;
    if (!std::getline(fields, e.image_path, '\t') || !std::getline(fields, e.mask_path, '\t') ||
        !std::getline(fields, label)) {
      fail(ErrorKind::InvalidData, path + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
    }
    try {
      std::size_t used = 0;
      e.class_label = std::stoi(label, &used);
      require(used == label.size(), ErrorKind::InvalidData, "trailing characters");
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidData, path + ":" + std::to_string(lineno) + ": bad class label '" + label + "'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace ddep
