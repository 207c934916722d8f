#include "ddep/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

#include "ddep/error.hpp"

namespace ddep::ad {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Eigen's vectorized reductions peel a pointer-alignment-dependent prefix, so
// their rounding varies with heap layout. Reductions go through this instead.
float ordered_sum(const float* p, int n, int stride) {
  float s = 0.0f;
  for (int i = 0; i < n; ++i) s += p[static_cast<std::ptrdiff_t>(i) * stride];
  return s;
}

bool valid(Var v) { return v.tape != nullptr && v.id >= 0; }

Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (Var v : vars) {
    if (!valid(v)) continue;
    if (t != nullptr && v.tape != t) fail(ErrorKind::ContractViolation, "vars recorded on different tapes");
    t = v.tape;
  }
  if (t == nullptr) fail(ErrorKind::ContractViolation, "op called without a recorded input");
  return *t;
}

bool needs(const Tape& tape, Var v) { return valid(v) && tape.requires_grad(v.id); }

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  fail(ErrorKind::ShapeMismatch, std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

void require_rank(const char* op, const Shape& s, int rank) {
  if (s.rank() != rank) {
    fail(ErrorKind::ShapeMismatch,
         std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + s.str());
  }
}

struct ConvGeometry {
  int channels, height, width, kernel, stride, padding, out_h, out_w;
  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_h * out_w; }
  bool pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

// Output columns ow in [lo, hi) read an in-bounds input column for kernel
// offset kw.
std::pair<int, int> valid_columns(const ConvGeometry& g, int kw) {
  const int shift = g.padding - kw;
  if (g.width - 1 + shift < 0) return {0, 0};
  const int lo = shift <= 0 ? 0 : (shift + g.stride - 1) / g.stride;
  const int hi = std::min(g.out_w, (g.width - 1 + shift) / g.stride + 1);
  return {lo, std::max(lo, hi)};
}

void im2col(const float* x, const ConvGeometry& g, float* col) {
  const int k = g.kernel;
  for (int c = 0; c < g.channels; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        float* row = col + static_cast<std::size_t>((c * k + kh) * k + kw) * g.cols();
        const auto [lo, hi] = valid_columns(g, kw);
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + kh;
          float* out = row + static_cast<std::size_t>(oh) * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(out, out + g.out_w, 0.0f);
            continue;
          }
          const float* in = x + (static_cast<std::size_t>(c) * g.height + ih) * g.width;
          const int shift = kw - g.padding;
          std::fill(out, out + lo, 0.0f);
          if (g.stride == 1) {
            std::copy(in + lo + shift, in + hi + shift, out + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) out[ow] = in[ow * g.stride + shift];
          }
          std::fill(out + hi, out + g.out_w, 0.0f);
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeometry& g, float* dx) {
  const int k = g.kernel;
  for (int c = 0; c < g.channels; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const float* row = col + static_cast<std::size_t>((c * k + kh) * k + kw) * g.cols();
        const auto [lo, hi] = valid_columns(g, kw);
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= g.height) continue;
          const float* in = row + static_cast<std::size_t>(oh) * g.out_w;
          float* out = dx + (static_cast<std::size_t>(c) * g.height + ih) * g.width;
          const int shift = kw - g.padding;
          if (g.stride == 1) {
            for (int ow = lo; ow < hi; ++ow) out[ow + shift] += in[ow];
          } else {
            for (int ow = lo; ow < hi; ++ow) out[ow * g.stride + shift] += in[ow];
          }
        }
      }
    }
  }
}

}  // namespace

const Tensor& Var::value() const {
  if (tape == nullptr || id < 0) fail(ErrorKind::ContractViolation, "value() on an unbound Var");
  return tape->value(id);
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(const ParamSet& params, const std::string& name) {
  const ParamEntry& e = params.entry(name);
  Var v = leaf(e.value, e.trainable);
  nodes_.back().param_name = name;
  return v;
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (int id : inputs) {
    if (id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var scalar) {
  require(scalar.tape == this, ErrorKind::ContractViolation, "backward on a foreign Var");
  require(value(scalar.id).size() == 1, ErrorKind::ShapeMismatch,
          "backward needs a scalar, got " + value(scalar.id).shape().str());
  if (!requires_grad(scalar.id)) return;
  grad_buffer(scalar.id).fill(1.0f);
  for (int i = scalar.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

void Tape::accumulate_into(ParamSet& params) const {
  for (const Node& n : nodes_) {
    if (n.param_name.empty() || !n.requires_grad) continue;
    ParamEntry& e = params.entry(n.param_name);
    e.has_grad = true;
    if (n.grad.empty()) continue;
    float* dst = e.grad.ptr();
    const float* src = n.grad.ptr();
    for (std::size_t i = 0; i < e.grad.size(); ++i) dst[i] += src[i];
  }
}

Var conv2d(Var x, Var weight, Var bias, int stride, int padding) {
  Tape& tape = tape_of({x, weight, bias});
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require_rank("conv2d input", xs, 4);
  require_rank("conv2d weight", ws, 4);
  if (ws[1] != xs[1] || ws[2] != ws[3]) shape_error("conv2d", xs, ws);
  require(stride >= 1 && padding >= 0, ErrorKind::InvalidArgument, "conv2d: bad stride/padding");
  const int out_channels = ws[0];
  if (valid(bias) && (bias.shape().rank() != 1 || bias.shape()[0] != out_channels)) {
    shape_error("conv2d bias", ws, bias.shape());
  }
  ConvGeometry g{xs[1], xs[2], xs[3], ws[2], stride, padding, 0, 0};
  g.out_h = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) shape_error("conv2d", xs, ws);

  const int batch = xs[0];
  Tensor out(Shape{batch, out_channels, g.out_h, g.out_w});
  const std::size_t in_stride = static_cast<std::size_t>(g.channels) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(out_channels) * g.cols();
  // im2col overwrites every element, so the scratch is left uninitialized.
  const std::size_t col_size = g.pointwise() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols();
  const std::unique_ptr<float[]> col(new float[col_size]);
  ConstMapMat wm(weight.value().ptr(), out_channels, g.rows());
  for (int n = 0; n < batch; ++n) {
    const float* xn = x.value().ptr() + n * in_stride;
    const float* cp = xn;
    if (!g.pointwise()) {
      im2col(xn, g, col.get());
      cp = col.get();
    }
    MapMat om(out.ptr() + n * out_stride, out_channels, g.cols());
    om.noalias() = wm * ConstMapMat(cp, g.rows(), g.cols());
    if (valid(bias)) {
      const float* b = bias.value().ptr();
      for (int c = 0; c < out_channels; ++c) om.row(c).array() += b[c];
    }
  }

  return tape.record(std::move(out), {x.id, weight.id, valid(bias) ? bias.id : -1},
                     [x, weight, bias, g, out_channels](Tape& t, int self) {
    const Tensor& dout = t.grad(self);
    const int batch = x.shape()[0];
    const std::size_t in_stride = static_cast<std::size_t>(g.channels) * g.height * g.width;
    const std::size_t out_stride = static_cast<std::size_t>(out_channels) * g.cols();
    const bool need_x = needs(t, x), need_w = needs(t, weight), need_b = needs(t, bias);
    const std::size_t col_size = g.pointwise() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols();
    const std::unique_ptr<float[]> col(new float[col_size]);
    const std::unique_ptr<float[]> dcol(new float[col_size]);
    ConstMapMat wm(t.value(weight.id).ptr(), out_channels, g.rows());
    for (int n = 0; n < batch; ++n) {
      ConstMapMat dom(dout.ptr() + n * out_stride, out_channels, g.cols());
      if (need_b) {
        float* db = t.grad_buffer(bias.id).ptr();
        for (int c = 0; c < out_channels; ++c) db[c] += ordered_sum(dom.data() + static_cast<std::size_t>(c) * g.cols(), g.cols(), 1);
      }
      if (need_w) {
        const float* xn = t.value(x.id).ptr() + n * in_stride;
        const float* cp = xn;
        if (!g.pointwise()) {
          im2col(xn, g, col.get());
          cp = col.get();
        }
        MapMat dw(t.grad_buffer(weight.id).ptr(), out_channels, g.rows());
        dw.noalias() += dom * ConstMapMat(cp, g.rows(), g.cols()).transpose();
      }
      if (need_x) {
        float* dxn = t.grad_buffer(x.id).ptr() + n * in_stride;
        if (g.pointwise()) {
          MapMat dxm(dxn, g.rows(), g.cols());
          dxm.noalias() += wm.transpose() * dom;
        } else {
          MapMat dcm(dcol.get(), g.rows(), g.cols());
          dcm.noalias() = wm.transpose() * dom;
          col2im_add(dcol.get(), g, dxn);
        }
      }
    }
  });
}

Var upsample_nearest2x(Var x) {
  Tape& tape = tape_of({x});
  const Shape& xs = x.shape();
  require_rank("upsample_nearest2x", xs, 4);
  const int planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  Tensor out(Shape{xs[0], xs[1], 2 * h, 2 * w});
  const float* in = x.value().ptr();
  float* o = out.ptr();
  for (int p = 0; p < planes; ++p) {
    for (int r = 0; r < 2 * h; ++r) {
      const float* src = in + (static_cast<std::size_t>(p) * h + r / 2) * w;
      float* dst = o + (static_cast<std::size_t>(p) * 2 * h + r) * 2 * w;
      for (int c = 0; c < 2 * w; ++c) dst[c] = src[c / 2];
    }
  }
  return tape.record(std::move(out), {x.id}, [x, planes, h, w](Tape& t, int self) {
    const float* g = t.grad(self).ptr();
    float* dx = t.grad_buffer(x.id).ptr();
    for (int p = 0; p < planes; ++p) {
      for (int r = 0; r < 2 * h; ++r) {
        const float* src = g + (static_cast<std::size_t>(p) * 2 * h + r) * 2 * w;
        float* dst = dx + (static_cast<std::size_t>(p) * h + r / 2) * w;
        for (int c = 0; c < 2 * w; ++c) dst[c / 2] += src[c];
      }
    }
  });
}

Var relu(Var x) {
  Tape& tape = tape_of({x});
  Tensor out = x.value();
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return tape.record(std::move(out), {x.id}, [x](Tape& t, int self) {
    const float* y = t.value(self).ptr();
    const float* g = t.grad(self).ptr();
    float* dx = t.grad_buffer(x.id).ptr();
    const std::size_t n = t.value(self).size();
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i] > 0.0f) dx[i] += g[i];
    }
  });
}

Var group_norm(Var x, Var scale, Var shift, int groups, float eps) {
  Tape& tape = tape_of({x, scale, shift});
  const Shape& xs = x.shape();
  require_rank("group_norm", xs, 4);
  const int batch = xs[0], channels = xs[1];
  const std::size_t plane = static_cast<std::size_t>(xs[2]) * xs[3];
  require(groups > 0 && channels % groups == 0, ErrorKind::InvalidArgument,
          "group_norm: " + std::to_string(channels) + " channels not divisible into " +
              std::to_string(groups) + " groups");
  if (scale.shape() != Shape{channels}) shape_error("group_norm scale", xs, scale.shape());
  if (shift.shape() != Shape{channels}) shape_error("group_norm shift", xs, shift.shape());
  const int per_group = channels / groups;
  const std::size_t group_size = per_group * plane;

  auto stats = std::make_shared<std::vector<float>>(static_cast<std::size_t>(batch) * groups * 2);
  Tensor out(xs);
  const float* in = x.value().ptr();
  const float* gamma = scale.value().ptr();
  const float* beta = shift.value().ptr();
  for (int n = 0; n < batch; ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + gi * per_group) * plane;
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < group_size; ++i) sum += in[base + i];
      const double mean = sum / static_cast<double>(group_size);
      for (std::size_t i = 0; i < group_size; ++i) {
        const double d = in[base + i] - mean;
        sq += d * d;
      }
      const double var = sq / static_cast<double>(group_size);
      const float inv_std = static_cast<float>(1.0 / std::sqrt(var + eps));
      const float mu = static_cast<float>(mean);
      (*stats)[(static_cast<std::size_t>(n) * groups + gi) * 2] = mu;
      (*stats)[(static_cast<std::size_t>(n) * groups + gi) * 2 + 1] = inv_std;
      for (int c = 0; c < per_group; ++c) {
        const int ch = gi * per_group + c;
        const std::size_t off = base + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          out.ptr()[off + i] = (in[off + i] - mu) * inv_std * gamma[ch] + beta[ch];
        }
      }
    }
  }

  return tape.record(std::move(out), {x.id, scale.id, shift.id},
                     [x, scale, shift, groups, stats, per_group, plane, group_size](Tape& t, int self) {
    const Shape& xs = t.value(x.id).shape();
    const int batch = xs[0], channels = xs[1];
    const float* in = t.value(x.id).ptr();
    const float* g = t.grad(self).ptr();
    const float* gamma = t.value(scale.id).ptr();
    const bool need_x = needs(t, x), need_scale = needs(t, scale), need_shift = needs(t, shift);
    float* dgamma = need_scale ? t.grad_buffer(scale.id).ptr() : nullptr;
    float* dbeta = need_shift ? t.grad_buffer(shift.id).ptr() : nullptr;
    float* dx = need_x ? t.grad_buffer(x.id).ptr() : nullptr;
    for (int n = 0; n < batch; ++n) {
      for (int gi = 0; gi < groups; ++gi) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels + gi * per_group) * plane;
        const float mu = (*stats)[(static_cast<std::size_t>(n) * groups + gi) * 2];
        const float inv_std = (*stats)[(static_cast<std::size_t>(n) * groups + gi) * 2 + 1];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int c = 0; c < per_group; ++c) {
          const int ch = gi * per_group + c;
          const std::size_t off = base + c * plane;
          double dg = 0.0, db = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            const float xhat = (in[off + i] - mu) * inv_std;
            const float gv = g[off + i];
            dg += static_cast<double>(gv) * xhat;
            db += gv;
            const float dxhat = gv * gamma[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += static_cast<double>(dxhat) * xhat;
          }
          if (dgamma) dgamma[ch] += static_cast<float>(dg);
          if (dbeta) dbeta[ch] += static_cast<float>(db);
        }
        if (!dx) continue;
        const auto m = static_cast<double>(group_size);
        const float mean_dxhat = static_cast<float>(sum_dxhat / m);
        const float mean_dxhat_xhat = static_cast<float>(sum_dxhat_xhat / m);
        for (int c = 0; c < per_group; ++c) {
          const int ch = gi * per_group + c;
          const std::size_t off = base + c * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const float xhat = (in[off + i] - mu) * inv_std;
            const float dxhat = g[off + i] * gamma[ch];
            dx[off + i] += inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
          }
        }
      }
    }
  });
}

Var global_avg_pool(Var x) {
  Tape& tape = tape_of({x});
  const Shape& xs = x.shape();
  require_rank("global_avg_pool", xs, 4);
  const int planes = xs[0] * xs[1];
  const std::size_t plane = static_cast<std::size_t>(xs[2]) * xs[3];
  Tensor out(Shape{xs[0], xs[1]});
  for (int p = 0; p < planes; ++p) {
    double s = 0.0;
    const float* in = x.value().ptr() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) s += in[i];
    out[static_cast<std::size_t>(p)] = static_cast<float>(s / static_cast<double>(plane));
  }
  return tape.record(std::move(out), {x.id}, [x, planes, plane](Tape& t, int self) {
    const float* g = t.grad(self).ptr();
    float* dx = t.grad_buffer(x.id).ptr();
    const float inv = 1.0f / static_cast<float>(plane);
    for (int p = 0; p < planes; ++p) {
      const float gv = g[p] * inv;
      for (std::size_t i = 0; i < plane; ++i) dx[p * plane + i] += gv;
    }
  });
}

Var dense(Var x, Var weight, Var bias) {
  Tape& tape = tape_of({x, weight, bias});
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require_rank("dense input", xs, 2);
  require_rank("dense weight", ws, 2);
  if (xs[1] != ws[1]) shape_error("dense", xs, ws);
  if (valid(bias) && bias.shape() != Shape{ws[0]}) shape_error("dense bias", ws, bias.shape());
  const int batch = xs[0], features = xs[1], outputs = ws[0];
  Tensor out(Shape{batch, outputs});
  MapMat om(out.ptr(), batch, outputs);
  om.noalias() = ConstMapMat(x.value().ptr(), batch, features) *
                 ConstMapMat(weight.value().ptr(), outputs, features).transpose();
  if (valid(bias)) {
    for (int n = 0; n < batch; ++n) {
      for (int o = 0; o < outputs; ++o) om(n, o) += bias.value()[static_cast<std::size_t>(o)];
    }
  }
  return tape.record(std::move(out), {x.id, weight.id, valid(bias) ? bias.id : -1},
                     [x, weight, bias, batch, features, outputs](Tape& t, int self) {
    ConstMapMat g(t.grad(self).ptr(), batch, outputs);
    if (needs(t, x)) {
      MapMat dx(t.grad_buffer(x.id).ptr(), batch, features);
      dx.noalias() += g * ConstMapMat(t.value(weight.id).ptr(), outputs, features);
    }
    if (needs(t, weight)) {
      MapMat dw(t.grad_buffer(weight.id).ptr(), outputs, features);
      dw.noalias() += g.transpose() * ConstMapMat(t.value(x.id).ptr(), batch, features);
    }
    if (needs(t, bias)) {
      float* db = t.grad_buffer(bias.id).ptr();
      for (int o = 0; o < outputs; ++o) db[o] += ordered_sum(g.data() + o, batch, outputs);
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of({a, b});
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  Tensor out = a.value();
  const float* bp = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
  return tape.record(std::move(out), {a.id, b.id}, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    for (Var v : {a, b}) {
      if (!needs(t, v)) continue;
      float* d = t.grad_buffer(v.id).ptr();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Var concat_channels(Var a, Var b) {
  Tape& tape = tape_of({a, b});
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require_rank("concat_channels", as, 4);
  require_rank("concat_channels", bs, 4);
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) shape_error("concat_channels", as, bs);
  const int batch = as[0];
  const std::size_t a_block = static_cast<std::size_t>(as[1]) * as[2] * as[3];
  const std::size_t b_block = static_cast<std::size_t>(bs[1]) * bs[2] * bs[3];
  Tensor out(Shape{batch, as[1] + bs[1], as[2], as[3]});
  for (int n = 0; n < batch; ++n) {
    float* dst = out.ptr() + n * (a_block + b_block);
    std::copy_n(a.value().ptr() + n * a_block, a_block, dst);
    std::copy_n(b.value().ptr() + n * b_block, b_block, dst + a_block);
  }
  return tape.record(std::move(out), {a.id, b.id}, [a, b, batch, a_block, b_block](Tape& t, int self) {
    const float* g = t.grad(self).ptr();
    const bool need_a = needs(t, a), need_b = needs(t, b);
    for (int n = 0; n < batch; ++n) {
      const float* src = g + n * (a_block + b_block);
      if (need_a) {
        float* da = t.grad_buffer(a.id).ptr() + n * a_block;
        for (std::size_t i = 0; i < a_block; ++i) da[i] += src[i];
      }
      if (need_b) {
        float* db = t.grad_buffer(b.id).ptr() + n * b_block;
        for (std::size_t i = 0; i < b_block; ++i) db[i] += src[a_block + i];
      }
    }
  });
}

Var spatial_attention(Var q, Var k, Var v) {
  Tape& tape = tape_of({q, k, v});
  const Shape& qs = q.shape();
  require_rank("spatial_attention", qs, 4);
  if (k.shape() != qs) shape_error("spatial_attention", qs, k.shape());
  if (v.shape() != qs) shape_error("spatial_attention", qs, v.shape());
  const int batch = qs[0], channels = qs[1], len = qs[2] * qs[3];
  const float scale = 1.0f / std::sqrt(static_cast<float>(channels));
  const std::size_t block = static_cast<std::size_t>(channels) * len;
  auto attn = std::make_shared<std::vector<float>>(static_cast<std::size_t>(batch) * len * len);
  Tensor out(qs);
  for (int n = 0; n < batch; ++n) {
    ConstMapMat qm(q.value().ptr() + n * block, channels, len);
    ConstMapMat km(k.value().ptr() + n * block, channels, len);
    ConstMapMat vm(v.value().ptr() + n * block, channels, len);
    MapMat am(attn->data() + static_cast<std::size_t>(n) * len * len, len, len);
    am.noalias() = (qm.transpose() * km) * scale;
    for (int i = 0; i < len; ++i) {
      const float mx = am.row(i).maxCoeff();
      am.row(i).array() = (am.row(i).array() - mx).exp();
      am.row(i) /= ordered_sum(am.data() + static_cast<std::size_t>(i) * len, len, 1);
    }
    MapMat om(out.ptr() + n * block, channels, len);
    om.noalias() = vm * am.transpose();
  }
  return tape.record(std::move(out), {q.id, k.id, v.id},
                     [q, k, v, attn, batch, channels, len, scale, block](Tape& t, int self) {
    RowMat dattn(len, len), dscore(len, len);
    for (int n = 0; n < batch; ++n) {
      ConstMapMat dom(t.grad(self).ptr() + n * block, channels, len);
      ConstMapMat qm(t.value(q.id).ptr() + n * block, channels, len);
      ConstMapMat km(t.value(k.id).ptr() + n * block, channels, len);
      ConstMapMat vm(t.value(v.id).ptr() + n * block, channels, len);
      ConstMapMat am(attn->data() + static_cast<std::size_t>(n) * len * len, len, len);
      if (needs(t, v)) {
        MapMat dv(t.grad_buffer(v.id).ptr() + n * block, channels, len);
        dv.noalias() += dom * am;
      }
      if (!needs(t, q) && !needs(t, k)) continue;
      dattn.noalias() = dom.transpose() * vm;
      for (int i = 0; i < len; ++i) {
        float dot = 0.0f;
        for (int j = 0; j < len; ++j) dot += dattn(i, j) * am(i, j);
        dscore.row(i).array() = am.row(i).array() * (dattn.row(i).array() - dot) * scale;
      }
      if (needs(t, q)) {
        MapMat dq(t.grad_buffer(q.id).ptr() + n * block, channels, len);
        dq.noalias() += km * dscore.transpose();
      }
      if (needs(t, k)) {
        MapMat dk(t.grad_buffer(k.id).ptr() + n * block, channels, len);
        dk.noalias() += qm * dscore;
      }
    }
  });
}

Var softmax_cross_entropy(Var logits, std::vector<int> labels, int ignore_index) {
  Tape& tape = tape_of({logits});
  const Shape& ls = logits.shape();
  require(ls.rank() == 2 || ls.rank() == 4, ErrorKind::ShapeMismatch,
          "softmax_cross_entropy: logits must be [N,C] or [N,C,H,W], got " + ls.str());
  const int batch = ls[0], classes = ls[1];
  const std::size_t plane = ls.rank() == 4 ? static_cast<std::size_t>(ls[2]) * ls[3] : 1;
  if (labels.size() != batch * plane) {
    fail(ErrorKind::ShapeMismatch, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                       " labels for logits " + ls.str());
  }
  const float* z = logits.value().ptr();
  double total = 0.0;
  std::size_t counted = 0;
  for (int n = 0; n < batch; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const int label = labels[n * plane + p];
      if (label == ignore_index) continue;
      require(label >= 0 && label < classes, ErrorKind::InvalidData,
              "label " + std::to_string(label) + " outside [0," + std::to_string(classes) + ")");
      const float* zp = z + static_cast<std::size_t>(n) * classes * plane + p;
      float mx = -std::numeric_limits<float>::infinity();
      for (int c = 0; c < classes; ++c) mx = std::max(mx, zp[c * plane]);
      double se = 0.0;
      for (int c = 0; c < classes; ++c) se += std::exp(static_cast<double>(zp[c * plane] - mx));
      total += std::log(se) + mx - zp[static_cast<std::size_t>(label) * plane];
      ++counted;
    }
  }
  const double loss = counted ? total / static_cast<double>(counted) : 0.0;
  auto owned = std::make_shared<std::vector<int>>(std::move(labels));
  return tape.record(Tensor(Shape{1}, {static_cast<float>(loss)}), {logits.id},
                     [logits, owned, ignore_index, batch, classes, plane, counted](Tape& t, int self) {
    if (counted == 0) return;
    const float upstream = t.grad(self)[0] / static_cast<float>(counted);
    const float* z = t.value(logits.id).ptr();
    float* dz = t.grad_buffer(logits.id).ptr();
    std::vector<double> prob(static_cast<std::size_t>(classes));
    for (int n = 0; n < batch; ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        const int label = (*owned)[n * plane + p];
        if (label == ignore_index) continue;
        const std::size_t base = static_cast<std::size_t>(n) * classes * plane + p;
        float mx = -std::numeric_limits<float>::infinity();
        for (int c = 0; c < classes; ++c) mx = std::max(mx, z[base + c * plane]);
        double se = 0.0;
        for (int c = 0; c < classes; ++c) {
          prob[c] = std::exp(static_cast<double>(z[base + c * plane] - mx));
          se += prob[c];
        }
        for (int c = 0; c < classes; ++c) {
          const double target = c == label ? 1.0 : 0.0;
          dz[base + c * plane] += static_cast<float>((prob[c] / se - target) * upstream);
        }
      }
    }
  });
}

Var mean_squared_error(Var prediction, const Tensor& target) {
  Tape& tape = tape_of({prediction});
  if (prediction.shape() != target.shape()) shape_error("mean_squared_error", prediction.shape(), target.shape());
  const float* p = prediction.value().ptr();
  const float* q = target.ptr();
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(p[i]) - q[i];
    total += d * d;
  }
  const double loss = total / static_cast<double>(target.size());
  auto owned = std::make_shared<Tensor>(target);
  return tape.record(Tensor(Shape{1}, {static_cast<float>(loss)}), {prediction.id},
                     [prediction, owned](Tape& t, int self) {
    const std::size_t n = owned->size();
    const float scale = 2.0f * t.grad(self)[0] / static_cast<float>(n);
    const float* p = t.value(prediction.id).ptr();
    const float* q = owned->ptr();
    float* dp = t.grad_buffer(prediction.id).ptr();
    for (std::size_t i = 0; i < n; ++i) dp[i] += scale * (p[i] - q[i]);
  });
}

Var weighted_sum(Var x, const Tensor& weights) {
  Tape& tape = tape_of({x});
  if (x.shape() != weights.shape()) shape_error("weighted_sum", x.shape(), weights.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += static_cast<double>(x.value()[i]) * weights[i];
  auto owned = std::make_shared<Tensor>(weights);
  return tape.record(Tensor(Shape{1}, {static_cast<float>(total)}), {x.id}, [x, owned](Tape& t, int self) {
    const float g = t.grad(self)[0];
    float* dx = t.grad_buffer(x.id).ptr();
    for (std::size_t i = 0; i < owned->size(); ++i) dx[i] += g * (*owned)[i];
  });
}

}  // namespace ddep::ad
