#pragma once

// Double-precision re-statement of the encoder-decoder forward pass, written
// against the parameter naming scheme only. Used as the finite-difference
// oracle for whole-model gradient checks.

#include <numeric>
#include <string>
#include <vector>

#include "ddep/model.hpp"
#include "reference_ops.hpp"

namespace ddep::ref {

inline T model_forward(const ModelConfig& cfg, const ParamSet& ps, const T& x) {
  auto P = [&](const std::string& n) { return param(ps, n); };
  auto gn = [&](const T& v, const std::string& prefix, bool act) {
    T y = group_norm(v, P(prefix + ".scale"), P(prefix + ".shift"), std::gcd(8, v[1]));
    return act ? relu(y) : y;
  };
  const int S = static_cast<int>(cfg.encoder_widths.size());
  std::vector<T> skips;
  T h = gn(conv2d(x, P("encoder.stem.conv.weight"), nullptr, 1, 1), "encoder.stem.norm", true);
  skips.push_back(h);
  for (int i = 1; i <= S; ++i) {
    const std::string s = "encoder.stage" + std::to_string(i);
    T down = gn(conv2d(h, P(s + ".down.conv.weight"), nullptr, 2, 1), s + ".down.norm", true);
    T res = gn(conv2d(down, P(s + ".res.conv.weight"), nullptr, 1, 1), s + ".res.norm", false);
    h = relu(add(down, res));
    if (i < S) skips.push_back(h);
  }
  if (cfg.bottleneck_attention) {
    T n = gn(h, "encoder.attention.norm", false);
    auto proj = [&](const std::string& name, const T& in) {
      const T b = P("encoder.attention." + name + ".bias");
      return conv2d(in, P("encoder.attention." + name + ".weight"), &b, 1, 0);
    };
    h = add(h, proj("out", attention(proj("query", n), proj("key", n), proj("value", n))));
  }
  if (cfg.head == Head::Classifier) {
    const T b = P("head.classifier.bias");
    return dense(global_avg_pool(h), P("head.classifier.weight"), &b);
  }
  for (int j = 1; j <= S; ++j) {
    const std::string s = "decoder.stage" + std::to_string(j);
    T up = gn(conv2d(upsample2x(h), P(s + ".up.conv.weight"), nullptr, 1, 1), s + ".up.norm", true);
    h = gn(conv2d(concat(up, skips[static_cast<std::size_t>(S - j)]), P(s + ".fuse.conv.weight"), nullptr, 1, 1),
           s + ".fuse.norm", true);
  }
  const std::string head = cfg.head == Head::Denoiser ? "head.denoiser" : "head.segmenter";
  const T b = P(head + ".bias");
  return conv2d(h, P(head + ".weight"), &b, 1, 0);
}

}  // namespace ddep::ref
