#include "ddep/model.hpp"

#include <cmath>
#include <numeric>

#include "ddep/error.hpp"
#include "ddep/rng.hpp"

namespace ddep {

namespace {

int norm_groups(int channels) { return std::gcd(8, channels); }

Tensor he_normal(const Shape& shape, int fan_in, std::uint64_t seed, const std::string& name) {
  Rng rng = Rng(seed).split(Rng::key(name));
  const double std_dev = std::sqrt(2.0 / fan_in);
  Tensor t(shape);
  for (float& v : t.data()) v = static_cast<float>(rng.normal() * std_dev);
  return t;
}

void add_conv(ParamSet& ps, const std::string& prefix, int out, int in, int kernel, bool bias,
              std::uint64_t seed) {
  const std::string wname = prefix + ".weight";
  ps.add(wname, he_normal(Shape{out, in, kernel, kernel}, in * kernel * kernel, seed, wname), true);
  if (bias) ps.add(prefix + ".bias", Tensor(Shape{out}), false);
}

void add_norm(ParamSet& ps, const std::string& prefix, int channels) {
  ps.add(prefix + ".scale", Tensor(Shape{channels}, 1.0f), false);
  ps.add(prefix + ".shift", Tensor(Shape{channels}), false);
}

std::string stage(const char* part, int i) { return std::string(part) + ".stage" + std::to_string(i); }

struct Builder {
  const Model& model;
  ad::Tape& tape;

  ad::Var p(const std::string& name) const { return tape.parameter(model.params(), name); }

  ad::Var conv(ad::Var x, const std::string& prefix, int stride, int padding, bool bias = false) const {
    return ad::conv2d(x, p(prefix + ".weight"), bias ? p(prefix + ".bias") : ad::Var{}, stride, padding);
  }

  ad::Var norm_relu(ad::Var x, const std::string& prefix, bool activate = true) const {
    ad::Var y = ad::group_norm(x, p(prefix + ".scale"), p(prefix + ".shift"), norm_groups(x.shape()[1]));
    return activate ? ad::relu(y) : y;
  }
};

}  // namespace

std::string to_string(Head head) {
  switch (head) {
    case Head::Classifier: return "classifier";
    case Head::Denoiser: return "denoiser";
    case Head::Segmenter: return "segmenter";
  }
  return "segmenter";
}

Head parse_head(const std::string& text) {
  if (text == "classifier") return Head::Classifier;
  if (text == "denoiser") return Head::Denoiser;
  if (text == "segmenter") return Head::Segmenter;
  fail(ErrorKind::InvalidArgument, "unknown head '" + text + "'");
}

void ModelConfig::validate() const {
  require(in_channels > 0, ErrorKind::InvalidArgument, "in_channels must be positive");
  require(!encoder_widths.empty(), ErrorKind::InvalidArgument, "encoder_widths must not be empty");
  require(base_decoder_widths.size() == encoder_widths.size(), ErrorKind::InvalidArgument,
          "base_decoder_widths needs one entry per encoder stage (" + std::to_string(encoder_widths.size()) +
              "), got " + std::to_string(base_decoder_widths.size()));
  for (int w : encoder_widths) require(w > 0, ErrorKind::InvalidArgument, "encoder widths must be positive");
  for (int w : base_decoder_widths) require(w > 0, ErrorKind::InvalidArgument, "decoder widths must be positive");
  require(decoder_width_multiplier >= 1 && decoder_width_multiplier <= 3, ErrorKind::InvalidArgument,
          "decoder_width_multiplier must be 1, 2 or 3");
  require(num_classes > 0, ErrorKind::InvalidArgument, "num_classes must be positive");
  require(num_stages() <= 8, ErrorKind::InvalidArgument, "too many encoder stages");
}

std::vector<int> ModelConfig::decoder_widths() const {
  std::vector<int> out;
  for (int w : base_decoder_widths) out.push_back(w * decoder_width_multiplier);
  return out;
}

std::vector<std::string> ModelConfig::architecture_diff(const ModelConfig& other) const {
  std::vector<std::string> diff;
  if (in_channels != other.in_channels) diff.emplace_back("in_channels");
  if (encoder_widths != other.encoder_widths) diff.emplace_back("encoder_widths");
  if (base_decoder_widths != other.base_decoder_widths) diff.emplace_back("base_decoder_widths");
  if (decoder_width_multiplier != other.decoder_width_multiplier) diff.emplace_back("decoder_width_multiplier");
  if (bottleneck_attention != other.bottleneck_attention) diff.emplace_back("bottleneck_attention");
  return diff;
}

std::map<std::string, bool> Model::trainable_mask() const {
  std::map<std::string, bool> mask;
  for (const auto& [name, e] : params_) mask[name] = e.trainable;
  return mask;
}

void init_head(ParamSet& params, const ModelConfig& config, std::uint64_t seed) {
  params.erase_prefix("head.");
  switch (config.head) {
    case Head::Classifier: {
      const int features = config.encoder_widths.back();
      const std::string w = "head.classifier.weight";
      params.add(w, he_normal(Shape{config.num_classes, features}, features, seed, w), true);
      params.add("head.classifier.bias", Tensor(Shape{config.num_classes}), false);
      break;
    }
    case Head::Denoiser:
      add_conv(params, "head.denoiser", config.in_channels, config.decoder_widths().back(), 1, true, seed);
      break;
    case Head::Segmenter:
      add_conv(params, "head.segmenter", config.num_classes, config.decoder_widths().back(), 1, true, seed);
      break;
  }
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParamSet ps;
  const auto& enc = config.encoder_widths;
  add_conv(ps, "encoder.stem.conv", enc[0], config.in_channels, 3, false, seed);
  add_norm(ps, "encoder.stem.norm", enc[0]);
  int channels = enc[0];
  for (int i = 0; i < config.num_stages(); ++i) {
    const std::string s = stage("encoder", i + 1);
    add_conv(ps, s + ".down.conv", enc[i], channels, 3, false, seed);
    add_norm(ps, s + ".down.norm", enc[i]);
    add_conv(ps, s + ".res.conv", enc[i], enc[i], 3, false, seed);
    add_norm(ps, s + ".res.norm", enc[i]);
    channels = enc[i];
  }
  if (config.bottleneck_attention) {
    add_norm(ps, "encoder.attention.norm", channels);
    for (const char* proj : {"query", "key", "value", "out"}) {
      add_conv(ps, std::string("encoder.attention.") + proj, channels, channels, 1, true, seed);
    }
  }
  const std::vector<int> dec = config.decoder_widths();
  for (int j = 0; j < config.num_stages(); ++j) {
    // stage j+1 lands on the resolution of skip source (num_stages - 1 - j):
    // the stem for the last stage, encoder stage k's output otherwise
    const int source = config.num_stages() - 1 - j;
    const int skip_channels = source == 0 ? enc[0] : enc[source - 1];
    const std::string s = stage("decoder", j + 1);
    add_conv(ps, s + ".up.conv", dec[j], channels, 3, false, seed);
    add_norm(ps, s + ".up.norm", dec[j]);
    add_conv(ps, s + ".fuse.conv", dec[j], dec[j] + skip_channels, 3, false, seed);
    add_norm(ps, s + ".fuse.norm", dec[j]);
    channels = dec[j];
  }
  init_head(ps, config, seed);
  return Model(config, std::move(ps));
}

void check_input(const ModelConfig& config, const Shape& shape) {
  require(shape.rank() == 4, ErrorKind::InvalidArgument, "model input must be [N,C,H,W], got " + shape.str());
  require(shape[1] == config.in_channels, ErrorKind::InvalidArgument,
          "model expects " + std::to_string(config.in_channels) + " input channels, got " + shape.str());
  const int d = config.divisor();
  require(shape[2] % d == 0 && shape[3] % d == 0, ErrorKind::InvalidArgument,
          "spatial extents of " + shape.str() + " must be divisible by " + std::to_string(d));
}

ad::Var forward(const Model& model, ad::Tape& tape, ad::Var x, const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  check_input(cfg, x.shape());
  Builder b{model, tape};

  std::vector<ad::Var> skips;
  ad::Var h = b.norm_relu(b.conv(x, "encoder.stem.conv", 1, 1), "encoder.stem.norm");
  skips.push_back(h);
  for (int i = 0; i < cfg.num_stages(); ++i) {
    const std::string s = stage("encoder", i + 1);
    ad::Var down = b.norm_relu(b.conv(h, s + ".down.conv", 2, 1), s + ".down.norm");
    ad::Var res = b.norm_relu(b.conv(down, s + ".res.conv", 1, 1), s + ".res.norm", false);
    h = ad::relu(ad::add(down, res));
    if (i + 1 < cfg.num_stages()) skips.push_back(h);
  }
  if (cfg.bottleneck_attention) {
    ad::Var n = b.norm_relu(h, "encoder.attention.norm", false);
    ad::Var q = b.conv(n, "encoder.attention.query", 1, 0, true);
    ad::Var k = b.conv(n, "encoder.attention.key", 1, 0, true);
    ad::Var v = b.conv(n, "encoder.attention.value", 1, 0, true);
    h = ad::add(h, b.conv(ad::spatial_attention(q, k, v), "encoder.attention.out", 1, 0, true));
  }

  if (cfg.head == Head::Classifier) {
    return ad::dense(ad::global_avg_pool(h), b.p("head.classifier.weight"), b.p("head.classifier.bias"));
  }

  for (int j = 0; j < cfg.num_stages(); ++j) {
    const std::string s = stage("decoder", j + 1);
    ad::Var up = b.norm_relu(b.conv(ad::upsample_nearest2x(h), s + ".up.conv", 1, 1), s + ".up.norm");
    ad::Var skip = skips[static_cast<std::size_t>(cfg.num_stages() - 1 - j)];
    if (options.ablate_skip_stage && *options.ablate_skip_stage == j + 1) {
      skip = tape.constant(Tensor(skip.shape()));
    }
    h = b.norm_relu(b.conv(ad::concat_channels(up, skip), s + ".fuse.conv", 1, 1), s + ".fuse.norm");
  }
  return b.conv(h, cfg.head == Head::Denoiser ? "head.denoiser" : "head.segmenter", 1, 0, true);
}

Tensor forward(const Model& model, const Tensor& x, const ForwardOptions& options) {
  ad::Tape tape(false);
  return forward(model, tape, tape.constant(x), options).value();
}

void set_trainable(Model& model, TrainScope scope) {
  for (auto& [name, e] : model.params()) {
    const bool encoder = name.starts_with("encoder.");
    const bool decoder = name.starts_with("decoder.");
    switch (scope) {
      case TrainScope::All: e.trainable = true; break;
      case TrainScope::DecoderAndHeadOnly: e.trainable = !encoder; break;
      case TrainScope::EncoderAndHeadOnly: e.trainable = !decoder; break;
    }
  }
}

void swap_head(Model& model, Head head, int num_classes, std::uint64_t seed) {
  require(num_classes > 0, ErrorKind::InvalidArgument, "num_classes must be positive");
  model.mutable_config().head = head;
  model.mutable_config().num_classes = num_classes;
  init_head(model.params(), model.config(), seed);
}

}  // namespace ddep
