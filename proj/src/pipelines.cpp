#include "ddep/pipelines.hpp"

#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ddep/autodiff.hpp"
#include "ddep/error.hpp"
#include "ddep/hash.hpp"

namespace ddep {

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::EncoderSupervised: return "encoder";
    case Stage::DeP: return "dep";
    case Stage::DDeP: return "ddep";
    case Stage::FineTune: return "finetune";
  }
  return "?";
}

Stage parse_stage(const std::string& text) {
  if (text == "encoder") return Stage::EncoderSupervised;
  if (text == "dep") return Stage::DeP;
  if (text == "ddep") return Stage::DDeP;
  if (text == "finetune") return Stage::FineTune;
  fail(ErrorKind::InvalidData, "unknown stage tag '" + text + "'");
}

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string join_doubles(const std::array<double, 3>& v) {
  return format_double(v[0]) + "," + format_double(v[1]) + "," + format_double(v[2]);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorKind::Truncated, origin_ + ": file ends inside " + what + " (offset " + std::to_string(pos_) + ", need " +
                                     std::to_string(n) + " bytes, have " + std::to_string(bytes_.size() - pos_) + ")");
    }
    const std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint32_t u32(const char* what) {
    const std::string_view b = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(take(1, what)[0]); }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    return std::string(take(n, what));
  }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  std::string origin_;
};

std::array<double, 3> parse_triple(const std::string& text, const std::string& origin) {
  const std::vector<std::string> items = split_list(text);
  require(items.size() == 3, ErrorKind::InvalidData, origin + ": expected 3 normalization values");
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i) {
    const std::string& s = items[static_cast<std::size_t>(i)];
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out[static_cast<std::size_t>(i)]);
    require(ec == std::errc() && ptr == s.data() + s.size(), ErrorKind::InvalidData, origin + ": bad number '" + s + "'");
  }
  return out;
}

std::string meta(const std::map<std::string, std::string>& raw, const std::string& key, const std::string& origin) {
  const auto it = raw.find(key);
  require(it != raw.end(), ErrorKind::InvalidData, origin + ": checkpoint metadata lacks " + key);
  return it->second;
}

template <typename T>
T parse_number(const std::string& text, const std::string& what) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  require(ec == std::errc() && ptr == text.data() + text.size(), ErrorKind::InvalidData, what + ": bad number '" + text + "'");
  return v;
}

}  // namespace

std::string Checkpoint::blob() const {
  std::string out = config_text;
  if (!out.empty() && out.back() != '\n') out += '\n';
  out += "checkpoint.stage = " + to_string(stage) + "\n";
  out += "checkpoint.head = " + to_string(model.head) + "\n";
  out += "checkpoint.seed = " + std::to_string(seed) + "\n";
  out += "checkpoint.steps = " + std::to_string(steps) + "\n";
  out += "checkpoint.config_hash = " + config_hash + "\n";
  out += "checkpoint.norm_mean = " + join_doubles(norm.mean) + "\n";
  out += "checkpoint.norm_std = " + join_doubles(norm.std) + "\n";
  return out;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out = "DDEP";
  put_u32(out, kCheckpointVersion);
  put_string(out, ckpt.blob());
  put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, e] : ckpt.params) {
    put_string(out, name);
    const std::vector<int>& dims = e.value.shape().dims();
    out.push_back(static_cast<char>(dims.size()));
    for (int d : dims) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& origin) {
  Reader in(bytes, origin);
  if (bytes.size() < 4 || bytes.substr(0, 4) != "DDEP") {
    fail(ErrorKind::BadMagic, origin + ": not a checkpoint (bad magic)");
  }
  in.take(4, "magic");
  const std::uint32_t version = in.u32("version");
  require(version == kCheckpointVersion, ErrorKind::VersionMismatch,
          origin + ": checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  const std::string blob = in.str("config blob");

  Checkpoint ckpt;
  const std::size_t meta_at = blob.find("checkpoint.stage = ");
  require(meta_at != std::string::npos && (meta_at == 0 || blob[meta_at - 1] == '\n'), ErrorKind::InvalidData,
          origin + ": config blob lacks checkpoint metadata");
  ckpt.config_text = blob.substr(0, meta_at);
  const std::map<std::string, std::string> raw = Config::parse_raw(blob, origin);
  ckpt.stage = parse_stage(meta(raw, "checkpoint.stage", origin));
  const Head head = parse_head(meta(raw, "checkpoint.head", origin));
  ckpt.seed = parse_number<std::uint64_t>(meta(raw, "checkpoint.seed", origin), origin);
  ckpt.steps = parse_number<std::int64_t>(meta(raw, "checkpoint.steps", origin), origin);
  ckpt.config_hash = meta(raw, "checkpoint.config_hash", origin);
  ckpt.norm.mean = parse_triple(meta(raw, "checkpoint.norm_mean", origin), origin);
  ckpt.norm.std = parse_triple(meta(raw, "checkpoint.norm_std", origin), origin);

  Config model_keys = Config::defaults();
  for (const auto& [key, value] : raw) {
    if (key.starts_with("model.")) model_keys.set(key, value);
  }
  try {
    ckpt.model = model_config(model_keys, head);
  } catch (const Error& e) {
    fail(ErrorKind::InvalidData, origin + ": embedded model config is invalid: " + e.what());
  }
  const Model reference = build_model(ckpt.model, 0);

  const std::uint32_t count = in.u32("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = in.str("tensor name");
    const int rank = in.u8("tensor rank");
    std::vector<int> dims;
    for (int r = 0; r < rank; ++r) {
      const std::uint32_t d = in.u32("tensor extent");
      require(d > 0 && d < (1u << 28), ErrorKind::InvalidData, origin + ": tensor " + name + " has a bad extent");
      dims.push_back(static_cast<int>(d));
    }
    const Shape shape(dims);
    require(reference.params().contains(name), ErrorKind::ShapeMismatch,
            origin + ": tensor " + name + " does not exist in the embedded model config");
    const Shape& expected = reference.params().value(name).shape();
    require(expected == shape, ErrorKind::ShapeMismatch,
            origin + ": tensor " + name + " has shape " + shape.str() + ", embedded model config expects " + expected.str());
    const std::string_view raw_values = in.take(shape.numel() * 4, "tensor values");
    std::vector<float> values(shape.numel());
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw_values[i * 4 + b])) << (8 * b);
      values[i] = std::bit_cast<float>(bits);
    }
    require(!ckpt.params.contains(name), ErrorKind::InvalidData, origin + ": duplicate tensor " + name);
    ckpt.params.add(name, Tensor(shape, std::move(values)), reference.params().entry(name).decays);
  }
  require(in.done(), ErrorKind::InvalidData, origin + ": trailing bytes after the last tensor");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  // Write then rename so readers never observe a partial file.
  const std::string tmp = path + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::Io, "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorKind::Io, "cannot rename " + tmp + " to " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), path);
}

void check_compatible(const ModelConfig& expected, const ModelConfig& found, bool encoder_only, const std::string& origin) {
  std::vector<std::string> diff = expected.architecture_diff(found);
  if (encoder_only) {
    std::erase_if(diff, [](const std::string& f) { return f.find("decoder") != std::string::npos; });
  }
  if (diff.empty()) return;
  std::string fields;
  for (const std::string& f : diff) fields += (fields.empty() ? "" : ", ") + f;
  fail(ErrorKind::ConfigMismatch, origin + ": checkpoint model config differs in " + fields);
}

std::string TrainLog::steps_csv() const {
  std::string out = "step,lr,loss\n";
  for (const Step& s : steps) out += std::to_string(s.step) + "," + format_double(s.lr) + "," + format_double(s.loss) + "\n";
  return out;
}

std::string TrainLog::metrics_csv() const {
  std::string out = "epoch,metric_name,value\n";
  for (const Metric& m : metrics) out += std::to_string(m.epoch) + "," + m.name + "," + format_double(m.value) + "\n";
  return out;
}

void TrainLog::write(const std::string& prefix) const {
  for (const auto& [suffix, text] : {std::pair{"steps.csv", steps_csv()}, std::pair{"metrics.csv", metrics_csv()}}) {
    std::ofstream out(prefix + suffix);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + prefix + suffix);
    out << text;
  }
}

DatasetSpec dataset_spec(const Config& cfg, const std::string& section) {
  DatasetSpec spec;
  spec.num_samples = static_cast<int>(cfg.get_int(section + ".num_samples"));
  spec.seed = cfg.get_u64(section + ".seed");
  spec.image_size = static_cast<int>(cfg.get_int(section + ".image_size"));
  spec.min_shapes = static_cast<int>(cfg.get_int(section + ".min_shapes"));
  spec.max_shapes = static_cast<int>(cfg.get_int(section + ".max_shapes"));
  spec.noise_free = cfg.get_bool(section + ".noise_free");
  spec.num_classes = static_cast<int>(cfg.get_int("model.num_classes"));
  try {
    spec.validate();
  } catch (const Error& e) {
    fail(ErrorKind::InvalidConfig, "section '" + section + "': " + e.what());
  }
  return spec;
}

std::vector<Sample> load_dataset(const Config& cfg, const std::string& section) {
  const DatasetSpec spec = dataset_spec(cfg, section);
  const std::string& manifest = cfg.get(section + ".manifest");
  if (manifest.empty()) return gen_dataset(spec);
  std::vector<Sample> out;
  for (const ManifestEntry& e : read_manifest(manifest)) out.push_back(load_sample(e, spec.num_classes));
  require(!out.empty(), ErrorKind::InvalidData, manifest + ": manifest lists no samples");
  return out;
}

ModelConfig model_config(const Config& cfg, Head head) {
  ModelConfig mc;
  mc.encoder_widths = cfg.get_ints("model.encoder_widths");
  mc.base_decoder_widths = cfg.get_ints("model.decoder_widths");
  mc.decoder_width_multiplier = static_cast<int>(cfg.get_int("model.decoder_width_multiplier"));
  mc.bottleneck_attention = cfg.get_bool("model.bottleneck_attention");
  mc.num_classes = static_cast<int>(cfg.get_int("model.num_classes"));
  mc.head = head;
  try {
    mc.validate();
  } catch (const Error& e) {
    fail(ErrorKind::InvalidConfig, std::string("model section: ") + e.what());
  }
  return mc;
}

NoiseSpec noise_spec(const Config& cfg) {
  const std::string& f = cfg.get_choice("denoise.formulation", {"scaled", "simple"});
  const std::string& t = cfg.get_choice("denoise.target", {"noise", "image"});
  const std::string& m = cfg.get("denoise.magnitude");
  const auto colon = [&](std::size_t from) { return m.find(':', from); };
  const std::size_t c1 = colon(0);
  const std::string kind = m.substr(0, c1);
  const auto number = [&](const std::string& s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      fail(ErrorKind::InvalidConfig, "key 'denoise.magnitude': bad number '" + s + "' in '" + m + "'");
    }
    return v;
  };
  NoiseMagnitude mag;
  if (kind == "sigma" && c1 != std::string::npos) {
    mag = FixedSigma{number(m.substr(c1 + 1))};
  } else if (kind == "gamma" && c1 != std::string::npos) {
    mag = FixedGamma{number(m.substr(c1 + 1))};
  } else if (kind == "uniform" && c1 != std::string::npos && colon(c1 + 1) != std::string::npos) {
    const std::size_t c2 = colon(c1 + 1);
    mag = UniformGamma{number(m.substr(c1 + 1, c2 - c1 - 1)), number(m.substr(c2 + 1))};
  } else {
    fail(ErrorKind::InvalidConfig,
         "key 'denoise.magnitude': expected sigma:<s>, gamma:<g> or uniform:<lo>:<hi>, got '" + m + "'");
  }
  return NoiseSpec(f == "scaled" ? Formulation::Scaled : Formulation::Simple,
                   t == "noise" ? DenoiseTarget::Noise : DenoiseTarget::CleanImage, mag);
}

InferenceProtocol inference_protocol(const Config& cfg) {
  InferenceProtocol p;
  p.scales = cfg.get_doubles("eval.scales");
  p.flip = cfg.get_bool("eval.flip");
  p.patch_width = static_cast<int>(cfg.get_int("eval.patch_width"));
  try {
    p.validate();
  } catch (const Error& e) {
    fail(ErrorKind::InvalidConfig, e.what());
  }
  return p;
}

Stage denoise_stage(const Config& cfg) {
  return cfg.get_choice("denoise.mode", {"ddep", "dep"}) == "ddep" ? Stage::DDeP : Stage::DeP;
}

bool denoise_needs_encoder(const Config& cfg) {
  return denoise_stage(cfg) == Stage::DDeP ||
         cfg.get_choice("denoise.dep_init", {"scratch", "encoder"}) == "encoder";
}

std::string stage_hash(const Config& cfg, Stage stage, const std::string& upstream_hash) {
  std::string text;
  switch (stage) {
    case Stage::EncoderSupervised:
      text = cfg.text({"pretrain_data.", "model.encoder_widths", "model.bottleneck_attention", "model.num_classes", "encoder."});
      break;
    case Stage::DeP:
    case Stage::DDeP:
      text = cfg.text({"pretrain_data.", "model.", "denoise."}, {"denoise.init_from"});
      break;
    case Stage::FineTune:
      text = cfg.text({"finetune_data.", "val_data.", "model.", "finetune.", "eval."}, {"finetune.init_from"});
      break;
  }
  return sha256_hex("stage = " + to_string(stage) + "\n" + text + "upstream = " + upstream_hash + "\n");
}

namespace {

// Endless stream of shuffled passes over a fixed index pool.
class IndexStream {
 public:
  IndexStream(std::vector<int> pool, Rng rng) : pool_(std::move(pool)), rng_(std::move(rng)) {
    require(!pool_.empty(), ErrorKind::InvalidArgument, "cannot sample batches from an empty set");
  }

  std::vector<int> next(int batch) {
    std::vector<int> out;
    while (static_cast<int>(out.size()) < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_ = pool_;
    for (std::size_t i = order_.size(); i > 1; --i) {
      const std::size_t j = rng_.below(i);
      std::swap(order_[i - 1], order_[j]);
    }
    pos_ = 0;
  }

  std::vector<int> pool_;
  Rng rng_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
};

struct Prepared {
  std::vector<Tensor> images;  // normalized
  std::vector<Mask> masks;
  std::vector<int> classes;
  NormStats norm;
};

Prepared prepare(std::vector<Sample> samples, const NormStats& norm) {
  Prepared p;
  p.norm = norm;
  for (Sample& s : samples) {
    p.images.push_back(normalize(s.image, norm));
    p.masks.push_back(std::move(s.mask));
    p.classes.push_back(s.class_label);
  }
  return p;
}

struct Batch {
  Tensor images;
  std::vector<int> pixels;
  std::vector<int> classes;
};

Batch make_batch(const Prepared& data, const std::vector<int>& idx, Rng rng, int crop_size) {
  std::vector<Tensor> images;
  std::vector<Mask> masks;
  Batch b;
  for (int i : idx) {
    auto [image, mask] = augment(data.images[static_cast<std::size_t>(i)], data.masks[static_cast<std::size_t>(i)], rng, crop_size);
    images.push_back(std::move(image));
    masks.push_back(std::move(mask));
    b.classes.push_back(data.classes[static_cast<std::size_t>(i)]);
  }
  b.images = stack_images(images);
  b.pixels = stack_masks(masks);
  return b;
}

struct TrainSettings {
  int batch_size;
  int crop_size;
  std::uint64_t seed;
  OptimizerConfig opt;
};

TrainSettings train_settings(const Config& cfg, const std::string& section, std::int64_t total_steps) {
  TrainSettings s;
  s.batch_size = static_cast<int>(cfg.get_int(section + ".batch_size"));
  s.crop_size = static_cast<int>(cfg.get_int(section + ".crop_size"));
  s.seed = cfg.get_u64(section + ".seed");
  s.opt.base_lr = cfg.get_double(section + ".lr");
  s.opt.weight_decay = cfg.get_double(section + ".weight_decay");
  s.opt.total_steps = total_steps;
  if (s.batch_size <= 0) fail(ErrorKind::InvalidConfig, "key '" + section + ".batch_size': must be positive");
  if (s.crop_size <= 0) fail(ErrorKind::InvalidConfig, "key '" + section + ".crop_size': must be positive");
  try {
    s.opt.validate();
  } catch (const Error& e) {
    fail(ErrorKind::InvalidConfig, "section '" + section + "': " + e.what());
  }
  return s;
}

std::int64_t epoch_steps(const Config& cfg, const std::string& section, std::size_t samples) {
  const long long epochs = cfg.get_int(section + ".epochs");
  const long long batch = cfg.get_int(section + ".batch_size");
  if (epochs <= 0) fail(ErrorKind::InvalidConfig, "key '" + section + ".epochs': must be positive");
  if (batch <= 0) fail(ErrorKind::InvalidConfig, "key '" + section + ".batch_size': must be positive");
  return (static_cast<long long>(samples) + batch - 1) / batch;
}

// One optimizer step; returns the loss.
double train_step(Model& model, const TrainSettings& s, std::int64_t step, TrainLog& log,
                  const std::function<ad::Var(ad::Tape&)>& loss_of) {
  model.params().zero_grad();
  ad::Tape tape;
  const ad::Var loss = loss_of(tape);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) {
    fail(ErrorKind::Diagnostic, "non-finite loss " + format_double(value) + " at step " + std::to_string(step));
  }
  tape.backward(loss);
  tape.accumulate_into(model.params());
  const double lr = cosine_lr(step, s.opt);
  adam_step(model.params(), lr, s.opt);
  log.steps.push_back({step, lr, value});
  return value;
}

void copy_prefix(ParamSet& dst, const ParamSet& src, const std::string& prefix, const std::string& origin) {
  const std::vector<std::string> names = src.names_with_prefix(prefix);
  require(!names.empty(), ErrorKind::ConfigMismatch, origin + ": checkpoint holds no " + prefix + "* tensors");
  for (const std::string& name : dst.names_with_prefix(prefix)) {
    require(src.contains(name), ErrorKind::ConfigMismatch, origin + ": checkpoint lacks tensor " + name);
    const Tensor& v = src.value(name);
    require(v.shape() == dst.value(name).shape(), ErrorKind::ShapeMismatch,
            origin + ": tensor " + name + " has shape " + v.shape().str() + ", model expects " + dst.value(name).shape().str());
    dst.set_value(name, v);
  }
}

Checkpoint make_checkpoint(Stage stage, const Model& model, const Config& cfg, std::uint64_t seed, std::int64_t steps,
                           const std::string& hash, const NormStats& norm, const std::vector<std::string>& prefixes) {
  Checkpoint ckpt;
  ckpt.stage = stage;
  ckpt.model = model.config();
  for (const auto& [name, e] : model.params()) {
    bool keep = prefixes.empty();
    for (const std::string& p : prefixes) keep = keep || name.starts_with(p);
    if (keep) ckpt.params.add(name, e.value, e.decays);
  }
  ckpt.seed = seed;
  ckpt.steps = steps;
  ckpt.config_hash = hash;
  ckpt.config_text = cfg.text({}, {"denoise.init_from", "finetune.init_from"});
  ckpt.norm = norm;
  return ckpt;
}

void report(const ProgressFn& progress, const std::string& line) {
  if (progress) progress(line);
}

std::string fmt_metric(double v) {
  std::ostringstream os;
  os.precision(5);
  os << v;
  return os.str();
}

Checkpoint load_input(const Config& cfg, const std::string& key, const std::string& purpose) {
  const std::string& path = cfg.get(key);
  if (path.empty()) fail(ErrorKind::ContractViolation, purpose + " requires " + key + " (an input checkpoint)");
  if (!std::filesystem::exists(path)) fail(ErrorKind::InvalidConfig, "key '" + key + "': checkpoint " + path + " does not exist");
  return load_checkpoint(path);
}

}  // namespace

void validate_config(const Config& cfg) {
  try {
    for (const char* section : {"pretrain_data", "finetune_data", "val_data"}) dataset_spec(cfg, section);
    model_config(cfg, Head::Segmenter);
    noise_spec(cfg);
    inference_protocol(cfg);
    denoise_stage(cfg);
    denoise_needs_encoder(cfg);
    cfg.get_choice("finetune.init", {"none", "encoder", "ddep", "dep"});
    for (const char* section : {"encoder", "denoise"}) {
      epoch_steps(cfg, section, 1);
      train_settings(cfg, section, 1);
    }
    train_settings(cfg, "finetune", cfg.get_int("finetune.steps"));
    if (cfg.get_int("finetune.eval_every") <= 0) fail(ErrorKind::InvalidConfig, "key 'finetune.eval_every': must be positive");
    if (cfg.get_int("eval.batch_size") <= 0) fail(ErrorKind::InvalidConfig, "key 'eval.batch_size': must be positive");
    const double f = cfg.get_double("finetune.label_fraction");
    if (!(f > 0.0 && f <= 1.0)) fail(ErrorKind::InvalidConfig, "key 'finetune.label_fraction': must be in (0, 1]");
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidConfig) throw;
    fail(ErrorKind::InvalidConfig, e.what());
  }
}

StageOutput pretrain_encoder(const Config& cfg, const ProgressFn& progress) {
  const ModelConfig mc = model_config(cfg, Head::Classifier);
  std::vector<Sample> samples = load_dataset(cfg, "pretrain_data");
  for (const Sample& s : samples) {
    require(s.class_label >= 0 && s.class_label < mc.num_classes, ErrorKind::InvalidData,
            "encoder pretraining needs class labels in [0, " + std::to_string(mc.num_classes) + "), found " +
                std::to_string(s.class_label));
  }
  const NormStats norm = compute_norm_stats(samples);
  const Prepared data = prepare(std::move(samples), norm);
  const std::int64_t per_epoch = epoch_steps(cfg, "encoder", data.images.size());
  const int epochs = static_cast<int>(cfg.get_int("encoder.epochs"));
  const TrainSettings s = train_settings(cfg, "encoder", per_epoch * epochs);

  Model model = build_model(mc, s.seed);
  model.params().erase_prefix("decoder.");
  std::vector<int> pool(data.images.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
  IndexStream stream(pool, Rng(s.seed).split("order"));
  const Rng augment_rng = Rng(s.seed).split("augment");

  StageOutput out;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    double loss_sum = 0.0;
    std::int64_t correct = 0, seen = 0;
    for (std::int64_t k = 0; k < per_epoch; ++k, ++step) {
      const Batch b = make_batch(data, stream.next(s.batch_size), augment_rng.split(static_cast<std::uint64_t>(step)), s.crop_size);
      Tensor logits;
      loss_sum += train_step(model, s, step, out.log, [&](ad::Tape& tape) {
        const ad::Var y = forward(model, tape, tape.constant(b.images));
        logits = y.value();
        return ad::softmax_cross_entropy(y, b.classes);
      });
      const int classes = logits.dim(1);
      for (int n = 0; n < logits.dim(0); ++n) {
        const float* row = logits.ptr() + static_cast<std::size_t>(n) * classes;
        correct += (std::max_element(row, row + classes) - row) == b.classes[static_cast<std::size_t>(n)];
        ++seen;
      }
    }
    const double loss = loss_sum / static_cast<double>(per_epoch);
    const double acc = static_cast<double>(correct) / static_cast<double>(seen);
    out.log.metrics.push_back({epoch, "train_loss", loss});
    out.log.metrics.push_back({epoch, "train_accuracy", acc});
    report(progress, "encoder epoch " + std::to_string(epoch) + "/" + std::to_string(epochs) + " loss " + fmt_metric(loss) +
                         " accuracy " + fmt_metric(acc));
  }
  out.checkpoint = make_checkpoint(Stage::EncoderSupervised, model, cfg, s.seed, step,
                                   stage_hash(cfg, Stage::EncoderSupervised, ""), norm, {"encoder.", "head.classifier."});
  return out;
}

StageOutput pretrain_denoise(const Config& cfg, const ProgressFn& progress) {
  const Stage stage = denoise_stage(cfg);
  const NoiseSpec spec = noise_spec(cfg);
  const ModelConfig mc = model_config(cfg, Head::Denoiser);
  std::vector<Sample> samples = load_dataset(cfg, "pretrain_data");
  const NormStats norm = compute_norm_stats(samples);
  const Prepared data = prepare(std::move(samples), norm);
  const std::int64_t per_epoch = epoch_steps(cfg, "denoise", data.images.size());
  const int epochs = static_cast<int>(cfg.get_int("denoise.epochs"));
  const TrainSettings s = train_settings(cfg, "denoise", per_epoch * epochs);

  StageOutput out;
  if (spec.degenerate()) {
    out.warnings.push_back("degenerate noise (" + spec.describe() + "): the corrupted input equals the clean input");
    report(progress, "warning: " + out.warnings.back());
  }

  Model model = build_model(mc, s.seed);
  std::string upstream;
  if (denoise_needs_encoder(cfg)) {
    const Checkpoint enc = load_input(cfg, "denoise.init_from", to_string(stage) + " pretraining");
    check_compatible(mc, enc.model, true, cfg.get("denoise.init_from"));
    copy_prefix(model.params(), enc.params, "encoder.", cfg.get("denoise.init_from"));
    upstream = enc.config_hash;
  }
  std::string encoder_in;
  if (stage == Stage::DDeP) {
    set_trainable(model, TrainScope::DecoderAndHeadOnly);
    encoder_in = model.params().checksum("encoder.");
  }

  std::vector<int> pool(data.images.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
  IndexStream stream(pool, Rng(s.seed).split("order"));
  const Rng augment_rng = Rng(s.seed).split("augment");
  const Rng noise_rng = Rng(s.seed).split("noise");

  std::int64_t step = 0;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::int64_t k = 0; k < per_epoch; ++k, ++step) {
      const Batch b = make_batch(data, stream.next(s.batch_size), augment_rng.split(static_cast<std::uint64_t>(step)), s.crop_size);
      Rng rng = noise_rng.split(static_cast<std::uint64_t>(step));
      const CorruptionSample noisy = corrupt(b.images, spec, rng);
      const Tensor& target = denoise_target(b.images, noisy, spec);
      loss_sum += train_step(model, s, step, out.log, [&](ad::Tape& tape) {
        return ad::mean_squared_error(forward(model, tape, tape.constant(noisy.noisy)), target);
      });
    }
    if (stage == Stage::DDeP && model.params().checksum("encoder.") != encoder_in) {
      fail(ErrorKind::ContractViolation, "encoder parameters changed during decoder denoising pretraining");
    }
    const double loss = loss_sum / static_cast<double>(per_epoch);
    out.log.metrics.push_back({epoch, "denoise_loss", loss});
    report(progress, to_string(stage) + " epoch " + std::to_string(epoch) + "/" + std::to_string(epochs) + " loss " +
                         fmt_metric(loss));
  }
  out.checkpoint = make_checkpoint(stage, model, cfg, s.seed, step, stage_hash(cfg, stage, upstream), norm, {});
  return out;
}

StageOutput finetune(const Config& cfg, const ProgressFn& progress) {
  const std::string& init = cfg.get_choice("finetune.init", {"none", "encoder", "ddep", "dep"});
  const ModelConfig mc = model_config(cfg, Head::Segmenter);
  const double fraction = cfg.get_double("finetune.label_fraction");
  const std::int64_t total = cfg.get_int("finetune.steps");
  const std::int64_t eval_every = cfg.get_int("finetune.eval_every");
  if (total <= 0) fail(ErrorKind::InvalidConfig, "key 'finetune.steps': must be positive");
  if (eval_every <= 0) fail(ErrorKind::InvalidConfig, "key 'finetune.eval_every': must be positive");
  const TrainSettings s = train_settings(cfg, "finetune", total);
  const InferenceProtocol protocol = inference_protocol(cfg);
  const int eval_batch = static_cast<int>(cfg.get_int("eval.batch_size"));

  Model model = build_model(mc, s.seed);
  std::string upstream;
  if (init != "none") {
    const std::string& path = cfg.get("finetune.init_from");
    const Checkpoint in = load_input(cfg, "finetune.init_from", "finetune.init = " + init);
    if (init == "encoder") {
      check_compatible(mc, in.model, true, path);
      copy_prefix(model.params(), in.params, "encoder.", path);
    } else {
      const Stage want = init == "ddep" ? Stage::DDeP : Stage::DeP;
      require(in.stage == want, ErrorKind::ConfigMismatch,
              path + ": finetune.init = " + init + " but the checkpoint comes from stage " + to_string(in.stage));
      check_compatible(mc, in.model, false, path);
      copy_prefix(model.params(), in.params, "encoder.", path);
      copy_prefix(model.params(), in.params, "decoder.", path);
    }
    upstream = in.config_hash;
  }
  set_trainable(model, TrainScope::All);

  std::vector<Sample> pool_samples = load_dataset(cfg, "finetune_data");
  const NormStats norm = compute_norm_stats(pool_samples);
  const int pool_size = static_cast<int>(pool_samples.size());
  const Prepared data = prepare(std::move(pool_samples), norm);
  const Prepared val = prepare(load_dataset(cfg, "val_data"), norm);
  const std::vector<int> subset = subset_labels(pool_size, fraction, Rng(s.seed).split("subset").next_u64());
  IndexStream stream(subset, Rng(s.seed).split("order"));
  const Rng augment_rng = Rng(s.seed).split("augment");

  StageOutput out;
  ParamSet best_params = model.params();
  std::int64_t best_step = 0;
  double loss_sum = 0.0;
  int round = 0, in_round = 0;
  for (std::int64_t step = 0; step < total; ++step) {
    const Batch b = make_batch(data, stream.next(s.batch_size), augment_rng.split(static_cast<std::uint64_t>(step)), s.crop_size);
    loss_sum += train_step(model, s, step, out.log, [&](ad::Tape& tape) {
      return ad::softmax_cross_entropy(forward(model, tape, tape.constant(b.images)), b.pixels, kIgnoreLabel);
    });
    ++in_round;
    if ((step + 1) % eval_every != 0 && step + 1 != total) continue;
    ++round;
    const EvalReport r = evaluate(model, val.images, val.masks, protocol, eval_batch);
    out.log.metrics.push_back({round, "train_loss", loss_sum / in_round});
    out.log.metrics.push_back({round, "val_miou", r.miou});
    report(progress, "finetune step " + std::to_string(step + 1) + "/" + std::to_string(total) + " loss " +
                         fmt_metric(loss_sum / in_round) + " val mIoU " + fmt_metric(r.miou));
    loss_sum = 0.0;
    in_round = 0;
    if (!out.report || r.miou > out.report->miou) {
      out.report = r;
      best_params = model.params();
      best_step = step + 1;
    }
    out.final_report = r;
  }
  Model best(mc, std::move(best_params));
  out.checkpoint = make_checkpoint(Stage::FineTune, best, cfg, s.seed, best_step, stage_hash(cfg, Stage::FineTune, upstream),
                                   norm, {});
  return out;
}

}  // namespace ddep
