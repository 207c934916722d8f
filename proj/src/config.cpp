#include "ddep/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ddep/error.hpp"
#include "ddep/hash.hpp"

namespace ddep {

namespace {

constexpr std::string_view kAxisPrefix = "sweep.axis.";

// Desk-scale defaults. Every recognized key appears here.
constexpr const char* kDefaults = R"(
pretrain_data.num_samples = 2000
pretrain_data.seed = 101
pretrain_data.image_size = 64
pretrain_data.min_shapes = 1
pretrain_data.max_shapes = 3
pretrain_data.noise_free = false
pretrain_data.manifest =

finetune_data.num_samples = 1000
finetune_data.seed = 202
finetune_data.image_size = 64
finetune_data.min_shapes = 1
finetune_data.max_shapes = 3
finetune_data.noise_free = false
finetune_data.manifest =

val_data.num_samples = 200
val_data.seed = 303
val_data.image_size = 64
val_data.min_shapes = 1
val_data.max_shapes = 3
val_data.noise_free = false
val_data.manifest =

model.encoder_widths = 16,32,64,128
model.decoder_widths = 64,32,16,8
model.decoder_width_multiplier = 1
model.bottleneck_attention = false
model.num_classes = 5

encoder.epochs = 20
encoder.batch_size = 16
encoder.lr = 0.001
encoder.weight_decay = 0.0001
encoder.crop_size = 64
encoder.seed = 1

denoise.mode = ddep
denoise.dep_init = scratch
denoise.formulation = scaled
denoise.target = noise
denoise.magnitude = gamma:0.95
denoise.epochs = 30
denoise.batch_size = 16
denoise.lr = 0.001
denoise.weight_decay = 0.0001
denoise.crop_size = 64
denoise.seed = 1
denoise.init_from =

finetune.init = ddep
finetune.init_from =
finetune.label_fraction = 1.0
finetune.steps = 300
finetune.eval_every = 50
finetune.batch_size = 8
finetune.lr = 0.0003
finetune.weight_decay = 0.0001
finetune.crop_size = 64
finetune.seed = 1

eval.scales = 1.0
eval.flip = false
eval.patch_width = 0
eval.batch_size = 16

sweep.seeds = 1
sweep.cap = 200
)";

[[noreturn]] void config_error(const std::string& key, const std::string& what) {
  fail(ErrorKind::InvalidConfig, "key '" + key + "': " + what);
}

}  // namespace

std::string trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(first, last - first + 1));
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::size_t end = comma == std::string_view::npos ? text.size() : comma;
    std::string item = trim(text.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::map<std::string, std::string> Config::parse_raw(std::string_view text, const std::string& origin) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::InvalidConfig, origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + stripped + "'");
    }
    const std::string key = trim(std::string_view(stripped).substr(0, eq));
    if (key.empty()) fail(ErrorKind::InvalidConfig, origin + ":" + std::to_string(lineno) + ": empty key");
    out[key] = trim(std::string_view(stripped).substr(eq + 1));
  }
  return out;
}

const Config& Config::defaults() {
  static const Config cfg = [] {
    Config c;
    c.values_ = parse_raw(kDefaults, "<defaults>");
    return c;
  }();
  return cfg;
}

bool Config::is_known_key(std::string_view key) {
  const auto& d = defaults().values_;
  if (key.starts_with(kAxisPrefix)) {
    const std::string target(key.substr(kAxisPrefix.size()));
    return d.contains(target) && !target.starts_with("sweep.");
  }
  return d.contains(std::string(key));
}

Config Config::parse(std::string_view text, const std::string& origin) {
  Config c = defaults();
  for (const auto& [key, value] : parse_raw(text, origin)) c.set(key, value);
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::InvalidConfig, "cannot read config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void Config::set(const std::string& key, const std::string& value) {
  if (!is_known_key(key)) config_error(key, "unknown key");
  if (key.starts_with(kAxisPrefix) && split_list(value).empty()) config_error(key, "sweep axis needs at least one value");
  values_[key] = trim(value);
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) fail(ErrorKind::InvalidConfig, "override '" + assignment + "' is not key=value");
  set(trim(std::string_view(assignment).substr(0, eq)), trim(std::string_view(assignment).substr(eq + 1)));
}

void Config::erase_axes() {
  for (auto it = values_.begin(); it != values_.end();) {
    it = it->first.starts_with(kAxisPrefix) ? values_.erase(it) : std::next(it);
  }
}

const std::string& Config::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) config_error(key, "missing");
  return it->second;
}

long long Config::get_int(const std::string& key) const {
  const std::string& v = get(key);
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) config_error(key, "expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t Config::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    config_error(key, "expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

namespace {

bool parse_double(const std::string& v, double& out) {
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  return ec == std::errc() && ptr == v.data() + v.size() && std::isfinite(out);
}

}  // namespace

double Config::get_double(const std::string& key) const {
  const std::string& v = get(key);
  double out = 0.0;
  if (!parse_double(v, out)) config_error(key, "expected a finite number, got '" + v + "'");
  return out;
}

bool Config::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  config_error(key, "expected true or false, got '" + v + "'");
}

std::vector<int> Config::get_ints(const std::string& key) const {
  std::vector<int> out;
  for (const std::string& item : split_list(get(key))) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) config_error(key, "bad integer list entry '" + item + "'");
    out.push_back(v);
  }
  return out;
}

std::vector<double> Config::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const std::string& item : split_list(get(key))) {
    double v = 0.0;
    if (!parse_double(item, v)) config_error(key, "bad number list entry '" + item + "'");
    out.push_back(v);
  }
  return out;
}

const std::string& Config::get_choice(const std::string& key, const std::vector<std::string>& choices) const {
  const std::string& v = get(key);
  for (const std::string& c : choices) {
    if (v == c) return v;
  }
  std::string list;
  for (const std::string& c : choices) list += (list.empty() ? "" : "|") + c;
  config_error(key, "expected one of " + list + ", got '" + v + "'");
}

std::map<std::string, std::vector<std::string>> Config::axes() const {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [key, value] : values_) {
    if (key.starts_with(kAxisPrefix)) out[key.substr(kAxisPrefix.size())] = split_list(value);
  }
  return out;
}

std::string Config::text(const std::vector<std::string>& prefixes, const std::vector<std::string>& excluded) const {
  std::string out;
  for (const auto& [key, value] : values_) {
    bool selected = prefixes.empty();
    for (const std::string& p : prefixes) selected = selected || key.starts_with(p);
    for (const std::string& e : excluded) selected = selected && key != e;
    if (selected) out += key + " = " + value + "\n";
  }
  return out;
}

std::string Config::hash(const std::vector<std::string>& prefixes, const std::vector<std::string>& excluded) const {
  return sha256_hex(text(prefixes, excluded));
}

}  // namespace ddep
