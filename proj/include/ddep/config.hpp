#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace ddep {

/// Flat `section.key = value` configuration. Lines starting with `#` are
/// comments. Every key must be one of the schema keys (see `defaults()`),
/// except `sweep.axis.<key>` which names a sweepable schema key and holds a
/// comma-separated list of values. All errors are InvalidConfig naming the
/// offending key.
class Config {
 public:
  /// The schema: every recognized key with its default value.
  static const Config& defaults();
  static bool is_known_key(std::string_view key);

  /// Defaults overlaid with `text`.
  static Config parse(std::string_view text, const std::string& origin = "<config>");
  static Config load(const std::string& path);
  /// Lenient line parser with no schema check, for embedded blobs.
  static std::map<std::string, std::string> parse_raw(std::string_view text, const std::string& origin);

  void set(const std::string& key, const std::string& value);
  /// `key=value`.
  void apply_override(const std::string& assignment);
  void erase_axes();

  bool has(const std::string& key) const { return values_.contains(key); }
  const std::string& get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_ints(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  /// Checks `key` holds one of `choices`.
  const std::string& get_choice(const std::string& key, const std::vector<std::string>& choices) const;

  /// Sweep axes in key order: swept key -> values.
  std::map<std::string, std::vector<std::string>> axes() const;

  /// Canonical `key = value` lines, sorted by key, restricted to keys that
  /// start with any of `prefixes` (all keys when empty) minus `excluded`.
  std::string text(const std::vector<std::string>& prefixes = {},
                   const std::vector<std::string>& excluded = {}) const;
  std::string hash(const std::vector<std::string>& prefixes = {}, const std::vector<std::string>& excluded = {}) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::vector<std::string> split_list(std::string_view text);
std::string trim(std::string_view text);

}  // namespace ddep
