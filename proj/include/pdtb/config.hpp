#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace pdtb {

// Bad keys, values, or flags; the CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Referenced datasets/checkpoints that do not exist; exit code 3.
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat "key = value" text config with '#' comments and an "include <path>"
// directive (relative to the including file). Later assignments win, so CLI
// overrides are plain set() calls on top.
class Config {
 public:
  Config() = default;

  static Config from_file(const std::filesystem::path& path);
  void merge_file(const std::filesystem::path& path);
  void merge_text(const std::string& text, const std::filesystem::path& base_dir);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

  // FNV-1a over the sorted canonical "key=value" lines.
  uint64_t hash() const;
  std::string hash_hex() const;

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace pdtb
