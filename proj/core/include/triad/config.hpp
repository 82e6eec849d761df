#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace triad::config {

// Flat key = value configuration with string storage and typed access.
// Values set later win, so defaults < file < command-line flags.
class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_double(const std::string& key, double value);
  void set_uint(const std::string& key, std::uint64_t value);
  void merge(const KeyValueConfig& other);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Sorted "key = value" lines; the provenance echo every command prints.
  std::string render() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace triad::config
