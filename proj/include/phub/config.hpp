#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace phub {

/// Plain-text `key = value` configuration with optional `[section]` headers.
/// Keys before any header land in section "". `#` and `;` start comments.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::string& path);

  bool has_section(const std::string& section) const { return sections_.contains(section); }
  std::optional<std::string> get(const std::string& section, const std::string& key) const;

  std::string get_or(const std::string& section, const std::string& key, const std::string& fallback) const;
  std::uint64_t get_uint(const std::string& section, const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  void set(const std::string& section, const std::string& key, const std::string& value);
  std::vector<std::string> keys(const std::string& section) const;

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

std::vector<std::string> split_list(std::string_view text, char sep = ',');

}  // namespace phub
