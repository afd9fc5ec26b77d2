// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace taper {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat `key = value` configuration. Lines starting with '#' are comments.
// Later assignments of the same key override earlier ones.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::istream& in, std::string_view origin = "<stream>");
  static KeyValueConfig load(const std::string& path);

  bool has(std::string_view key) const;
  void set(std::string key, std::string value);

  std::string get_string(std::string_view key, std::string fallback) const;
  double get_double(std::string_view key, double fallback) const;
  std::int64_t get_int(std::string_view key, std::int64_t fallback) const;

  std::optional<std::string> find(std::string_view key) const;
  // Comma-separated list; empty when the key is absent.
  std::vector<std::string> get_list(std::string_view key) const;

  const std::map<std::string, std::string, std::less<>>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string, std::less<>> entries_;
};

// Shared helpers for strict number parsing of config and CLI values.
double parse_double(std::string_view text, std::string_view what);
std::int64_t parse_int(std::string_view text, std::string_view what);
std::string_view trim(std::string_view text);
std::vector<std::string> split(std::string_view text, char sep);

}  // namespace taper
