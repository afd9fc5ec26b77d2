// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/config.h"

#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>

namespace taper {

std::string_view trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return text.substr(first, last - first + 1);
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) pos = text.size();
    auto piece = trim(text.substr(start, pos - start));
    if (!piece.empty()) out.emplace_back(piece);
    start = pos + 1;
  }
  return out;
}

double parse_double(std::string_view text, std::string_view what) {
  text = trim(text);
  double value = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("invalid number for " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

std::int64_t parse_int(std::string_view text, std::string_view what) {
  text = trim(text);
  std::int64_t value = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("invalid integer for " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

KeyValueConfig KeyValueConfig::parse(std::istream& in, std::string_view origin) {
  KeyValueConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    auto key = trim(body.substr(0, eq));
    if (key.empty()) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
    }
    cfg.set(std::string(key), std::string(trim(body.substr(eq + 1))));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse(in, path);
}

bool KeyValueConfig::has(std::string_view key) const { return entries_.find(key) != entries_.end(); }

void KeyValueConfig::set(std::string key, std::string value) { entries_[std::move(key)] = std::move(value); }

std::optional<std::string> KeyValueConfig::find(std::string_view key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::get_string(std::string_view key, std::string fallback) const {
  auto v = find(key);
  return v ? *v : std::move(fallback);
}

double KeyValueConfig::get_double(std::string_view key, double fallback) const {
  auto v = find(key);
  return v ? parse_double(*v, key) : fallback;
}

std::int64_t KeyValueConfig::get_int(std::string_view key, std::int64_t fallback) const {
  auto v = find(key);
  return v ? parse_int(*v, key) : fallback;
}

std::vector<std::string> KeyValueConfig::get_list(std::string_view key) const {
  auto v = find(key);
  if (!v) return {};
  return split(*v, ',');
}

}  // namespace taper
