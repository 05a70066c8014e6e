#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bwcloud/error.hpp"

namespace bwcloud {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

inline double parse_double(std::string_view token, const std::string& context) {
  token = trim(token);
  double value = 0.0;
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc() || ptr != end) fail(ErrorKind::format, context + ": '" + std::string(token) + "' is not a number");
  return value;
}

inline long long parse_int(std::string_view token, const std::string& context) {
  token = trim(token);
  long long value = 0;
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc() || ptr != end) fail(ErrorKind::format, context + ": '" + std::string(token) + "' is not an integer");
  return value;
}

/// Line-oriented `key = value` text. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& origin) {
    KeyValues kv;
    std::size_t line_no = 0;
    for (const auto& raw : split(text, '\n')) {
      ++line_no;
      auto line = trim(raw);
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        fail(ErrorKind::format, origin + " line " + std::to_string(line_no) + ": expected key = value");
      std::string key(trim(line.substr(0, eq)));
      std::string value(trim(line.substr(eq + 1)));
      if (key.empty()) fail(ErrorKind::format, origin + " line " + std::to_string(line_no) + ": empty key");
      if (kv.values_.count(key)) fail(ErrorKind::format, origin + " line " + std::to_string(line_no) + ": duplicate key " + key);
      kv.values_[key] = value;
    }
    kv.origin_ = origin;
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::io, "cannot open " + path);
    std::stringstream buffer;
    buffer << is.rdbuf();
    return parse(buffer.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) fail(ErrorKind::config, origin_ + ": missing key " + key);
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const { return has(key) ? get(key) : fallback; }
  double number(const std::string& key) const { return parse_double(get(key), origin_ + " key " + key); }
  long long integer(const std::string& key) const { return parse_int(get(key), origin_ + " key " + key); }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
};

}  // namespace bwcloud
