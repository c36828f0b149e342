#pragma once

// key=value text configuration: parsing, typed field conversion and
// formatting that round-trips doubles exactly.

#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "bridge/errors.hpp"

namespace bridge {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

// One `key = value` per line; blank lines and lines starting with '#' are ignored.
inline KeyValues parse_key_values(std::istream& in, const std::string& source = "<config>") {
  KeyValues out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw ParseError(source, line_no, "expected key = value");
    const auto key = trim(t.substr(0, eq));
    if (key.empty()) throw ParseError(source, line_no, "empty key");
    out.emplace_back(std::string(key), std::string(trim(t.substr(eq + 1))));
  }
  return out;
}

inline KeyValues parse_key_values(const std::string& text, const std::string& source = "<config>") {
  std::istringstream in(text);
  return parse_key_values(in, source);
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

// "key=value" as given on the command line.
inline std::pair<std::string, std::string> split_assignment(std::string_view s) {
  const auto eq = s.find('=');
  if (eq == std::string_view::npos || trim(s.substr(0, eq)).empty())
    throw ConfigError("expected key=value, got '" + std::string(s) + "'");
  return {std::string(trim(s.substr(0, eq))), std::string(trim(s.substr(eq + 1)))};
}

namespace kv {

inline std::string format(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
inline std::string format(std::uint64_t v) { return std::to_string(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(const std::string& v) { return v; }

inline void parse(const std::string& key, const std::string& text, double& out) {
  auto res = std::from_chars(text.data(), text.data() + text.size(), out);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ConfigError(key + ": expected a number, got '" + text + "'");
}
inline void parse(const std::string& key, const std::string& text, std::uint64_t& out) {
  auto res = std::from_chars(text.data(), text.data() + text.size(), out);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
}
inline void parse(const std::string& key, const std::string& text, bool& out) {
  if (text == "true" || text == "1") out = true;
  else if (text == "false" || text == "0") out = false;
  else throw ConfigError(key + ": expected true or false, got '" + text + "'");
}
inline void parse(const std::string&, const std::string& text, std::string& out) { out = text; }

}  // namespace kv

// Applies `kv` through a visitor `visit(f)` that calls f(name, field&) for
// every known field. Unknown keys raise a ConfigError naming the key.
template <class Visit>
void apply_key_values(const KeyValues& kvs, Visit&& visit) {
  for (const auto& [key, value] : kvs) {
    bool found = false;
    visit([&](std::string_view name, auto& field) {
      if (name != key) return;
      kv::parse(key, value, field);
      found = true;
    });
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }
}

template <class Visit>
KeyValues collect_key_values(Visit&& visit) {
  KeyValues out;
  visit([&](std::string_view name, auto& field) { out.emplace_back(std::string(name), kv::format(field)); });
  return out;
}

}  // namespace bridge
