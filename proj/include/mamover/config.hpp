#pragma once

// Flat `key = value` configuration files. `#` starts a comment; blank lines
// are ignored. Every key read must be declared, and unknown keys are errors.

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "mamover/common.hpp"

namespace mamover {

class Config {
 public:
  static Config parse(std::istream& is, const std::string& source = "<config>") {
    Config c;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      auto text = trim(line);
      if (text.empty()) continue;
      auto eq = text.find('=');
      if (eq == std::string_view::npos)
        throw Error(source + ":" + std::to_string(lineno) + ": expected `key = value`");
      auto key = std::string(trim(text.substr(0, eq)));
      auto value = std::string(trim(text.substr(eq + 1)));
      if (key.empty()) throw Error(source + ":" + std::to_string(lineno) + ": empty key");
      if (c.values_.count(key)) throw Error(source + ":" + std::to_string(lineno) + ": duplicate key `" + key + "`");
      c.values_[key] = value;
    }
    return c;
  }

  static Config parse_string(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }

  static Config load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config: " + path);
    return parse(is, path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  /// Reject keys outside `known`, naming the first offender.
  void check_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k)) throw Error("unknown config key: " + k);
  }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : to_number<double>(key, it->second);
  }

  long long get(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : to_number<long long>(key, it->second);
  }

  int get(const std::string& key, int fallback) const {
    return static_cast<int>(get(key, static_cast<long long>(fallback)));
  }

  bool get(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw Error("config key `" + key + "`: expected true/false, got `" + it->second + "`");
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string_view trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  template <class T>
  static T to_number(const std::string& key, const std::string& s) {
    T v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw Error("config key `" + key + "`: not a number: `" + s + "`");
    return v;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace mamover
