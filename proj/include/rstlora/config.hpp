#pragma once

// Sectioned key = value configuration (TOML-flavoured INI). Values may be
// quoted strings, bare scalars, or bracketed lists: rank = 8,
// variant = "p_w", seeds = [1, 2, 3]. Comments start with '#' or ';'.

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "rstlora/errors.hpp"

namespace rstlora {

class Settings {
 public:
  Settings() = default;

  static Settings parse(std::istream& in, const std::string& source = "<config>") {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(source + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    Settings s;
    for (const auto& [section, body] : tree) {
      if (body.empty()) {
        s.set(section, body.data());
        continue;
      }
      for (const auto& [key, value] : body) s.set(section + "." + key, value.data());
    }
    return s;
  }

  static Settings load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  static Settings from_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  /// "section.key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  }

  void set(const std::string& key, const std::string& raw) { values_[key] = unquote(trim(strip_comment(raw))); }
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) {
      used(key);
      return fallback;
    }
    return to_double(key, get_string(key, std::string()));
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    if (!has(key)) {
      used(key);
      return fallback;
    }
    return to_size(key, get_string(key, std::string()));
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) {
      used(key);
      return fallback;
    }
    return to_size(key, get_string(key, std::string()));
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) {
      used(key);
      return fallback;
    }
    const auto v = get_string(key, std::string());
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
  }

  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const {
    if (!has(key)) {
      used(key);
      return fallback;
    }
    std::string v = get_string(key, std::string());
    if (!v.empty() && v.front() == '[') {
      if (v.back() != ']') throw ConfigError(key + ": unterminated list");
      v = v.substr(1, v.size() - 2);
    }
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
      item = unquote(trim(item));
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const {
    if (!has(key)) {
      used(key);
      return fallback;
    }
    std::vector<double> out;
    for (const auto& s : get_list(key, {})) out.push_back(to_double(key, s));
    return out;
  }

  std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) const {
    if (!has(key)) {
      used(key);
      return fallback;
    }
    std::vector<std::size_t> out;
    for (const auto& s : get_list(key, {})) out.push_back(to_size(key, s));
    return out;
  }

  /// Keys present in the file that no reader asked for.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  void reject_unknown() const {
    const auto extra = unused_keys();
    if (extra.empty()) return;
    std::string msg = "unknown config key(s):";
    for (const auto& k : extra) msg += " " + k;
    throw ConfigError(msg);
  }

 private:
  void used(const std::string& key) const { used_.insert(key); }

  // Drops a trailing "# ..." that is outside quotes and follows whitespace.
  static std::string strip_comment(const std::string& s) {
    char quote = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const char c = s[i];
      if (quote) {
        if (c == quote) quote = 0;
      } else if (c == '"' || c == '\'') {
        quote = c;
      } else if ((c == '#' || c == ';') && (i == 0 || s[i - 1] == ' ' || s[i - 1] == '\t')) {
        return s.substr(0, i);
      }
    }
    return s;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::string unquote(const std::string& s) {
    if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) return s.substr(1, s.size() - 2);
    return s;
  }

  static double to_double(const std::string& key, const std::string& v) {
    double out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
  }

  static std::uint64_t to_size(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
      throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace rstlora
