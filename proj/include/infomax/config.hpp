#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace infomax::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}
}  // namespace detail

// Flat INI-style configuration: `key = value` lines under `[section]`
// headers, '#'/';' full-line comments, no duplicate keys. Parsing is strict;
// key validation against a per-command schema happens in require_known().
class IniConfig {
 public:
  static IniConfig parse_string(const std::string& text, const std::string& origin = "<string>") {
    IniConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto t = detail::trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      if (t.front() == '[') {
        if (t.back() != ']')
          throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
        section = detail::trim(t.substr(1, t.size() - 2));
        if (section.empty())
          throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
        cfg.data_[section];  // section may stay empty
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      if (section.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": key outside any [section]");
      const auto key = detail::trim(t.substr(0, eq));
      const auto value = detail::trim(t.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      auto& sec = cfg.data_[section];
      if (sec.count(key))
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key " + section +
                          "." + key);
      sec[key] = value;
    }
    return cfg;
  }

  static IniConfig parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_string(buf.str(), path.string());
  }

  // --set section.key=value
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must look like section.key=value: " + assignment);
    const auto dotted = detail::trim(assignment.substr(0, eq));
    const auto dot = dotted.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == dotted.size())
      throw ConfigError("override key must be section.key: " + dotted);
    data_[dotted.substr(0, dot)][dotted.substr(dot + 1)] = detail::trim(assignment.substr(eq + 1));
  }

  bool has(const std::string& section, const std::string& key) const {
    const auto s = data_.find(section);
    return s != data_.end() && s->second.count(key) > 0;
  }

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const {
    const auto s = data_.find(section);
    if (s == data_.end()) return fallback;
    const auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
  }

  std::int64_t get_int(const std::string& section, const std::string& key,
                       std::int64_t fallback) const {
    if (!has(section, key)) return fallback;
    const auto v = get_string(section, key, "");
    try {
      std::size_t used = 0;
      const auto parsed = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return parsed;
    } catch (const std::exception&) {
      throw ConfigError(section + "." + key + ": not an integer: " + v);
    }
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    const auto v = get_string(section, key, "");
    try {
      std::size_t used = 0;
      const auto parsed = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return parsed;
    } catch (const std::exception&) {
      throw ConfigError(section + "." + key + ": not a number: " + v);
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    auto v = get_string(section, key, "");
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(section + "." + key + ": not a boolean: " + v);
  }

  std::vector<std::string> get_list(const std::string& section, const std::string& key,
                                    const std::string& fallback) const {
    const auto raw = get_string(section, key, fallback);
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(raw);
    while (std::getline(is, item, ',')) {
      const auto t = detail::trim(item);
      if (!t.empty()) out.push_back(t);
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                      const std::string& fallback) const {
    std::vector<double> out;
    for (const auto& item : get_list(section, key, fallback)) {
      try {
        out.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw ConfigError(section + "." + key + ": not a number: " + item);
      }
    }
    return out;
  }

  std::vector<std::int64_t> get_int_list(const std::string& section, const std::string& key,
                                         const std::string& fallback) const {
    std::vector<std::int64_t> out;
    for (const auto& item : get_list(section, key, fallback)) {
      try {
        out.push_back(std::stoll(item));
      } catch (const std::exception&) {
        throw ConfigError(section + "." + key + ": not an integer: " + item);
      }
    }
    return out;
  }

  // Rejects any key the schema does not list; the error names the offender.
  void require_known(const std::map<std::string, std::set<std::string>>& schema) const {
    for (const auto& [section, entries] : data_) {
      const auto s = schema.find(section);
      if (s == schema.end()) throw ConfigError("unknown config section: [" + section + "]");
      for (const auto& [key, value] : entries) {
        (void)value;
        if (!s->second.count(key))
          throw ConfigError("unknown config key: " + section + "." + key);
      }
    }
  }

  const std::map<std::string, std::map<std::string, std::string>>& entries() const {
    return data_;
  }

 private:
  std::map<std::string, std::map<std::string, std::string>> data_;
};

}  // namespace infomax::config
