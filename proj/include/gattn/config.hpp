#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gattn/common.hpp"

namespace gattn {

/// Minimal TOML-style configuration: [section] headers, key = value lines,
/// '#' comments. Values are scalars or comma-separated lists; quotes around
/// strings are optional. Serialization is deterministic (sorted sections and
/// keys) so snapshots are reproducible byte-for-byte.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::string& origin = "<string>") {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty())
          throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
        c.sections_[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      std::string value = unquote(trim(line.substr(eq + 1)));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (section.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": key '" + key +
                          "' outside any [section]");
      c.sections_[section][key] = value;
    }
    return c;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path);
  }

  /// Applies a "section.key=value" override.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
    const std::string dotted = trim(assignment.substr(0, eq));
    const std::string value = unquote(trim(assignment.substr(eq + 1)));
    const auto dot = dotted.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == dotted.size())
      throw ConfigError("override key '" + dotted + "' is not of the form section.key");
    sections_[dotted.substr(0, dot)][dotted.substr(dot + 1)] = value;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = value;
  }

  bool has(const std::string& section, const std::string& key) const {
    const auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
  }

  std::string get_str(const std::string& section, const std::string& key,
                      const std::string& fallback) const {
    const auto s = sections_.find(section);
    if (s == sections_.end()) return fallback;
    const auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
  }

  std::string require_str(const std::string& section, const std::string& key) const {
    if (!has(section, key)) throw ConfigError("missing required key " + section + "." + key);
    return sections_.at(section).at(key);
  }

  std::int64_t get_int(const std::string& section, const std::string& key,
                       std::int64_t fallback) const {
    if (!has(section, key)) return fallback;
    return to_int(section, key, sections_.at(section).at(key));
  }

  std::uint64_t get_u64(const std::string& section, const std::string& key,
                        std::uint64_t fallback) const {
    if (!has(section, key)) return fallback;
    const std::string& v = sections_.at(section).at(key);
    try {
      std::size_t pos = 0;
      const std::uint64_t r = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return r;
    } catch (const std::exception&) {
      throw ConfigError("key " + section + "." + key + " = '" + v + "' is not an unsigned integer");
    }
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    const std::string& v = sections_.at(section).at(key);
    try {
      std::size_t pos = 0;
      const double r = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return r;
    } catch (const std::exception&) {
      throw ConfigError("key " + section + "." + key + " = '" + v + "' is not a number");
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string& v = sections_.at(section).at(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key " + section + "." + key + " = '" + v + "' is not a boolean");
  }

  std::vector<std::int64_t> get_int_list(const std::string& section, const std::string& key,
                                         std::vector<std::int64_t> fallback) const {
    if (!has(section, key)) return fallback;
    const std::string& v = sections_.at(section).at(key);
    std::vector<std::int64_t> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      out.push_back(to_int(section, key, item));
    }
    return out;
  }

  /// Rejects keys outside the allowed schema; reports the offending key.
  void check_known(const std::map<std::string, std::set<std::string>>& allowed) const {
    for (const auto& [sec, kv] : sections_) {
      const auto a = allowed.find(sec);
      if (a == allowed.end()) throw ConfigError("unknown config section [" + sec + "]");
      for (const auto& [key, value] : kv) {
        (void)value;
        if (!a->second.count(key)) throw ConfigError("unknown config key " + sec + "." + key);
      }
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    bool first = true;
    for (const auto& [sec, kv] : sections_) {
      if (!first) os << '\n';
      first = false;
      os << '[' << sec << "]\n";
      for (const auto& [key, value] : kv) os << key << " = " << value << '\n';
    }
    return os.str();
  }

  const std::map<std::string, std::map<std::string, std::string>>& sections() const {
    return sections_;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::string unquote(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\'')))
      return s.substr(1, s.size() - 2);
    return s;
  }

  static std::int64_t to_int(const std::string& section, const std::string& key,
                             const std::string& v) {
    try {
      std::size_t pos = 0;
      const std::int64_t r = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return r;
    } catch (const std::exception&) {
      throw ConfigError("key " + section + "." + key + " = '" + v + "' is not an integer");
    }
  }

  std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace gattn
