#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "steadv/errors.hpp"

namespace steadv {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// "key = value" lines; '#' starts a comment; repeated keys accumulate in
// order (used for attack grid entries).
class ConfigFile {
 public:
  ConfigFile() = default;

  static ConfigFile parse_string(const std::string& text) {
    ConfigFile cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      std::size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
      std::string key = detail::trim(line.substr(0, eq));
      std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError("config: empty key on line " + std::to_string(lineno));
      cfg.entries_.push_back({key, value});
    }
    return cfg;
  }

  static ConfigFile parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_string(buf.str());
  }

  bool has(const std::string& key) const {
    for (const auto& e : entries_)
      if (e.first == key) return true;
    return false;
  }

  std::string get(const std::string& key) const {
    std::optional<std::string> last;
    for (const auto& e : entries_)
      if (e.first == key) last = e.second;
    if (!last) throw ConfigError("config: missing required key \"" + key + "\"");
    return *last;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }

  std::vector<std::string> get_all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (e.first == key) out.push_back(e.second);
    return out;
  }

  int get_int(const std::string& key, int fallback) const {
    if (!has(key)) return fallback;
    try {
      return std::stoi(get(key));
    } catch (const std::exception&) {
      throw ConfigError("config: key \"" + key + "\" is not an integer: " + get(key));
    }
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    try {
      return parse_fraction(get(key));
    } catch (const ConfigError&) {
      throw ConfigError("config: key \"" + key + "\" is not a number: " + get(key));
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    try {
      return std::stoull(get(key));
    } catch (const std::exception&) {
      throw ConfigError("config: key \"" + key + "\" is not an unsigned integer: " + get(key));
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    std::string v = get(key);
    if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "off" || v == "0" || v == "no") return false;
    throw ConfigError("config: key \"" + key + "\" is not a boolean: " + v);
  }

  // Accepts "0.5", "8/255", etc.
  static double parse_fraction(const std::string& s) {
    std::size_t slash = s.find('/');
    try {
      if (slash == std::string::npos) return std::stod(s);
      double num = std::stod(s.substr(0, slash));
      double den = std::stod(s.substr(slash + 1));
      if (den == 0) throw ConfigError("config: division by zero in \"" + s + "\"");
      return num / den;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config: cannot parse number \"" + s + "\"");
    }
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace steadv
