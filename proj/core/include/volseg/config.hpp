#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "volseg/common.hpp"

namespace volseg {

// Flat text configuration: one `key = value` per line, `#` starts a comment,
// blank lines ignored.  Every key must be consumed through a typed getter;
// finish() rejects unknown keys so typos fail loudly instead of silently
// using defaults.

namespace detail {

inline std::string strip(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline int64_t parse_int(const std::string& raw, const std::string& key) {
    size_t pos = 0;
    int64_t v = 0;
    try {
        v = std::stoll(raw, &pos);
    } catch (const std::exception&) {
        pos = std::string::npos;
    }
    check<ConfigError>(pos == raw.size() && pos != 0,
                       "config: key '" + key + "' expects an integer, got '" + raw + "'");
    return v;
}

inline double parse_double(const std::string& raw, const std::string& key) {
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(raw, &pos);
    } catch (const std::exception&) {
        pos = std::string::npos;
    }
    check<ConfigError>(pos == raw.size() && pos != 0,
                       "config: key '" + key + "' expects a number, got '" + raw + "'");
    return v;
}

inline bool parse_bool(const std::string& raw, const std::string& key) {
    if (raw == "true" || raw == "1") return true;
    if (raw == "false" || raw == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" + raw + "'");
}

} // namespace detail

class Config {
  public:
    Config() = default;

    static Config from_text(const std::string& text, const std::string& origin = "<text>") {
        Config cfg;
        cfg.origin_ = origin;
        std::istringstream is(text);
        std::string line;
        size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = detail::strip(line);
            if (line.empty()) continue;
            const size_t eq = line.find('=');
            check<ConfigError>(eq != std::string::npos, "config: line " + std::to_string(lineno) +
                                                            " of " + origin + " has no '='");
            std::string key = detail::strip(line.substr(0, eq));
            std::string value = detail::strip(line.substr(eq + 1));
            check<ConfigError>(!key.empty(),
                               "config: empty key on line " + std::to_string(lineno) + " of " + origin);
            check<ConfigError>(!cfg.kv_.count(key),
                               "config: duplicate key '" + key + "' in " + origin);
            cfg.kv_[key] = value;
        }
        return cfg;
    }

    static Config from_file(const std::string& path) {
        std::ifstream is(path);
        check<ConfigError>(static_cast<bool>(is), "config: cannot open " + path);
        std::ostringstream buf;
        buf << is.rdbuf();
        return from_text(buf.str(), path);
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& def) const {
        auto it = kv_.find(key);
        used_.insert(key);
        return it == kv_.end() ? def : it->second;
    }

    /// Required string: missing key is an error.
    std::string require_str(const std::string& key) const {
        auto it = kv_.find(key);
        check<ConfigError>(it != kv_.end(), "config: missing required key '" + key + "'");
        used_.insert(key);
        return it->second;
    }

    int64_t get_int(const std::string& key, int64_t def) const {
        auto it = kv_.find(key);
        used_.insert(key);
        return it == kv_.end() ? def : detail::parse_int(it->second, key);
    }

    double get_double(const std::string& key, double def) const {
        auto it = kv_.find(key);
        used_.insert(key);
        return it == kv_.end() ? def : detail::parse_double(it->second, key);
    }

    bool get_bool(const std::string& key, bool def) const {
        auto it = kv_.find(key);
        used_.insert(key);
        return it == kv_.end() ? def : detail::parse_bool(it->second, key);
    }

    std::vector<int64_t> get_int_list(const std::string& key, std::vector<int64_t> def) const {
        auto it = kv_.find(key);
        used_.insert(key);
        if (it == kv_.end()) return def;
        std::vector<int64_t> out;
        for (const std::string& item : split_list(it->second, key))
            out.push_back(detail::parse_int(item, key));
        return out;
    }

    std::vector<double> get_double_list(const std::string& key, std::vector<double> def) const {
        auto it = kv_.find(key);
        used_.insert(key);
        if (it == kv_.end()) return def;
        std::vector<double> out;
        for (const std::string& item : split_list(it->second, key))
            out.push_back(detail::parse_double(item, key));
        return out;
    }

    /// Rejects keys that no getter ever consumed (typo protection).
    void finish() const {
        std::string unknown;
        for (const auto& [k, v] : kv_)
            if (!used_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
        check<ConfigError>(unknown.empty(), "config: unknown key(s) in " + origin_ + ": " + unknown);
    }

  private:
    static std::vector<std::string> split_list(const std::string& raw, const std::string& key) {
        std::vector<std::string> items;
        std::string cur;
        std::istringstream is(raw);
        while (std::getline(is, cur, ',')) {
            cur = detail::strip(cur);
            check<ConfigError>(!cur.empty(), "config: key '" + key + "' has an empty list element");
            items.push_back(cur);
        }
        check<ConfigError>(!items.empty(), "config: key '" + key + "' has an empty list");
        return items;
    }

    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> used_;
    std::string origin_ = "<empty>";
};

} // namespace volseg
