#pragma once

// Flat key = value configuration text. '#' starts a comment; blank lines are
// ignored; later assignments override earlier ones.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gridedit/core/error.hpp"

namespace gridedit {

using KvMap = std::map<std::string, std::string>;

namespace detail {
inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}
}  // namespace detail

inline KvMap parse_kv(const std::string& text, const std::string& source = "config") {
    KvMap out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
        out[key] = detail::trim(line.substr(eq + 1));
    }
    return out;
}

inline KvMap load_kv_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_kv(ss.str(), path.string());
}

inline std::string dump_kv(const KvMap& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

inline int kv_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int r     = std::stoi(v, &pos);
        if (pos == v.size()) return r;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
}

inline std::uint64_t kv_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const auto r    = std::stoull(v, &pos);
        if (pos == v.size() && v.find('-') == std::string::npos) return r;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
}

inline double kv_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double r  = std::stod(v, &pos);
        if (pos == v.size()) return r;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + v + "'");
}

inline bool kv_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<int> kv_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        if (!item.empty()) out.push_back(kv_int(key, item));
    }
    return out;
}

inline std::string int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace gridedit
