#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "rcp/error.hpp"

namespace rcp {

// Flat `key = value` configuration with dotted section prefixes and '#'
// comments. Every key present in the file must be consumed by the reader;
// leftovers are reported as errors so typos cannot pass silently.
class KvConfig {
public:
    static KvConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw InputError("config: cannot open " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        return from_string(ss.str(), path);
    }

    static KvConfig from_string(const std::string& text, const std::string& origin = "<string>") {
        KvConfig cfg;
        cfg.origin_ = origin;
        std::istringstream is(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const std::size_t eq = trimmed.find('=');
            if (eq == std::string::npos) {
                throw InputError(origin + ":" + std::to_string(lineno) +
                                 ": expected `key = value`");
            }
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty()) {
                throw InputError(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            if (cfg.values_.count(key)) {
                throw InputError(origin + ": duplicate key `" + key + "`");
            }
            cfg.values_[key] = value;
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        return it->second;
    }

    double get_double(const std::string& key, double fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw InputError(origin_ + ": key `" + key + "`: not a number: " + it->second);
        }
    }

    long get_int(const std::string& key, long fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        try {
            std::size_t pos = 0;
            const long v = std::stol(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw InputError(origin_ + ": key `" + key + "`: not an integer: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw InputError(origin_ + ": key `" + key + "`: expected true/false: " + it->second);
    }

    // Comma-separated integer list.
    std::vector<long> get_int_list(const std::string& key, std::vector<long> fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        std::vector<long> out;
        std::istringstream is(it->second);
        std::string item;
        while (std::getline(is, item, ',')) {
            const std::string t = trim(item);
            if (t.empty()) continue;
            try {
                out.push_back(std::stol(t));
            } catch (const std::exception&) {
                throw InputError(origin_ + ": key `" + key + "`: bad integer list");
            }
        }
        return out;
    }

    // Throws if any key in the file was never read.
    void ensure_all_consumed() const {
        std::string unknown;
        for (const auto& [k, v] : values_) {
            if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
        }
        if (!unknown.empty()) {
            throw InputError(origin_ + ": unknown config keys: " + unknown);
        }
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        std::size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::string origin_;
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

}  // namespace rcp
