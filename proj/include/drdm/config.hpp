#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "drdm/error.hpp"

namespace drdm {

/// Plain-text `key = value` file. `#` starts a comment; blank lines ignored.
class KeyValues {
public:
    static KeyValues parse(const std::string& text, const std::string& source = "<string>") {
        KeyValues kv;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        std::vector<std::string> problems;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                problems.push_back(source + ":" + std::to_string(lineno) + ": expected key = value");
                continue;
            }
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (key.empty()) {
                problems.push_back(source + ":" + std::to_string(lineno) + ": empty key");
                continue;
            }
            if (kv.values_.count(key)) problems.push_back(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            kv.values_[key] = value;
            kv.order_.push_back(key);
        }
        if (!problems.empty()) throw ConfigError(join(problems, "; "));
        return kv;
    }

    static KeyValues load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path.string());
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::map<std::string, std::string>& entries() const { return values_; }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) order_.push_back(key);
        values_[key] = value;
    }

    /// Keys not in `known`, in file order.
    std::vector<std::string> unknown_keys(const std::set<std::string>& known) const {
        std::vector<std::string> out;
        for (const auto& k : order_)
            if (!known.count(k)) out.push_back(k);
        return out;
    }

    std::string str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    // Typed getters append to `problems` instead of throwing so that callers
    // can report every bad key in one go.
    long long integer(const std::string& key, long long fallback, std::vector<std::string>& problems) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        long long v = 0;
        const auto& s = it->second;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size()) {
            problems.push_back(key + ": expected integer, got '" + s + "'");
            return fallback;
        }
        return v;
    }

    double real(const std::string& key, double fallback, std::vector<std::string>& problems) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            problems.push_back(key + ": expected number, got '" + it->second + "'");
            return fallback;
        }
    }

    std::vector<double> reals(const std::string& key, std::vector<double> fallback, std::vector<std::string>& problems) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<double> out;
        for (const auto& tok : split(it->second, ',')) {
            try {
                std::size_t used = 0;
                out.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                problems.push_back(key + ": expected comma-separated numbers, got '" + it->second + "'");
                return fallback;
            }
        }
        return out;
    }

    std::string dump() const {
        std::string out;
        for (const auto& k : order_) out += k + " = " + values_.at(k) + "\n";
        return out;
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static std::vector<std::string> split(const std::string& s, char sep) {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream in(s);
        while (std::getline(in, cur, sep)) {
            cur = trim(cur);
            if (!cur.empty()) out.push_back(cur);
        }
        return out;
    }

    static std::string join(const std::vector<std::string>& parts, const std::string& sep) {
        std::string out;
        for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
        return out;
    }

private:
    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
};

} // namespace drdm
