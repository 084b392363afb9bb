#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include "mada/config.hpp"
#include "mada/error.hpp"

namespace mada {

/// Ordered `key = value` records, the text format shared by manifests and sidecars.
class KeyValues {
public:
    void set(std::string key, std::string value) {
        for (auto& [k, v] : entries_) {
            if (k == key) {
                v = std::move(value);
                return;
            }
        }
        entries_.emplace_back(std::move(key), std::move(value));
    }

    template <typename T>
        requires std::is_arithmetic_v<T>
    void set(std::string key, T value) {
        if constexpr (std::is_floating_point_v<T>) {
            set(std::move(key), detail::format_real(static_cast<double>(value)));
        } else {
            set(std::move(key), std::to_string(value));
        }
    }

    [[nodiscard]] bool contains(std::string_view key) const {
        for (const auto& [k, v] : entries_) {
            if (k == key) return true;
        }
        return false;
    }

    [[nodiscard]] const std::string& get(std::string_view key) const {
        for (const auto& [k, v] : entries_) {
            if (k == key) return v;
        }
        throw DataError("missing key '" + std::string(key) + "'");
    }

    [[nodiscard]] std::string get_or(std::string_view key, std::string fallback) const {
        return contains(key) ? get(key) : fallback;
    }

    [[nodiscard]] std::int64_t get_int(std::string_view key) const {
        try {
            return detail::parse_int(key, get(key));
        } catch (const ConfigError& e) {
            throw DataError(e.what());
        }
    }

    [[nodiscard]] double get_real(std::string_view key) const {
        try {
            return detail::parse_real(key, get(key));
        } catch (const ConfigError& e) {
            throw DataError(e.what());
        }
    }

    [[nodiscard]] const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    [[nodiscard]] std::string str() const {
        std::string out;
        for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
        return out;
    }

    static KeyValues parse(std::string_view text) {
        KeyValues kv;
        std::istringstream in{std::string(text)};
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.front() == '#') continue;
            const auto eq = line.find(" = ");
            if (eq == std::string::npos) {
                if (detail::trim(line).empty()) continue;
                throw DataError("malformed record line '" + line + "'");
            }
            kv.set(detail::trim(line.substr(0, eq)), line.substr(eq + 3));
        }
        return kv;
    }

    static KeyValues load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot read " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw DataError("cannot write " + path.string());
        out << str();
        if (!out) throw DataError("write failed for " + path.string());
    }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

/// Writes a directory through `fill(tmp)` and swaps it into place, so a crash never
/// leaves a half-written `target`.
template <typename Fill>
void write_directory_atomically(const std::filesystem::path& target, Fill&& fill) {
    namespace fs = std::filesystem;
    const auto parent = target.parent_path().empty() ? fs::path(".") : target.parent_path();
    fs::create_directories(parent);
    const auto stem = target.filename().string();
    const auto tmp = parent / (stem + ".tmp-" + std::to_string(::getpid()));
    const auto old = parent / (stem + ".old-" + std::to_string(::getpid()));
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    try {
        fill(tmp);
    } catch (...) {
        fs::remove_all(tmp);
        throw;
    }
    const bool existed = fs::exists(target);
    if (existed) fs::rename(target, old);
    fs::rename(tmp, target);
    if (existed) fs::remove_all(old);
}

}  // namespace mada
