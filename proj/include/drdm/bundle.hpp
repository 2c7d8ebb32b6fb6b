#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "drdm/error.hpp"
#include "drdm/grid.hpp"

namespace drdm {

/// A named f32 tensor. Values are held as float so a save/load round trip is
/// lossless by construction.
struct TensorEntry {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> values;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : shape) n *= static_cast<std::size_t>(d);
        return n;
    }
};

/// Directory holding `manifest.json` (tensor table plus free-form metadata)
/// and `data.bin` (little-endian f32, tensors back to back).
class TensorBundle {
public:
    nlohmann::json metadata = nlohmann::json::object();

    void add(std::string name, std::vector<std::int64_t> shape, const std::vector<double>& values) {
        TensorEntry e{std::move(name), std::move(shape), {}};
        if (e.numel() != values.size())
            throw ShapeError("bundle: tensor '" + e.name + "' shape does not match " + std::to_string(values.size()) +
                             " values");
        e.values.assign(values.begin(), values.end());
        put(std::move(e));
    }

    void add(const std::string& name, const Grid& g) {
        add(name, {g.T(), g.H(), g.W()}, g.storage());
    }

    void put(TensorEntry e) {
        auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& x) { return x.name == e.name; });
        if (it != entries_.end())
            *it = std::move(e);
        else
            entries_.push_back(std::move(e));
    }

    bool contains(const std::string& name) const {
        return std::any_of(entries_.begin(), entries_.end(), [&](const auto& x) { return x.name == name; });
    }

    const TensorEntry& get(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return e;
        throw BundleError(BundleError::Code::not_found, "bundle: no tensor named '" + name + "'");
    }

    std::vector<double> values(const std::string& name) const {
        const auto& e = get(name);
        return {e.values.begin(), e.values.end()};
    }

    Grid grid(const std::string& name, ResolutionLevel level, Origin origin = {}) const {
        const auto& e = get(name);
        if (e.shape.size() != 3) throw ShapeError("bundle: tensor '" + name + "' is not rank 3");
        return Grid(std::move(level), Extent{int(e.shape[0]), int(e.shape[1]), int(e.shape[2])}, values(name), origin);
    }

    const std::vector<TensorEntry>& entries() const { return entries_; }

private:
    std::vector<TensorEntry> entries_;
};

namespace detail {

inline void write_f32_le(std::ofstream& out, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline float read_f32_le(const unsigned char* p) {
    const std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
                               (std::uint32_t(p[3]) << 24);
    return std::bit_cast<float>(bits);
}

} // namespace detail

inline void save_bundle(const TensorBundle& bundle, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "drdm-bundle";
    manifest["version"] = 1;
    manifest["metadata"] = bundle.metadata;
    manifest["tensors"] = nlohmann::json::array();

    std::ofstream blob(dir / "data.bin", std::ios::binary | std::ios::trunc);
    if (!blob) throw BundleError(BundleError::Code::missing_file, "bundle: cannot write " + (dir / "data.bin").string());
    std::uint64_t offset = 0;
    for (const auto& e : bundle.entries()) {
        const std::uint64_t length = 4 * e.values.size();
        manifest["tensors"].push_back(
            {{"name", e.name}, {"dtype", "f32"}, {"shape", e.shape}, {"offset", offset}, {"length", length}});
        for (float v : e.values) detail::write_f32_le(blob, v);
        offset += length;
    }
    std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
}

inline TensorBundle load_bundle(const std::filesystem::path& dir) {
    using Code = BundleError::Code;
    const auto manifest_path = dir / "manifest.json";
    const auto blob_path = dir / "data.bin";
    if (!std::filesystem::exists(manifest_path))
        throw BundleError(Code::missing_file, "bundle: missing " + manifest_path.string());
    if (!std::filesystem::exists(blob_path)) throw BundleError(Code::missing_file, "bundle: missing " + blob_path.string());

    nlohmann::json manifest;
    try {
        std::ifstream(manifest_path) >> manifest;
    } catch (const nlohmann::json::exception& ex) {
        throw BundleError(Code::malformed, std::string("bundle: unreadable manifest: ") + ex.what());
    }
    if (!manifest.contains("tensors") || !manifest["tensors"].is_array())
        throw BundleError(Code::malformed, "bundle: manifest has no tensor table");

    std::ifstream in(blob_path, std::ios::binary);
    std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    TensorBundle bundle;
    if (manifest.contains("metadata")) bundle.metadata = manifest["metadata"];
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& t : manifest["tensors"]) {
        TensorEntry e;
        try {
            e.name = t.at("name").get<std::string>();
            e.shape = t.at("shape").get<std::vector<std::int64_t>>();
            const auto dtype = t.at("dtype").get<std::string>();
            if (dtype != "f32")
                throw BundleError(Code::unknown_dtype, "bundle: tensor '" + e.name + "' has unknown dtype '" + dtype + "'");
            const auto offset = t.at("offset").get<std::uint64_t>();
            const auto length = t.at("length").get<std::uint64_t>();
            if (length != 4 * e.numel())
                throw BundleError(Code::size_mismatch, "bundle: tensor '" + e.name + "' length " + std::to_string(length) +
                                                           " inconsistent with its shape");
            if (offset + length > blob.size())
                throw BundleError(Code::size_mismatch, "bundle: tensor '" + e.name + "' extends past end of data.bin (" +
                                                           std::to_string(blob.size()) + " bytes)");
            spans.emplace_back(offset, length);
            e.values.resize(e.numel());
            for (std::size_t i = 0; i < e.values.size(); ++i) e.values[i] = detail::read_f32_le(&blob[offset + 4 * i]);
        } catch (const nlohmann::json::exception& ex) {
            throw BundleError(Code::malformed, std::string("bundle: bad tensor record: ") + ex.what());
        }
        bundle.put(std::move(e));
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i)
        if (spans[i - 1].first + spans[i - 1].second > spans[i].first)
            throw BundleError(Code::malformed, "bundle: overlapping tensor byte ranges");
    return bundle;
}

} // namespace drdm
