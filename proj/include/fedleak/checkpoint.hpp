#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "fedleak/tensor.hpp"

// Versioned binary container of named fp64 arrays plus a JSON metadata blob.
// Used for model checkpoints and intercepted client updates. Round-trips are
// bit-exact.

namespace fedleak::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

using TensorMap = std::map<std::string, Tensor>;

constexpr char kMagic[4] = {'F', 'L', 'T', 'C'};
constexpr std::uint32_t kVersion = 1;

inline void save(const std::string& path, const TensorMap& tensors, const nlohmann::json& meta = {}) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("ckpt::save: cannot open " + path);
    auto put = [&](const void* p, std::size_t n) { f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); };

    put(kMagic, 4);
    put(&kVersion, 4);
    const std::string meta_str = meta.is_null() ? "{}" : meta.dump();
    const std::uint64_t meta_len = meta_str.size();
    put(&meta_len, 8);
    put(meta_str.data(), meta_str.size());
    const std::uint64_t count = tensors.size();
    put(&count, 8);
    for (const auto& [name, t] : tensors) {
        const std::uint32_t name_len = static_cast<std::uint32_t>(name.size());
        put(&name_len, 4);
        put(name.data(), name.size());
        const std::uint32_t ndim = static_cast<std::uint32_t>(t.ndim());
        put(&ndim, 4);
        for (int d : t.shape()) {
            const std::int32_t dd = d;
            put(&dd, 4);
        }
        put(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(double));
    }
    if (!f) throw std::runtime_error("ckpt::save: write failed for " + path);
}

struct Loaded {
    TensorMap tensors;
    nlohmann::json meta;
};

inline Loaded load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("ckpt::load: cannot open " + path);
    auto get = [&](void* p, std::size_t n) {
        f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!f) throw std::runtime_error("ckpt::load: truncated file " + path);
    };

    char magic[4];
    get(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("ckpt::load: " + path + " is not a checkpoint");
    std::uint32_t version = 0;
    get(&version, 4);
    if (version != kVersion)
        throw std::runtime_error("ckpt::load: " + path + ": unsupported version " + std::to_string(version));

    Loaded out;
    std::uint64_t meta_len = 0;
    get(&meta_len, 8);
    std::string meta_str(meta_len, '\0');
    if (meta_len) get(meta_str.data(), meta_len);
    out.meta = nlohmann::json::parse(meta_str);

    std::uint64_t count = 0;
    get(&count, 8);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t name_len = 0;
        get(&name_len, 4);
        std::string name(name_len, '\0');
        get(name.data(), name_len);
        std::uint32_t ndim = 0;
        get(&ndim, 4);
        Shape shape(ndim);
        for (auto& d : shape) {
            std::int32_t dd = 0;
            get(&dd, 4);
            d = dd;
        }
        Tensor t(shape);
        get(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(double));
        out.tensors.emplace(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace fedleak::ckpt
