#pragma once

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "iclp/hash.hpp"
#include "iclp/params.hpp"

namespace iclp {

// Checkpoint file: 8-byte magic, u64 header length, JSON header, then raw
// little-endian float32 data. The header carries shapes, offsets, a config
// hash and the PRNG state, so a file is self-describing.
inline constexpr char kCkptMagic[8] = {'I', 'C', 'L', 'P', 'C', 'K', 'P', '1'};

inline void save_checkpoint(const std::string& path, const ModuleParams<float>& params,
                            nlohmann::json meta) {
    nlohmann::json entries = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : params) {
        entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset},
                           {"count", t.size()}});
        offset += static_cast<uint64_t>(t.size());
    }
    meta["format_version"] = 1;
    meta["dtype"] = "f32";
    meta["params"] = std::move(entries);
    std::string header = meta.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(kCkptMagic, 8);
    uint64_t hlen = header.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, t] : params)
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!f) throw std::runtime_error("short write on checkpoint: " + path);
}

struct Checkpoint {
    nlohmann::json meta;
    ModuleParams<float> params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string header(hlen, '\0');
    f.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("truncated checkpoint header: " + path);
    Checkpoint ck;
    ck.meta = nlohmann::json::parse(header);
    if (ck.meta.value("format_version", 0) != 1)
        throw std::runtime_error("unsupported checkpoint version in " + path);
    for (const auto& e : ck.meta.at("params")) {
        Tensor<float> t(e.at("shape").get<std::vector<int>>());
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!f) throw std::runtime_error("truncated checkpoint data: " + path);
        ck.params.add(e.at("name"), std::move(t));
    }
    return ck;
}

inline std::string file_hash_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot hash missing file: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0)
        h = fnv1a64({buf, static_cast<size_t>(f.gcount())}, h);
    return hash_hex(h);
}

}  // namespace iclp
