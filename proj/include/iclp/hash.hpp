#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace iclp {

// FNV-1a 64. Artifact fingerprints only, not security.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

inline std::string fnv1a64_hex(std::string_view s) { return hash_hex(fnv1a64(s)); }

}  // namespace iclp
