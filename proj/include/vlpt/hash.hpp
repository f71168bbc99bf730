#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace vlpt {

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    static const char* d = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = d[h & 0xF];
        h >>= 4;
    }
    return out;
}

/// FNV-1a of a whole file's bytes, as a hex string. Throws if unreadable.
std::string file_hash_hex(const std::string& path);

} // namespace vlpt
