#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

namespace fedmob {

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ULL;

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
    return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t hash_u64(uint64_t v, uint64_t h = kFnvOffset) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    return fnv1a64(b, 8, h);
}

// Content hash over the IEEE-754 bit patterns of a double span.
inline uint64_t hash_doubles(std::span<const double> values, uint64_t h = kFnvOffset) {
    for (double v : values) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        h = hash_u64(bits, h);
    }
    return h;
}

} // namespace fedmob
