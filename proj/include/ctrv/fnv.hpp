#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace ctrv {

inline constexpr uint64_t kFnvBasis = 14695981039346656037ull;
inline constexpr uint64_t kFnvPrime = 1099511628211ull;

constexpr uint64_t fnv1a(uint64_t hash, const uint8_t* data, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        hash ^= data[i];
        hash *= kFnvPrime;
    }
    return hash;
}

inline uint64_t fnv1aBytes(std::span<const uint8_t> bytes, uint64_t hash = kFnvBasis) {
    return fnv1a(hash, bytes.data(), bytes.size());
}

constexpr uint64_t fnv1aU64(uint64_t hash, uint64_t value) {
    for (int i = 0; i < 8; ++i) {
        hash ^= (value >> (8 * i)) & 0xFF;
        hash *= kFnvPrime;
    }
    return hash;
}

constexpr uint64_t fnv1aU32(uint64_t hash, uint32_t value) {
    for (int i = 0; i < 4; ++i) {
        hash ^= (value >> (8 * i)) & 0xFF;
        hash *= kFnvPrime;
    }
    return hash;
}

constexpr uint64_t fnv1aU8(uint64_t hash, uint8_t value) {
    hash ^= value;
    hash *= kFnvPrime;
    return hash;
}

inline uint64_t fnv1aStr(uint64_t hash, std::string_view text) {
    return fnv1a(hash, reinterpret_cast<const uint8_t*>(text.data()), text.size());
}

}  // namespace ctrv
