#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "hsnc/errors.hpp"

namespace hsnc {

// All on-disk formats in this project are little-endian. The raw-copy
// helpers below are only correct on a little-endian host.
static_assert(std::endian::native == std::endian::little,
              "binary IO helpers require a little-endian host");

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw FormatError("write failed after " + std::to_string(os.tellp()) + " bytes");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
        throw FormatError(std::string("truncated input: expected ") + std::to_string(n) +
                          " bytes for " + what + ", got " + std::to_string(is.gcount()));
    }
}

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    write_bytes(os, &v, sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    read_bytes(is, &v, sizeof(T), what);
    return v;
}

inline void write_magic(std::ostream& os, const char magic[8]) {
    write_bytes(os, magic, 8);
}

inline void expect_magic(std::istream& is, const char magic[8], const char* format_name) {
    char got[8];
    read_bytes(is, got, 8, "magic");
    if (std::memcmp(got, magic, 8) != 0) {
        throw FormatError(std::string("bad magic at offset 0: not a ") + format_name + " file");
    }
}

inline void write_string_u32(std::ostream& os, const std::string& s) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

inline std::string read_string_u32(std::istream& is, const char* what, std::uint32_t max_len = 1u << 20) {
    const auto n = read_le<std::uint32_t>(is, what);
    if (n > max_len) {
        throw FormatError(std::string("implausible string length ") + std::to_string(n) +
                          " for " + what);
    }
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n, what);
    return s;
}

// IEEE 754 binary16 conversion with round-to-nearest-even. Overflow maps to
// inf, subnormal halves are produced where needed, NaN payloads collapse to a
// quiet NaN.
inline std::uint16_t float_to_half(float f) {
    std::uint32_t x;
    std::memcpy(&x, &f, 4);
    const std::uint32_t sign = (x >> 16) & 0x8000u;
    const std::uint32_t abs = x & 0x7FFFFFFFu;

    if (abs >= 0x7F800000u) {
        // inf or NaN
        if (abs > 0x7F800000u) return static_cast<std::uint16_t>(sign | 0x7E00u);
        return static_cast<std::uint16_t>(sign | 0x7C00u);
    }
    if (abs >= 0x47800000u) {
        // rounds to >= 2^16: overflow to inf
        return static_cast<std::uint16_t>(sign | 0x7C00u);
    }
    if (abs < 0x38800000u) {
        // subnormal half (or zero). Shift so the implicit bit lands in place,
        // then round to nearest even.
        if (abs < 0x33000000u) return static_cast<std::uint16_t>(sign); // underflow to zero
        const int shift = 126 - static_cast<int>(abs >> 23); // in [14, 24] given the cutoffs
        std::uint32_t mant = (abs & 0x7FFFFFu) | 0x800000u;
        const std::uint32_t rounded = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t half = 1u << (shift - 1);
        std::uint32_t out = rounded;
        if (rem > half || (rem == half && (rounded & 1u))) out += 1;
        return static_cast<std::uint16_t>(sign | out);
    }
    // normal half
    std::uint32_t mant = abs & 0x7FFFFFu;
    const std::uint32_t exp = (abs >> 23) - 112; // rebias 127 -> 15
    std::uint32_t out = (exp << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (out & 1u))) out += 1; // may carry into exp, inf is correct
    return static_cast<std::uint16_t>(sign | out);
}

inline float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    const std::uint32_t mant = h & 0x3FFu;
    std::uint32_t x;
    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {
            // subnormal: normalize
            int e = -1;
            std::uint32_t m = mant;
            do {
                m <<= 1;
                ++e;
            } while (!(m & 0x400u));
            x = sign | ((112 - e) << 23) | ((m & 0x3FFu) << 13);
        }
    } else if (exp == 31) {
        x = sign | 0x7F800000u | (mant << 13);
    } else {
        x = sign | ((exp + 112) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &x, 4);
    return f;
}

// FNV-1a 64-bit hash, used for deterministic dataset splits.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace hsnc
