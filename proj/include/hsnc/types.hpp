#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hsnc/errors.hpp"

namespace hsnc {

enum class Space : std::uint8_t { raw = 0, normalized = 1 };

enum class NormKind : std::uint8_t { asinh = 0, zscore = 1, logit = 2 };

inline const char* norm_kind_name(NormKind k) {
    switch (k) {
        case NormKind::asinh: return "asinh";
        case NormKind::zscore: return "zscore";
        case NormKind::logit: return "logit";
    }
    throw ConfigError("unknown normalizer kind");
}

inline NormKind norm_kind_from_name(const std::string& s) {
    if (s == "asinh") return NormKind::asinh;
    if (s == "zscore") return NormKind::zscore;
    if (s == "logit") return NormKind::logit;
    throw ConfigError("unknown normalizer kind '" + s + "'");
}

inline NormKind norm_kind_from_byte(std::uint8_t b) {
    if (b > 2) throw FormatError("invalid normalizer kind byte " + std::to_string(b));
    return static_cast<NormKind>(b);
}

// One spectral tile: channel-major f32 cube, either raw radiance or
// normalized values.
struct HyperspectralTile {
    std::string id;
    std::int64_t C = 0, H = 0, W = 0;
    Space space = Space::raw;
    std::vector<float> data; // [C][H][W]

    std::int64_t numel() const { return C * H * W; }

    void validate() const {
        if (C < 1 || H < 1 || W < 1) {
            throw DataError("tile '" + id + "': extents must be >= 1, got C=" + std::to_string(C) +
                            " H=" + std::to_string(H) + " W=" + std::to_string(W));
        }
        if (static_cast<std::int64_t>(data.size()) != numel()) {
            throw DataError("tile '" + id + "': data length " + std::to_string(data.size()) +
                            " does not match C*H*W = " + std::to_string(numel()));
        }
    }
};

// One derived geophysical map at full tile resolution, NaN where invalid.
struct L2Product {
    std::string name;
    NormKind kind = NormKind::asinh;
    std::vector<float> data; // [h][w]
};

struct L2ProductSet {
    std::string id;
    std::int64_t h = 0, w = 0;
    std::vector<L2Product> products; // order is meaningful

    const L2Product& find(const std::string& name) const {
        for (const auto& p : products)
            if (p.name == name) return p;
        throw DataError("product set '" + id + "' has no product '" + name + "'");
    }

    void validate() const {
        if (h < 1 || w < 1) throw DataError("product set '" + id + "': extents must be >= 1");
        for (const auto& p : products) {
            if (static_cast<std::int64_t>(p.data.size()) != h * w) {
                throw DataError("product '" + p.name + "' in set '" + id + "': map length " +
                                std::to_string(p.data.size()) + " does not match h*w = " +
                                std::to_string(h * w));
            }
        }
    }
};

} // namespace hsnc
