#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsnc/binio.hpp"
#include "hsnc/errors.hpp"
#include "hsnc/rng.hpp"
#include "hsnc/types.hpp"

namespace hsnc {

// ---------------------------------------------------------------------------
// HSTILE01: single-tile radiance cube.
//   magic "HSTILE01" | u32 C | u32 H | u32 W | u8 dtype (0 = f32)
//   | u8 space (0 = raw, 1 = normalized) | 2 reserved zero bytes
//   | payload, channel-major f32 little-endian.
// dtype 1 is reserved for f16 latent payloads in the codec format; tile files
// are always f32.
// ---------------------------------------------------------------------------

inline constexpr char kTileMagic[8] = {'H', 'S', 'T', 'I', 'L', 'E', '0', '1'};
inline constexpr char kL2Magic[8] = {'H', 'S', 'L', '2', '_', '0', '1', '\0'};

namespace detail {

inline void check_extent(std::uint32_t v, const char* name, int offset) {
    if (v < 1 || v > 1000000u) {
        throw FormatError(std::string("implausible ") + name + " = " + std::to_string(v) +
                          " at offset " + std::to_string(offset));
    }
}

inline std::string path_stem(const std::string& path) {
    return std::filesystem::path(path).stem().string();
}

} // namespace detail

inline void write_tile(std::ostream& os, const HyperspectralTile& tile) {
    tile.validate();
    if (tile.space == Space::raw) {
        for (std::size_t i = 0; i < tile.data.size(); ++i) {
            const float v = tile.data[i];
            if (!(v >= 0.0f)) {
                throw DataError("tile '" + tile.id + "': raw-space value " + std::to_string(v) +
                                " at index " + std::to_string(i) + " is negative or not finite");
            }
        }
    }
    write_magic(os, kTileMagic);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tile.C));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tile.H));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tile.W));
    write_le<std::uint8_t>(os, 0); // dtype f32
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(tile.space));
    write_le<std::uint8_t>(os, 0);
    write_le<std::uint8_t>(os, 0);
    write_bytes(os, tile.data.data(), tile.data.size() * sizeof(float));
}

inline HyperspectralTile read_tile(std::istream& is) {
    expect_magic(is, kTileMagic, "HSTILE01");
    const auto c = read_le<std::uint32_t>(is, "tile channel count");
    const auto h = read_le<std::uint32_t>(is, "tile height");
    const auto w = read_le<std::uint32_t>(is, "tile width");
    detail::check_extent(c, "channel count", 8);
    detail::check_extent(h, "height", 12);
    detail::check_extent(w, "width", 16);
    const auto dtype = read_le<std::uint8_t>(is, "tile dtype byte");
    if (dtype != 0) {
        throw FormatError("unsupported dtype byte " + std::to_string(dtype) +
                          " at offset 20 (tile payloads are f32)");
    }
    const auto space = read_le<std::uint8_t>(is, "tile space byte");
    if (space > 1) {
        throw FormatError("invalid space byte " + std::to_string(space) + " at offset 21");
    }
    const auto r0 = read_le<std::uint8_t>(is, "reserved header byte");
    const auto r1 = read_le<std::uint8_t>(is, "reserved header byte");
    if (r0 != 0 || r1 != 0) {
        throw FormatError("reserved header bytes at offset 22 must be zero");
    }

    HyperspectralTile tile;
    tile.C = c;
    tile.H = h;
    tile.W = w;
    tile.space = static_cast<Space>(space);
    const std::int64_t n = tile.numel();
    if (n > (std::int64_t(1) << 30)) {
        throw FormatError("implausible tile payload of " + std::to_string(n) + " elements");
    }
    tile.data.resize(static_cast<std::size_t>(n));
    read_bytes(is, tile.data.data(), tile.data.size() * sizeof(float), "tile payload");
    return tile;
}

inline void write_tile(const HyperspectralTile& tile, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    write_tile(os, tile);
    os.flush();
    if (!os) throw DataError("write failed for '" + path + "'");
}

inline HyperspectralTile read_tile(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open tile file '" + path + "'");
    try {
        HyperspectralTile tile = read_tile(is);
        tile.id = detail::path_stem(path);
        return tile;
    } catch (const FormatError& e) {
        throw FormatError(std::string(e.what()) + " in '" + path + "'");
    }
}

// ---------------------------------------------------------------------------
// HSL2_01: per-tile derived product maps.
//   magic "HSL2_01\0" | u32 nprod | u32 h | u32 w
//   | per product: u8 name_len | name bytes | u8 norm_kind
//   | payloads in product order, each h*w f32 little-endian (NaN = invalid).
// Payloads hold raw physical values; norm_kind records which normalizer the
// product uses downstream.
// ---------------------------------------------------------------------------

inline void write_products(std::ostream& os, const L2ProductSet& set) {
    set.validate();
    std::unordered_set<std::string> seen;
    for (const auto& p : set.products) {
        if (p.name.empty() || p.name.size() > 255) {
            throw DataError("product set '" + set.id + "': product name '" + p.name +
                            "' must be 1..255 bytes");
        }
        if (!seen.insert(p.name).second) {
            throw DataError("product set '" + set.id + "': duplicate product name '" + p.name + "'");
        }
    }
    write_magic(os, kL2Magic);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(set.products.size()));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(set.h));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(set.w));
    for (const auto& p : set.products) {
        write_le<std::uint8_t>(os, static_cast<std::uint8_t>(p.name.size()));
        write_bytes(os, p.name.data(), p.name.size());
        write_le<std::uint8_t>(os, static_cast<std::uint8_t>(p.kind));
    }
    for (const auto& p : set.products) {
        write_bytes(os, p.data.data(), p.data.size() * sizeof(float));
    }
}

inline L2ProductSet read_products(std::istream& is) {
    expect_magic(is, kL2Magic, "HSL2_01");
    const auto nprod = read_le<std::uint32_t>(is, "product count");
    if (nprod > 1024u) {
        throw FormatError("implausible product count " + std::to_string(nprod) + " at offset 8");
    }
    const auto h = read_le<std::uint32_t>(is, "product map height");
    const auto w = read_le<std::uint32_t>(is, "product map width");
    detail::check_extent(h, "height", 12);
    detail::check_extent(w, "width", 16);

    L2ProductSet set;
    set.h = h;
    set.w = w;
    if (std::int64_t(h) * std::int64_t(w) * nprod > (std::int64_t(1) << 30)) {
        throw FormatError("implausible product payload size");
    }
    std::unordered_set<std::string> seen;
    set.products.resize(nprod);
    for (auto& p : set.products) {
        const auto name_len = read_le<std::uint8_t>(is, "product name length");
        if (name_len == 0) throw FormatError("empty product name");
        p.name.resize(name_len);
        read_bytes(is, p.name.data(), name_len, "product name");
        if (!seen.insert(p.name).second) {
            throw FormatError("duplicate product name '" + p.name + "'");
        }
        p.kind = norm_kind_from_byte(read_le<std::uint8_t>(is, "product normalizer kind"));
    }
    for (auto& p : set.products) {
        p.data.resize(static_cast<std::size_t>(set.h * set.w));
        read_bytes(is, p.data.data(), p.data.size() * sizeof(float), "product payload");
    }
    return set;
}

inline void write_products(const L2ProductSet& set, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    write_products(os, set);
    os.flush();
    if (!os) throw DataError("write failed for '" + path + "'");
}

inline L2ProductSet read_products(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open product file '" + path + "'");
    try {
        L2ProductSet set = read_products(is);
        set.id = detail::path_stem(path);
        return set;
    } catch (const FormatError& e) {
        throw FormatError(std::string(e.what()) + " in '" + path + "'");
    }
}

// ---------------------------------------------------------------------------
// Train/val split. Hash-based and seed-free: an id's assignment never changes
// when other ids are added or removed.
// ---------------------------------------------------------------------------

struct SplitAssignment {
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
    float ratio = 0.0f;
};

inline SplitAssignment split_files(const std::vector<std::string>& ids, int train_pct = 70) {
    if (train_pct < 0 || train_pct > 100) {
        throw UsageError("split_files: train_pct must be in [0,100], got " + std::to_string(train_pct));
    }
    std::unordered_set<std::string> seen;
    SplitAssignment out;
    out.ratio = static_cast<float>(train_pct) / 100.0f;
    for (const auto& id : ids) {
        if (!seen.insert(id).second) {
            throw UsageError("split_files: duplicate id '" + id + "'");
        }
        if (fnv1a64(id) % 100 < static_cast<std::uint64_t>(train_pct)) {
            out.train_ids.push_back(id);
        } else {
            out.val_ids.push_back(id);
        }
    }
    return out;
}

inline nlohmann::json split_to_json(const SplitAssignment& s) {
    return nlohmann::json{{"train_ids", s.train_ids}, {"val_ids", s.val_ids}, {"ratio", s.ratio}};
}

inline SplitAssignment split_from_json(const nlohmann::json& j) {
    try {
        SplitAssignment s;
        s.train_ids = j.at("train_ids").get<std::vector<std::string>>();
        s.val_ids = j.at("val_ids").get<std::vector<std::string>>();
        s.ratio = j.at("ratio").get<float>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed split JSON: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// SampleBuffer: a bounded pool of resident tile ids. Batches are drawn
// uniformly with replacement from the resident slots; after each draw one
// random slot is replaced with the next id from a shuffled epoch ordering of
// the backing list, so I/O stays bounded while coverage stays complete.
// The buffer owns its RNG so that (slots, epoch order, cursor, rng state)
// serialize as one unit and training can resume bit-exactly.
// ---------------------------------------------------------------------------

class SampleBuffer {
public:
    SampleBuffer() = default;

    SampleBuffer(std::vector<std::string> backing, std::int64_t capacity, Rng rng)
        : capacity_(capacity), backing_(std::move(backing)), rng_(rng) {
        if (capacity_ < 1) {
            throw UsageError("SampleBuffer: capacity must be >= 1, got " + std::to_string(capacity_));
        }
        if (backing_.empty()) return;
        reshuffle_epoch();
        const std::size_t resident =
            std::min(backing_.size(), static_cast<std::size_t>(capacity_));
        slots_.assign(epoch_.begin(), epoch_.begin() + static_cast<std::ptrdiff_t>(resident));
        cursor_ = resident;
    }

    bool empty() const { return slots_.empty(); }
    std::int64_t capacity() const { return capacity_; }
    const std::vector<std::string>& slots() const { return slots_; }
    const std::vector<std::string>& backing() const { return backing_; }

    std::vector<std::string> draw(std::int64_t batch) {
        if (slots_.empty()) throw UsageError("sample_batch: buffer is empty");
        if (batch < 1) throw UsageError("sample_batch: batch must be >= 1, got " + std::to_string(batch));
        std::vector<std::string> out;
        out.reserve(static_cast<std::size_t>(batch));
        for (std::int64_t i = 0; i < batch; ++i) {
            out.push_back(slots_[rng_.below(slots_.size())]);
        }
        refresh_one();
        return out;
    }

    void save(std::ostream& os) const {
        write_le<std::int64_t>(os, capacity_);
        write_le<std::uint64_t>(os, rng_.key());
        write_le<std::uint64_t>(os, rng_.counter());
        write_le<std::uint64_t>(os, cursor_);
        auto put = [&os](const std::vector<std::string>& v) {
            write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v.size()));
            for (const auto& s : v) write_string_u32(os, s);
        };
        put(backing_);
        put(epoch_);
        put(slots_);
    }

    static SampleBuffer load(std::istream& is) {
        SampleBuffer b;
        b.capacity_ = read_le<std::int64_t>(is, "buffer capacity");
        const auto key = read_le<std::uint64_t>(is, "buffer rng key");
        const auto counter = read_le<std::uint64_t>(is, "buffer rng counter");
        b.rng_ = Rng::restore(key, counter);
        b.cursor_ = read_le<std::uint64_t>(is, "buffer cursor");
        auto get = [&is](const char* what) {
            const auto n = read_le<std::uint32_t>(is, what);
            if (n > (1u << 24)) {
                throw FormatError(std::string("implausible list length for ") + what);
            }
            std::vector<std::string> v(n);
            for (auto& s : v) s = read_string_u32(is, what);
            return v;
        };
        b.backing_ = get("buffer backing ids");
        b.epoch_ = get("buffer epoch ids");
        b.slots_ = get("buffer slot ids");
        return b;
    }

private:
    void reshuffle_epoch() {
        epoch_ = backing_;
        for (std::size_t i = epoch_.size(); i > 1; --i) {
            std::swap(epoch_[i - 1], epoch_[rng_.below(i)]);
        }
        cursor_ = 0;
    }

    void refresh_one() {
        if (backing_.empty()) return;
        if (cursor_ >= epoch_.size()) reshuffle_epoch();
        const auto slot = rng_.below(slots_.size());
        slots_[slot] = epoch_[cursor_++];
    }

    std::int64_t capacity_ = 0;
    std::vector<std::string> backing_;
    std::vector<std::string> epoch_;
    std::uint64_t cursor_ = 0;
    std::vector<std::string> slots_;
    Rng rng_{0};
};

inline std::vector<std::string> sample_batch(SampleBuffer& buffer, std::int64_t batch) {
    return buffer.draw(batch);
}

// ---------------------------------------------------------------------------
// Synthetic granule generator. Plants a Beer-Lambert signal,
//   r(lambda,x,y) = B(lambda) * exp(-sum_k a_k(x,y) * sigma_k(x,y)) * (1-f) + B_cloud(lambda) * f,
// with a smooth continuum B, Gaussian-bump cross-sections sigma_k, smooth
// positive absorber fields a_k, a cloud-fraction field f in [0,1] from
// thresholded smoothed noise, and optional multiplicative lognormal noise.
// The absorber fields and cloud field come back as product maps so probes
// have known ground truth to recover.
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::int64_t channels = 64;
    std::int64_t tile = 32;
    int absorbers = 3;
    double field_smoothness = 5.0; // gaussian sigma, pixels
    double cloud_smoothness = 4.0;
    double cloud_cover = 0.35;     // target fraction of cloudy pixels
    double absorber_scale = 1.0;   // 0 turns the planted signal off
    double noise = 0.0;            // lognormal sigma of multiplicative noise
    double nan_fraction = 0.0;     // per product, per pixel

    void validate() const {
        if (channels < 1) throw ConfigError("synth: channels must be >= 1");
        if (tile < 1) throw ConfigError("synth: tile must be >= 1");
        if (absorbers != 3) {
            throw ConfigError("synth: the product mapping is fixed to 3 absorber species");
        }
        if (field_smoothness < 0 || cloud_smoothness < 0) {
            throw ConfigError("synth: smoothness must be >= 0");
        }
        if (cloud_cover < 0 || cloud_cover > 1) throw ConfigError("synth: cloud_cover must be in [0,1]");
        if (absorber_scale < 0) throw ConfigError("synth: absorber_scale must be >= 0");
        if (noise < 0) throw ConfigError("synth: noise must be >= 0");
        if (nan_fraction < 0 || nan_fraction > 1) {
            throw ConfigError("synth: nan_fraction must be in [0,1]");
        }
    }
};

inline nlohmann::json synth_config_to_json(const SynthConfig& c) {
    return nlohmann::json{
        {"channels", c.channels},       {"tile", c.tile},
        {"absorbers", c.absorbers},     {"field_smoothness", c.field_smoothness},
        {"cloud_smoothness", c.cloud_smoothness}, {"cloud_cover", c.cloud_cover},
        {"absorber_scale", c.absorber_scale},     {"noise", c.noise},
        {"nan_fraction", c.nan_fraction},
    };
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    try {
        SynthConfig c;
        c.channels = j.value("channels", c.channels);
        c.tile = j.value("tile", c.tile);
        c.absorbers = j.value("absorbers", c.absorbers);
        c.field_smoothness = j.value("field_smoothness", c.field_smoothness);
        c.cloud_smoothness = j.value("cloud_smoothness", c.cloud_smoothness);
        c.cloud_cover = j.value("cloud_cover", c.cloud_cover);
        c.absorber_scale = j.value("absorber_scale", c.absorber_scale);
        c.noise = j.value("noise", c.noise);
        c.nan_fraction = j.value("nan_fraction", c.nan_fraction);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed synth config JSON: ") + e.what());
    }
}

// Planted ground truth, filled on request so tests can verify the generated
// cube against the exact templates and fields that produced it.
struct SynthTruth {
    std::vector<double> continuum;              // B(lambda)
    std::vector<double> cloud_spectrum;         // B_cloud(lambda)
    std::vector<std::vector<double>> sigma;     // K cross-sections over lambda
    std::vector<std::vector<double>> fields;    // K absorber fields a_k, h*w
    std::vector<double> cloud;                  // f, h*w
};

namespace detail {

// Smoothed standard-normal field: white noise blurred with a separable
// gaussian (wrap-around padding), then re-standardized to zero mean and unit
// variance so downstream thresholds are scale-free.
inline std::vector<double> smooth_field(std::int64_t h, std::int64_t w, double sigma, Rng& rng) {
    std::vector<double> field(static_cast<std::size_t>(h * w));
    for (auto& v : field) v = rng.normal();
    if (sigma > 0) {
        const int radius = static_cast<int>(std::ceil(3.0 * sigma));
        std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
        double ksum = 0.0;
        for (int i = -radius; i <= radius; ++i) {
            kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
            ksum += kernel[static_cast<std::size_t>(i + radius)];
        }
        for (auto& k : kernel) k /= ksum;
        std::vector<double> tmp(field.size());
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const std::int64_t xx = ((x + i) % w + w) % w;
                    acc += kernel[static_cast<std::size_t>(i + radius)] *
                           field[static_cast<std::size_t>(y * w + xx)];
                }
                tmp[static_cast<std::size_t>(y * w + x)] = acc;
            }
        }
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const std::int64_t yy = ((y + i) % h + h) % h;
                    acc += kernel[static_cast<std::size_t>(i + radius)] *
                           tmp[static_cast<std::size_t>(yy * w + x)];
                }
                field[static_cast<std::size_t>(y * w + x)] = acc;
            }
        }
    }
    double mean = 0.0;
    for (double v : field) mean += v;
    mean /= static_cast<double>(field.size());
    double var = 0.0;
    for (double v : field) var += (v - mean) * (v - mean);
    var /= static_cast<double>(field.size());
    const double istd = var > 0 ? 1.0 / std::sqrt(var) : 0.0;
    for (auto& v : field) v = (v - mean) * istd;
    return field;
}

} // namespace detail

inline std::pair<HyperspectralTile, L2ProductSet> synth_generate(const SynthConfig& cfg, Rng& rng,
                                                                 const std::string& id = "synth",
                                                                 SynthTruth* truth = nullptr) {
    cfg.validate();
    const std::int64_t C = cfg.channels, H = cfg.tile, W = cfg.tile;
    const std::size_t npix = static_cast<std::size_t>(H * W);
    const int K = cfg.absorbers;

    // Spectral templates on a unit wavelength axis.
    std::vector<double> lam(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
        lam[static_cast<std::size_t>(c)] = C > 1 ? static_cast<double>(c) / static_cast<double>(C - 1) : 0.0;
    }
    const double two_pi = 6.283185307179586;
    const double phi1 = rng.uniform(), phi2 = rng.uniform(), phi3 = rng.uniform();
    const double bright = rng.uniform_in(0.8, 1.2);
    std::vector<double> B(lam.size()), Bc(lam.size());
    for (std::size_t i = 0; i < lam.size(); ++i) {
        B[i] = bright * (400.0 + 250.0 * std::sin(two_pi * (phi1 + 1.3 * lam[i])) +
                         120.0 * std::sin(two_pi * (phi2 + 3.7 * lam[i])));
    }
    const double cloud_bright = rng.uniform_in(1.2, 1.6);
    for (std::size_t i = 0; i < lam.size(); ++i) {
        Bc[i] = cloud_bright * (500.0 + 80.0 * std::sin(two_pi * (phi3 + 2.1 * lam[i])));
    }

    std::vector<std::vector<double>> sigma(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        const double center = (k + 1.0) / (K + 1.0) + rng.uniform_in(-0.04, 0.04);
        const double width = rng.uniform_in(0.05, 0.11);
        const double amp = rng.uniform_in(0.35, 0.6);
        sigma[static_cast<std::size_t>(k)].resize(lam.size());
        for (std::size_t i = 0; i < lam.size(); ++i) {
            const double d = (lam[i] - center) / width;
            sigma[static_cast<std::size_t>(k)][i] = amp * std::exp(-0.5 * d * d);
        }
    }

    // Absorber fields: lognormal transforms of smoothed gaussian fields, so
    // they stay positive with O(1) median.
    std::vector<std::vector<double>> a(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        auto z = detail::smooth_field(H, W, cfg.field_smoothness, rng);
        a[static_cast<std::size_t>(k)].resize(npix);
        for (std::size_t i = 0; i < npix; ++i) {
            a[static_cast<std::size_t>(k)][i] = cfg.absorber_scale * std::exp(0.5 * z[i]);
        }
    }

    // Cloud fraction from a thresholded smoothed field. The threshold is the
    // (1 - cover) quantile so cover controls the cloudy-pixel fraction; a soft
    // edge of half a standard deviation leaves partly cloudy pixels between
    // fully clear (0) and fully overcast (1).
    std::vector<double> f(npix, 0.0);
    if (cfg.cloud_cover >= 1.0) {
        std::fill(f.begin(), f.end(), 1.0);
    } else if (cfg.cloud_cover > 0.0) {
        auto g = detail::smooth_field(H, W, cfg.cloud_smoothness, rng);
        std::vector<double> sorted(g);
        std::sort(sorted.begin(), sorted.end());
        const auto qidx = static_cast<std::size_t>(
            std::min<double>(static_cast<double>(npix - 1),
                             std::floor((1.0 - cfg.cloud_cover) * static_cast<double>(npix))));
        const double t = sorted[qidx];
        for (std::size_t i = 0; i < npix; ++i) {
            f[i] = std::clamp((g[i] - t) / 0.5 + 0.5, 0.0, 1.0);
        }
    }

    HyperspectralTile tile;
    tile.id = id;
    tile.C = C;
    tile.H = H;
    tile.W = W;
    tile.space = Space::raw;
    tile.data.resize(static_cast<std::size_t>(C) * npix);
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < npix; ++i) {
            double tau = 0.0;
            for (int k = 0; k < K; ++k) {
                tau += a[static_cast<std::size_t>(k)][i] * sigma[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
            }
            double r = B[static_cast<std::size_t>(c)] * std::exp(-tau) * (1.0 - f[i]) +
                       Bc[static_cast<std::size_t>(c)] * f[i];
            if (cfg.noise > 0) r *= std::exp(cfg.noise * rng.normal());
            tile.data[static_cast<std::size_t>(c) * npix + i] = static_cast<float>(r);
        }
    }

    L2ProductSet set;
    set.id = id;
    set.h = H;
    set.w = W;
    set.products.resize(4);
    set.products[0].name = "no2";
    set.products[0].kind = NormKind::asinh;
    set.products[1].name = "o3";
    set.products[1].kind = NormKind::zscore;
    set.products[2].name = "hcho";
    set.products[2].kind = NormKind::asinh;
    set.products[3].name = "cloud";
    set.products[3].kind = NormKind::logit;
    for (auto& p : set.products) p.data.resize(npix);
    for (std::size_t i = 0; i < npix; ++i) {
        const double a1 = a[0][i], a2 = a[1][i], a3 = a[2][i];
        set.products[0].data[i] = static_cast<float>(1e15 * a1);
        // bounded rescale keeps the map inside a DU-like 200..500 range
        set.products[1].data[i] = static_cast<float>(200.0 + 300.0 * (a2 / (1.0 + a2)));
        set.products[2].data[i] = static_cast<float>(1e16 * a3);
        set.products[3].data[i] = static_cast<float>(f[i]);
    }
    if (cfg.nan_fraction > 0) {
        const float qnan = std::numeric_limits<float>::quiet_NaN();
        for (auto& p : set.products) {
            for (auto& v : p.data) {
                if (rng.uniform() < cfg.nan_fraction) v = qnan;
            }
        }
    }
    if (truth) {
        truth->continuum = std::move(B);
        truth->cloud_spectrum = std::move(Bc);
        truth->sigma = std::move(sigma);
        truth->fields = std::move(a);
        truth->cloud = std::move(f);
    }
    return {std::move(tile), std::move(set)};
}

} // namespace hsnc
