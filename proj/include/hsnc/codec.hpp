#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsnc/binio.hpp"
#include "hsnc/dataio.hpp"
#include "hsnc/errors.hpp"
#include "hsnc/normalize.hpp"
#include "hsnc/tensor.hpp"
#include "hsnc/types.hpp"
#include "hsnc/vae.hpp"

namespace hsnc {

inline constexpr char kLatentMagic[8] = {'H', 'S', 'L', 'A', 'T', '0', '1', '\0'};

enum class LatentDtype : std::uint8_t { f32 = 0, f16 = 1 };
enum class LatentContent : std::uint8_t { mean_only = 0, mean_logvar = 1 };

inline const char* latent_dtype_name(LatentDtype d) { return d == LatentDtype::f32 ? "f32" : "f16"; }
inline const char* latent_content_name(LatentContent c) {
    return c == LatentContent::mean_only ? "mean" : "mean_logvar";
}

struct LatentCode {
    std::string id;
    std::int64_t c = 0, h = 0, w = 0;
    LatentDtype dtype = LatentDtype::f32;
    LatentContent content = LatentContent::mean_only;
    std::vector<float> mean;   // [c][h][w]
    std::vector<float> logvar; // same layout, empty unless mean_logvar

    std::int64_t plane() const { return c * h * w; }

    void validate() const {
        if (c < 1 || h < 1 || w < 1) {
            throw DataError("latent '" + id + "': extents must be >= 1, got c=" + std::to_string(c) +
                            " h=" + std::to_string(h) + " w=" + std::to_string(w));
        }
        if (static_cast<std::int64_t>(mean.size()) != plane()) {
            throw DataError("latent '" + id + "': mean length " + std::to_string(mean.size()) +
                            " does not match c*h*w = " + std::to_string(plane()));
        }
        const std::size_t want_lv =
            content == LatentContent::mean_logvar ? static_cast<std::size_t>(plane()) : 0;
        if (logvar.size() != want_lv) {
            throw DataError("latent '" + id + "': logvar length " + std::to_string(logvar.size()) +
                            " does not match content " + latent_content_name(content));
        }
    }
};

namespace detail {

inline void write_latent_plane(std::ostream& os, const std::vector<float>& v, LatentDtype dtype) {
    if (dtype == LatentDtype::f32) {
        for (float x : v) write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(x));
    } else {
        for (float x : v) write_le<std::uint16_t>(os, float_to_half(x));
    }
}

inline std::vector<float> read_latent_plane(std::istream& is, std::int64_t n, LatentDtype dtype,
                                            const char* what) {
    std::vector<float> out(static_cast<std::size_t>(n));
    if (dtype == LatentDtype::f32) {
        std::vector<std::uint32_t> raw(out.size());
        read_bytes(is, raw.data(), out.size() * 4, what);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(raw[i]);
    } else {
        std::vector<std::uint16_t> raw(out.size());
        read_bytes(is, raw.data(), out.size() * 2, what);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = half_to_float(raw[i]);
    }
    return out;
}

} // namespace detail

inline void write_latent(std::ostream& os, const LatentCode& code) {
    code.validate();
    write_magic(os, kLatentMagic);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(code.c));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(code.h));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(code.w));
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(code.dtype));
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(code.content));
    write_le<std::uint8_t>(os, 0);
    write_le<std::uint8_t>(os, 0);
    detail::write_latent_plane(os, code.mean, code.dtype);
    if (code.content == LatentContent::mean_logvar) {
        detail::write_latent_plane(os, code.logvar, code.dtype);
    }
    if (!os) throw DataError("failed writing latent '" + code.id + "'");
}

inline LatentCode read_latent(std::istream& is) {
    expect_magic(is, kLatentMagic, "HSLAT01 latent");
    LatentCode code;
    const auto c = read_le<std::uint32_t>(is, "latent channel count");
    const auto h = read_le<std::uint32_t>(is, "latent height");
    const auto w = read_le<std::uint32_t>(is, "latent width");
    detail::check_extent(c, "latent channel count", 8);
    detail::check_extent(h, "latent height", 12);
    detail::check_extent(w, "latent width", 16);
    code.c = c;
    code.h = h;
    code.w = w;
    const auto dtype = read_le<std::uint8_t>(is, "latent dtype");
    if (dtype > 1) {
        throw FormatError("unsupported dtype byte " + std::to_string(dtype) +
                          " at offset 20 (0=f32, 1=f16)");
    }
    code.dtype = static_cast<LatentDtype>(dtype);
    const auto content = read_le<std::uint8_t>(is, "latent content");
    if (content > 1) {
        throw FormatError("unsupported content byte " + std::to_string(content) +
                          " at offset 21 (0=mean, 1=mean+logvar)");
    }
    code.content = static_cast<LatentContent>(content);
    const auto r0 = read_le<std::uint8_t>(is, "reserved header byte");
    const auto r1 = read_le<std::uint8_t>(is, "reserved header byte");
    if (r0 != 0 || r1 != 0) {
        throw FormatError("reserved header bytes must be zero at offset 22");
    }
    const std::int64_t n = code.plane();
    if (n > (std::int64_t{1} << 30)) {
        throw FormatError("latent payload of " + std::to_string(n) + " elements is implausibly large");
    }
    code.mean = detail::read_latent_plane(is, n, code.dtype, "latent mean payload");
    if (code.content == LatentContent::mean_logvar) {
        code.logvar = detail::read_latent_plane(is, n, code.dtype, "latent logvar payload");
    }
    return code;
}

inline void write_latent(const std::filesystem::path& path, const LatentCode& code) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
    write_latent(os, code);
}

inline LatentCode read_latent(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path.string() + "' for reading");
    try {
        LatentCode code = read_latent(is);
        code.id = detail::path_stem(path.string());
        return code;
    } catch (const FormatError& e) {
        throw FormatError(std::string(e.what()) + " in '" + path.string() + "'");
    }
}

// ---------------------------------------------------------------------------
// Compression pipeline.
// ---------------------------------------------------------------------------

struct CodecOptions {
    LatentDtype dtype = LatentDtype::f32;
    LatentContent content = LatentContent::mean_only;
};

namespace detail {

// Quantizing at compress time keeps the in-memory code identical to what a
// write/read cycle would produce.
inline void quantize_half(std::vector<float>& v) {
    for (auto& x : v) x = half_to_float(float_to_half(x));
}

} // namespace detail

inline LatentCode compress(const HyperspectralTile& tile, const RadianceStats& stats,
                           const VaeParams& params, const VaeConfig& cfg, CodecOptions opts = {}) {
    tile.validate();
    if (tile.space != Space::raw) {
        throw DataError("compress expects a raw-space tile, got '" + tile.id + "' already normalized");
    }
    if (tile.C != cfg.in_channels || tile.H != cfg.tile || tile.W != cfg.tile) {
        throw DataError("tile '" + tile.id + "' is " + std::to_string(tile.C) + "x" +
                        std::to_string(tile.H) + "x" + std::to_string(tile.W) + ", model expects " +
                        std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.tile) + "x" +
                        std::to_string(cfg.tile));
    }
    const HyperspectralTile norm = transform_radiance(tile, stats, Direction::forward);

    Tensor x({1, cfg.in_channels, cfg.tile, cfg.tile});
    std::copy(norm.data.begin(), norm.data.end(), x.vec().begin());
    Graph g(false);
    const GaussianLatent lat = encode(g, x, params, cfg);

    LatentCode code;
    code.id = tile.id;
    code.c = cfg.latent_channels;
    code.h = cfg.latent_hw();
    code.w = cfg.latent_hw();
    code.dtype = opts.dtype;
    code.content = opts.content;
    code.mean = lat.mu.vec();
    if (opts.content == LatentContent::mean_logvar) code.logvar = lat.logvar.vec();
    if (opts.dtype == LatentDtype::f16) {
        detail::quantize_half(code.mean);
        detail::quantize_half(code.logvar);
    }
    return code;
}

inline HyperspectralTile decompress(const LatentCode& code, const RadianceStats& stats,
                                    const VaeParams& params, const VaeConfig& cfg) {
    code.validate();
    if (code.c != cfg.latent_channels || code.h != cfg.latent_hw() || code.w != cfg.latent_hw()) {
        throw DataError("latent '" + code.id + "' is " + std::to_string(code.c) + "x" +
                        std::to_string(code.h) + "x" + std::to_string(code.w) + ", model expects " +
                        std::to_string(cfg.latent_channels) + "x" + std::to_string(cfg.latent_hw()) +
                        "x" + std::to_string(cfg.latent_hw()));
    }
    Tensor mu({1, code.c, code.h, code.w});
    std::copy(code.mean.begin(), code.mean.end(), mu.vec().begin());
    Graph g(false);
    const Tensor xhat = decode(g, mu, params, cfg);

    HyperspectralTile norm;
    norm.id = code.id;
    norm.C = cfg.in_channels;
    norm.H = cfg.tile;
    norm.W = cfg.tile;
    norm.space = Space::normalized;
    norm.data = xhat.vec();
    return transform_radiance(norm, stats, Direction::inverse);
}

// Element-count ratio: pure config arithmetic, independent of dtype.
inline double compression_ratio(std::int64_t C, std::int64_t H, std::int64_t W,
                                const LatentCode& code) {
    if (C < 1 || H < 1 || W < 1) throw UsageError("compression_ratio: input extents must be >= 1");
    const std::int64_t mult = code.content == LatentContent::mean_logvar ? 2 : 1;
    return static_cast<double>(C * H * W) / static_cast<double>(code.plane() * mult);
}

// Payload-byte ratio: f32 input elements against stored payload width.
inline double byte_compression_ratio(std::int64_t C, std::int64_t H, std::int64_t W,
                                     const LatentCode& code) {
    if (C < 1 || H < 1 || W < 1) throw UsageError("compression_ratio: input extents must be >= 1");
    const std::int64_t mult = code.content == LatentContent::mean_logvar ? 2 : 1;
    const std::int64_t width = code.dtype == LatentDtype::f16 ? 2 : 4;
    return static_cast<double>(C * H * W * 4) / static_cast<double>(code.plane() * mult * width);
}

// ---------------------------------------------------------------------------
// Reconstruction quality report.
// ---------------------------------------------------------------------------

struct ReconReport {
    std::vector<float> rmse_normalized; // [C]
    std::vector<float> rmse_physical;   // [C]
    std::vector<float> spectrum_mean;   // [C] mean physical radiance of originals
    std::vector<float> spectrum_std;    // [C] for +-1 std bands
    struct PixelMse {
        std::string tile_id;
        std::int64_t H = 0, W = 0;
        std::vector<float> map; // normalized-space MSE, mean over channels
    };
    std::vector<PixelMse> pixel_mse;
    double compression_ratio = 0.0;
    double byte_ratio = 0.0;
    std::int64_t tiles = 0;
};

inline ReconReport eval_reconstruction(const std::vector<HyperspectralTile>& orig,
                                       const std::vector<HyperspectralTile>& recon,
                                       const RadianceStats& stats) {
    if (orig.empty() || orig.size() != recon.size()) {
        throw DataError("eval_reconstruction: " + std::to_string(orig.size()) + " originals vs " +
                        std::to_string(recon.size()) + " reconstructions");
    }
    const std::int64_t C = orig[0].C;
    ReconReport rep;
    rep.tiles = static_cast<std::int64_t>(orig.size());

    std::vector<double> se_norm(static_cast<std::size_t>(C), 0.0);
    std::vector<double> se_phys(static_cast<std::size_t>(C), 0.0);
    std::vector<double> sum_phys(static_cast<std::size_t>(C), 0.0);
    std::vector<double> sumsq_phys(static_cast<std::size_t>(C), 0.0);
    std::int64_t pixels = 0;

    for (std::size_t t = 0; t < orig.size(); ++t) {
        const auto& a = orig[t];
        const auto& b = recon[t];
        a.validate();
        b.validate();
        if (a.C != C || b.C != a.C || b.H != a.H || b.W != a.W) {
            throw DataError("tile '" + a.id + "': shape mismatch between original and reconstruction");
        }
        if (a.space != Space::raw || b.space != Space::raw) {
            throw DataError("eval_reconstruction expects raw-space tiles (tile '" + a.id + "')");
        }
        const auto an = transform_radiance(a, stats, Direction::forward);
        const auto bn = transform_radiance(b, stats, Direction::forward);
        const std::int64_t hw = a.H * a.W;
        pixels += hw;

        ReconReport::PixelMse pm;
        pm.tile_id = a.id;
        pm.H = a.H;
        pm.W = a.W;
        pm.map.assign(static_cast<std::size_t>(hw), 0.0f);
        for (std::int64_t ch = 0; ch < C; ++ch) {
            const float* ar = a.data.data() + ch * hw;
            const float* br = b.data.data() + ch * hw;
            const float* anr = an.data.data() + ch * hw;
            const float* bnr = bn.data.data() + ch * hw;
            double sn = 0.0, sp = 0.0, s1 = 0.0, s2 = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) {
                const double dn = static_cast<double>(anr[i]) - bnr[i];
                const double dp = static_cast<double>(ar[i]) - br[i];
                sn += dn * dn;
                sp += dp * dp;
                s1 += ar[i];
                s2 += static_cast<double>(ar[i]) * ar[i];
                pm.map[static_cast<std::size_t>(i)] += static_cast<float>(dn * dn / C);
            }
            se_norm[static_cast<std::size_t>(ch)] += sn;
            se_phys[static_cast<std::size_t>(ch)] += sp;
            sum_phys[static_cast<std::size_t>(ch)] += s1;
            sumsq_phys[static_cast<std::size_t>(ch)] += s2;
        }
        rep.pixel_mse.push_back(std::move(pm));
    }

    rep.rmse_normalized.resize(static_cast<std::size_t>(C));
    rep.rmse_physical.resize(static_cast<std::size_t>(C));
    rep.spectrum_mean.resize(static_cast<std::size_t>(C));
    rep.spectrum_std.resize(static_cast<std::size_t>(C));
    for (std::int64_t ch = 0; ch < C; ++ch) {
        const auto i = static_cast<std::size_t>(ch);
        rep.rmse_normalized[i] = static_cast<float>(std::sqrt(se_norm[i] / pixels));
        rep.rmse_physical[i] = static_cast<float>(std::sqrt(se_phys[i] / pixels));
        const double mean = sum_phys[i] / pixels;
        rep.spectrum_mean[i] = static_cast<float>(mean);
        rep.spectrum_std[i] =
            static_cast<float>(std::sqrt(std::max(0.0, sumsq_phys[i] / pixels - mean * mean)));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Report emission: rmse_per_channel.csv, pixel_mse_<tile>.csv, summary.json.
// ---------------------------------------------------------------------------

inline void write_recon_report(const ReconReport& rep, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "rmse_per_channel.csv");
        if (!os) throw DataError("cannot open '" + (dir / "rmse_per_channel.csv").string() + "'");
        os << "channel,rmse_normalized,rmse_physical,spectrum_mean,spectrum_std\n";
        os << std::setprecision(9);
        for (std::size_t ch = 0; ch < rep.rmse_normalized.size(); ++ch) {
            os << ch << ',' << rep.rmse_normalized[ch] << ',' << rep.rmse_physical[ch] << ','
               << rep.spectrum_mean[ch] << ',' << rep.spectrum_std[ch] << '\n';
        }
    }
    for (const auto& pm : rep.pixel_mse) {
        const auto path = dir / ("pixel_mse_" + pm.tile_id + ".csv");
        std::ofstream os(path);
        if (!os) throw DataError("cannot open '" + path.string() + "'");
        os << std::setprecision(9);
        for (std::int64_t y = 0; y < pm.H; ++y) {
            for (std::int64_t x = 0; x < pm.W; ++x) {
                os << pm.map[static_cast<std::size_t>(y * pm.W + x)] << (x + 1 < pm.W ? ',' : '\n');
            }
        }
    }
    {
        nlohmann::json j;
        j["tiles"] = rep.tiles;
        j["channels"] = rep.rmse_normalized.size();
        j["compression_ratio"] = rep.compression_ratio;
        j["byte_ratio"] = rep.byte_ratio;
        double mn = 0.0, mp = 0.0;
        for (std::size_t ch = 0; ch < rep.rmse_normalized.size(); ++ch) {
            mn += rep.rmse_normalized[ch];
            mp += rep.rmse_physical[ch];
        }
        j["mean_rmse_normalized"] = mn / std::max<std::size_t>(1, rep.rmse_normalized.size());
        j["mean_rmse_physical"] = mp / std::max<std::size_t>(1, rep.rmse_physical.size());
        std::ofstream os(dir / "summary.json");
        if (!os) throw DataError("cannot open '" + (dir / "summary.json").string() + "'");
        os << j.dump(2) << '\n';
    }
}

} // namespace hsnc
