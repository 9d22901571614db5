#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsnc/errors.hpp"
#include "hsnc/types.hpp"

namespace hsnc {

enum class Direction { forward, inverse };

// Per-channel global statistics of log-radiance, fitted once over a file list
// and reused for every tile.
struct RadianceStats {
    std::vector<float> mu;
    std::vector<float> sigma;
    std::int64_t pixel_count = 0;
    std::vector<std::string> source_ids;
};

// One-pass Welford accumulation per channel over log(max(r, 1)). Population
// (biased) variance.
class RadianceStatsAccumulator {
public:
    void add(const HyperspectralTile& tile) {
        tile.validate();
        if (mean_.empty()) {
            mean_.assign(static_cast<std::size_t>(tile.C), 0.0);
            m2_.assign(static_cast<std::size_t>(tile.C), 0.0);
        } else if (static_cast<std::int64_t>(mean_.size()) != tile.C) {
            throw DataError("tile '" + tile.id + "' has " + std::to_string(tile.C) +
                            " channels, stats accumulator has " + std::to_string(mean_.size()));
        }
        const std::int64_t HW = tile.H * tile.W;
        for (std::int64_t c = 0; c < tile.C; ++c) {
            const float* p = tile.data.data() + c * HW;
            double mean = mean_[static_cast<std::size_t>(c)];
            double m2 = m2_[static_cast<std::size_t>(c)];
            std::int64_t n = pixels_;
            for (std::int64_t i = 0; i < HW; ++i) {
                const double v = std::log(std::max(static_cast<double>(p[i]), 1.0));
                ++n;
                const double d = v - mean;
                mean += d / static_cast<double>(n);
                m2 += d * (v - mean);
            }
            mean_[static_cast<std::size_t>(c)] = mean;
            m2_[static_cast<std::size_t>(c)] = m2;
        }
        pixels_ += HW;
        ids_.push_back(tile.id);
    }

    RadianceStats finish() const {
        if (pixels_ == 0) throw DataError("radiance stats require at least one tile");
        RadianceStats s;
        s.pixel_count = pixels_;
        s.source_ids = ids_;
        s.mu.reserve(mean_.size());
        s.sigma.reserve(mean_.size());
        for (std::size_t c = 0; c < mean_.size(); ++c) {
            s.mu.push_back(static_cast<float>(mean_[c]));
            s.sigma.push_back(static_cast<float>(std::sqrt(std::max(m2_[c], 0.0) / static_cast<double>(pixels_))));
        }
        return s;
    }

private:
    std::vector<double> mean_, m2_;
    std::int64_t pixels_ = 0;
    std::vector<std::string> ids_;
};

inline RadianceStats compute_radiance_stats(const std::vector<HyperspectralTile>& tiles) {
    RadianceStatsAccumulator acc;
    for (const auto& t : tiles) acc.add(t);
    return acc.finish();
}

// forward: z = clip((log(max(r,1)) - mu) / (sigma + 1e-8), -10, 10)
// inverse: r = exp(z * (sigma + 1e-8) + mu)
inline HyperspectralTile transform_radiance(const HyperspectralTile& tile, const RadianceStats& stats,
                                            Direction dir) {
    tile.validate();
    if (static_cast<std::int64_t>(stats.mu.size()) != tile.C) {
        throw DataError("tile '" + tile.id + "' has " + std::to_string(tile.C) +
                        " channels, stats have " + std::to_string(stats.mu.size()));
    }
    HyperspectralTile out = tile;
    out.space = dir == Direction::forward ? Space::normalized : Space::raw;
    const std::int64_t HW = tile.H * tile.W;
    for (std::int64_t c = 0; c < tile.C; ++c) {
        const double mu = stats.mu[static_cast<std::size_t>(c)];
        const double den = static_cast<double>(stats.sigma[static_cast<std::size_t>(c)]) + 1e-8;
        float* p = out.data.data() + c * HW;
        if (dir == Direction::forward) {
            for (std::int64_t i = 0; i < HW; ++i) {
                const double z = (std::log(std::max(static_cast<double>(p[i]), 1.0)) - mu) / den;
                p[i] = static_cast<float>(std::min(std::max(z, -10.0), 10.0));
            }
        } else {
            for (std::int64_t i = 0; i < HW; ++i)
                p[i] = static_cast<float>(std::exp(static_cast<double>(p[i]) * den + mu));
        }
    }
    return out;
}

// Normalizer for one derived product. asinh stores the MAD-based scale s,
// zscore stores mu/sigma, logit only its fixed squeeze epsilon. unit_scale is
// divided out before the asinh transform (e.g. 1e15 for column densities).
struct L2Normalizer {
    NormKind kind = NormKind::asinh;
    float s = 0.0f;
    float mu = 0.0f;
    float sigma = 0.0f;
    float epsilon = 0.01f;
    float unit_scale = 1.0f;
};

namespace detail {
inline double median_inplace(std::vector<double>& v) {
    const std::size_t n = v.size();
    const std::size_t mid = n / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double hi = v[mid];
    if (n % 2 == 1) return hi;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid - 1), v.end());
    return 0.5 * (v[mid - 1] + hi);
}
} // namespace detail

// Caller excludes NaNs. asinh: s = 1.4826 * MAD of unit-scaled values.
// zscore: mean and population std of the raw values. logit: parameterless.
inline L2Normalizer fit_l2_normalizer(const std::vector<float>& values, NormKind kind, float unit_scale) {
    if (unit_scale <= 0.0f) throw ConfigError("fit_l2_normalizer: unit_scale must be positive");
    L2Normalizer n;
    n.kind = kind;
    n.unit_scale = unit_scale;
    if (kind == NormKind::logit) return n;
    if (values.size() < 2) throw DataError("fit_l2_normalizer: need at least 2 values");
    for (float v : values)
        if (!std::isfinite(v)) throw DataError("fit_l2_normalizer: values must be finite");
    if (kind == NormKind::asinh) {
        std::vector<double> scaled(values.size());
        for (std::size_t i = 0; i < values.size(); ++i)
            scaled[i] = static_cast<double>(values[i]) / unit_scale;
        const double med = detail::median_inplace(scaled);
        for (auto& v : scaled) v = std::fabs(v - med);
        const double mad = detail::median_inplace(scaled);
        const double s = 1.4826 * mad;
        if (s <= 0.0) throw DomainError("fit_l2_normalizer: degenerate distribution, MAD = 0");
        n.s = static_cast<float>(s);
    } else {
        double sum = 0.0;
        for (float v : values) sum += v;
        const double mu = sum / static_cast<double>(values.size());
        double ss = 0.0;
        for (float v : values) ss += (v - mu) * (v - mu);
        const double sigma = std::sqrt(ss / static_cast<double>(values.size()));
        if (sigma <= 0.0) throw DomainError("fit_l2_normalizer: degenerate distribution, std = 0");
        n.mu = static_cast<float>(mu);
        n.sigma = static_cast<float>(sigma);
    }
    return n;
}

// Elementwise transform with NaN propagation in both directions.
// asinh:  y = asinh((x/unit_scale)/s)          x = s*sinh(y)*unit_scale
// zscore: y = (x-mu)/sigma                      x = y*sigma + mu
// logit:  y = ln(q/(1-q)), q = eps+(1-2*eps)*x  x = (1/(1+e^-y)-eps)/(1-2*eps)
inline std::vector<float> transform_l2(const std::vector<float>& x, const L2Normalizer& n, Direction dir) {
    std::vector<float> out(x.size());
    const double us = n.unit_scale;
    const double eps = n.epsilon;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        if (!std::isfinite(v)) {
            out[i] = std::nanf("");
            continue;
        }
        double y;
        switch (n.kind) {
            case NormKind::asinh:
                y = dir == Direction::forward ? std::asinh((v / us) / n.s)
                                              : static_cast<double>(n.s) * std::sinh(v) * us;
                break;
            case NormKind::zscore:
                y = dir == Direction::forward ? (v - n.mu) / n.sigma
                                              : v * static_cast<double>(n.sigma) + n.mu;
                break;
            case NormKind::logit:
                if (dir == Direction::forward) {
                    if (v < -1e-9 || v > 1.0 + 1e-9) {
                        throw DomainError("transform_l2: logit input " + std::to_string(v) +
                                          " outside [0,1]");
                    }
                    const double q = eps + (1.0 - 2.0 * eps) * std::min(std::max(v, 0.0), 1.0);
                    y = std::log(q / (1.0 - q));
                } else {
                    const double q = 1.0 / (1.0 + std::exp(-v));
                    y = (q - eps) / (1.0 - 2.0 * eps);
                }
                break;
            default:
                throw ConfigError("transform_l2: unknown kind");
        }
        out[i] = static_cast<float>(y);
    }
    return out;
}

// Block-mean downsampling over valid (non-NaN) pixels; all-invalid blocks
// stay NaN.
inline std::vector<float> pool_l2(const std::vector<float>& map, std::int64_t H, std::int64_t W,
                                  int factor = 4) {
    if (factor < 1) throw ConfigError("pool_l2: factor must be >= 1");
    if (H < 1 || W < 1 || static_cast<std::int64_t>(map.size()) != H * W) {
        throw DataError("pool_l2: map length " + std::to_string(map.size()) + " does not match " +
                        std::to_string(H) + "x" + std::to_string(W));
    }
    if (H % factor != 0 || W % factor != 0) {
        throw DataError("pool_l2: extents " + std::to_string(H) + "x" + std::to_string(W) +
                        " not divisible by factor " + std::to_string(factor));
    }
    const std::int64_t h = H / factor, w = W / factor;
    std::vector<float> out(static_cast<std::size_t>(h * w));
    for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t j = 0; j < w; ++j) {
            double sum = 0.0;
            int count = 0;
            for (std::int64_t di = 0; di < factor; ++di) {
                const float* row = map.data() + (i * factor + di) * W + j * factor;
                for (std::int64_t dj = 0; dj < factor; ++dj) {
                    if (std::isfinite(row[dj])) {
                        sum += row[dj];
                        ++count;
                    }
                }
            }
            out[static_cast<std::size_t>(i * w + j)] =
                count > 0 ? static_cast<float>(sum / count) : std::nanf("");
        }
    }
    return out;
}

// ---- JSON serialization ----

// A float printed with 9 significant decimal digits parses back to the
// identical binary32 value; stats arrays go through this so files stay
// readable while round-tripping bit-exact.
inline double json_f32(float v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return std::strtod(buf, nullptr);
}

inline nlohmann::json radiance_stats_to_json(const RadianceStats& s) {
    nlohmann::json j;
    j["version"] = 1;
    j["channels"] = s.mu.size();
    j["mu"] = nlohmann::json::array();
    j["sigma"] = nlohmann::json::array();
    for (float v : s.mu) j["mu"].push_back(json_f32(v));
    for (float v : s.sigma) j["sigma"].push_back(json_f32(v));
    j["pixel_count"] = s.pixel_count;
    j["source_ids"] = s.source_ids;
    return j;
}

inline RadianceStats radiance_stats_from_json(const nlohmann::json& j) {
    try {
        if (j.at("version").get<int>() != 1) throw FormatError("unsupported stats version");
        RadianceStats s;
        const auto channels = j.at("channels").get<std::size_t>();
        for (const auto& v : j.at("mu")) s.mu.push_back(static_cast<float>(v.get<double>()));
        for (const auto& v : j.at("sigma")) s.sigma.push_back(static_cast<float>(v.get<double>()));
        if (s.mu.size() != channels || s.sigma.size() != channels) {
            throw FormatError("stats arrays do not match declared channel count " + std::to_string(channels));
        }
        s.pixel_count = j.at("pixel_count").get<std::int64_t>();
        if (j.contains("source_ids"))
            for (const auto& v : j.at("source_ids")) s.source_ids.push_back(v.get<std::string>());
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed stats JSON: ") + e.what());
    }
}

inline nlohmann::json l2_normalizer_to_json(const std::string& product, const L2Normalizer& n) {
    nlohmann::json j;
    j["product"] = product;
    j["kind"] = norm_kind_name(n.kind);
    j["unit_scale"] = json_f32(n.unit_scale);
    nlohmann::json params;
    switch (n.kind) {
        case NormKind::asinh: params["s"] = json_f32(n.s); break;
        case NormKind::zscore:
            params["mu"] = json_f32(n.mu);
            params["sigma"] = json_f32(n.sigma);
            break;
        case NormKind::logit: params["epsilon"] = json_f32(n.epsilon); break;
    }
    j["params"] = params;
    return j;
}

inline std::pair<std::string, L2Normalizer> l2_normalizer_from_json(const nlohmann::json& j) {
    try {
        L2Normalizer n;
        n.kind = norm_kind_from_name(j.at("kind").get<std::string>());
        n.unit_scale = static_cast<float>(j.at("unit_scale").get<double>());
        const auto& p = j.at("params");
        switch (n.kind) {
            case NormKind::asinh: n.s = static_cast<float>(p.at("s").get<double>()); break;
            case NormKind::zscore:
                n.mu = static_cast<float>(p.at("mu").get<double>());
                n.sigma = static_cast<float>(p.at("sigma").get<double>());
                break;
            case NormKind::logit: n.epsilon = static_cast<float>(p.at("epsilon").get<double>()); break;
        }
        return {j.at("product").get<std::string>(), n};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed normalizer JSON: ") + e.what());
    }
}

} // namespace hsnc
