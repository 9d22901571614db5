#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsnc/binio.hpp"
#include "hsnc/dataio.hpp"
#include "hsnc/errors.hpp"
#include "hsnc/normalize.hpp"
#include "hsnc/rng.hpp"
#include "hsnc/tensor.hpp"
#include "hsnc/vae.hpp"

namespace hsnc {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

// ---------------------------------------------------------------------------
// Optimizer: AdamW with decoupled weight decay applied to every parameter,
// including norm scales, biases, and log_s2.
// ---------------------------------------------------------------------------

struct TrainConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float weight_decay = 0.05f;
    float adam_eps = 1e-8f;
    float clip_norm = 1.0f;
    std::int64_t steps = 200000;
    std::int64_t batch = 32;
    std::int64_t val_every = 50;
    std::int64_t ckpt_every = 5000;
    std::uint64_t seed = 42;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("train: lr must be positive");
        if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
            throw ConfigError("train: betas must be in (0,1)");
        }
        if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
        if (!(adam_eps > 0)) throw ConfigError("train: adam_eps must be positive");
        if (!(clip_norm > 0)) throw ConfigError("train: clip_norm must be positive");
        if (steps < 0) throw ConfigError("train: steps must be >= 0");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
        if (val_every < 1) throw ConfigError("train: val_every must be >= 1");
        if (ckpt_every < 1) throw ConfigError("train: ckpt_every must be >= 1");
    }
};

struct OptimState {
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    std::uint64_t t = 0;

    void init(const ParamList& params) {
        m.clear();
        v.clear();
        t = 0;
        for (const auto& [name, p] : params) {
            m.emplace_back(p.vec().size(), 0.0f);
            v.emplace_back(p.vec().size(), 0.0f);
        }
    }
};

// Scales all gradients in place by min(1, max_norm/||g||) over the joint
// global norm. Returns the applied scale.
inline float clip_grad_norm(ParamList& params, float max_norm) {
    double sumsq = 0.0;
    for (auto& [name, p] : params) {
        for (float gv : p.grad_vec()) {
            if (!std::isfinite(gv)) {
                throw TrainingFault("non-finite gradient in parameter '" + name + "'");
            }
            sumsq += static_cast<double>(gv) * gv;
        }
    }
    const double norm = std::sqrt(sumsq);
    const float scale = norm > max_norm ? static_cast<float>(max_norm / norm) : 1.0f;
    if (scale != 1.0f) {
        for (auto& [name, p] : params) {
            for (float& gv : p.grad_vec()) gv *= scale;
        }
    }
    return scale;
}

inline void adamw_step(ParamList& params, OptimState& st, const TrainConfig& cfg) {
    if (st.m.size() != params.size()) {
        throw UsageError("adamw_step: optimizer state tracks " + std::to_string(st.m.size()) +
                         " parameters, model has " + std::to_string(params.size()));
    }
    st.t += 1;
    const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(st.t));
    const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].second;
        auto& theta = p.vec();
        const auto& grad = p.grad_vec();
        auto& m = st.m[i];
        auto& v = st.v[i];
        if (m.size() != theta.size()) {
            throw UsageError("adamw_step: state shape mismatch for '" + params[i].first + "'");
        }
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const float g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0f - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0f - cfg.beta2) * g * g;
            const float mhat = m[j] / bc1;
            const float vhat = v[j] / bc2;
            theta[j] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * theta[j]);
        }
    }
}

// ---------------------------------------------------------------------------
// Config JSON.
// ---------------------------------------------------------------------------

inline nlohmann::json vae_config_to_json(const VaeConfig& c) {
    return nlohmann::json{
        {"in_channels", c.in_channels},
        {"tile", c.tile},
        {"enc_channels", c.enc_channels},
        {"n_down", c.n_down},
        {"latent_channels", c.latent_channels},
        {"attn_heads", c.attn_heads},
        {"groups", c.groups},
        {"gn_eps", c.gn_eps},
        {"kl_weight", c.kl_weight},
        {"log_s2_init", c.log_s2_init},
        {"logvar_clamp", {c.logvar_lo, c.logvar_hi}},
        {"supervised", c.supervised},
        {"head_products", c.head_products},
    };
}

inline VaeConfig vae_config_from_json(const nlohmann::json& j) {
    try {
        VaeConfig c;
        c.in_channels = j.value("in_channels", c.in_channels);
        c.tile = j.value("tile", c.tile);
        c.enc_channels = j.value("enc_channels", c.enc_channels);
        c.n_down = j.value("n_down", c.n_down);
        c.latent_channels = j.value("latent_channels", c.latent_channels);
        c.attn_heads = j.value("attn_heads", c.attn_heads);
        c.groups = j.value("groups", c.groups);
        c.gn_eps = j.value("gn_eps", c.gn_eps);
        c.kl_weight = j.value("kl_weight", c.kl_weight);
        c.log_s2_init = j.value("log_s2_init", c.log_s2_init);
        if (j.contains("logvar_clamp")) {
            c.logvar_lo = j.at("logvar_clamp").at(0).get<float>();
            c.logvar_hi = j.at("logvar_clamp").at(1).get<float>();
        }
        c.supervised = j.value("supervised", c.supervised);
        c.head_products = j.value("head_products", c.head_products);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed vae config JSON: ") + e.what());
    }
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return nlohmann::json{
        {"lr", c.lr},           {"beta1", c.beta1},
        {"beta2", c.beta2},     {"weight_decay", c.weight_decay},
        {"adam_eps", c.adam_eps}, {"clip_norm", c.clip_norm},
        {"steps", c.steps},     {"batch", c.batch},
        {"val_every", c.val_every}, {"ckpt_every", c.ckpt_every},
        {"seed", c.seed},
    };
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    try {
        TrainConfig c;
        c.lr = j.value("lr", c.lr);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        c.steps = j.value("steps", c.steps);
        c.batch = j.value("batch", c.batch);
        c.val_every = j.value("val_every", c.val_every);
        c.ckpt_every = j.value("ckpt_every", c.ckpt_every);
        c.seed = j.value("seed", c.seed);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed train config JSON: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Data plumbing: tiles live on disk as raw HSTILE01 files and are normalized
// with the run's radiance stats on first load. Supervised targets are the
// per-product normalized maps pooled down to latent resolution.
// ---------------------------------------------------------------------------

struct TrainDataConfig {
    std::string tile_dir;
    std::string l2_dir;           // only read when supervised
    std::string stats_path;       // radiance stats JSON
    std::string normalizers_path; // L2 normalizer JSON, supervised only
    int train_pct = 70;
    std::int64_t train_buffer = 500;
    std::int64_t val_tiles = 100;
};

inline nlohmann::json data_config_to_json(const TrainDataConfig& c) {
    return nlohmann::json{
        {"tile_dir", c.tile_dir},   {"l2_dir", c.l2_dir},
        {"stats_path", c.stats_path}, {"normalizers_path", c.normalizers_path},
        {"train_pct", c.train_pct}, {"train_buffer", c.train_buffer},
        {"val_tiles", c.val_tiles},
    };
}

inline TrainDataConfig data_config_from_json(const nlohmann::json& j) {
    try {
        TrainDataConfig c;
        c.tile_dir = j.value("tile_dir", c.tile_dir);
        c.l2_dir = j.value("l2_dir", c.l2_dir);
        c.stats_path = j.value("stats_path", c.stats_path);
        c.normalizers_path = j.value("normalizers_path", c.normalizers_path);
        c.train_pct = j.value("train_pct", c.train_pct);
        c.train_buffer = j.value("train_buffer", c.train_buffer);
        c.val_tiles = j.value("val_tiles", c.val_tiles);
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed data config JSON: ") + e.what());
    }
}

inline std::vector<std::string> list_tile_ids(const std::string& dir) {
    std::vector<std::string> ids;
    if (!std::filesystem::is_directory(dir)) {
        throw DataError("tile directory '" + dir + "' does not exist");
    }
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".hst") {
            ids.push_back(e.path().stem().string());
        }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

class TileStore {
public:
    // target_products defaults to the supervision heads; probe code passes
    // its own product list.
    TileStore(const VaeConfig& vcfg, TrainDataConfig data, RadianceStats stats,
              std::vector<std::pair<std::string, L2Normalizer>> normalizers,
              std::vector<std::string> target_products = {})
        : vcfg_(vcfg), data_(std::move(data)), stats_(std::move(stats)),
          normalizers_(std::move(normalizers)),
          products_(target_products.empty() ? vcfg.head_products : std::move(target_products)) {}

    const std::vector<std::string>& products() const { return products_; }

    // Normalized pixels of one tile, length C*H*W.
    const std::vector<float>& normalized(const std::string& id) {
        auto it = cache_.find(id);
        if (it != cache_.end()) return it->second;
        HyperspectralTile tile = read_tile(data_.tile_dir + "/" + id + ".hst");
        if (tile.C != vcfg_.in_channels || tile.H != vcfg_.tile || tile.W != vcfg_.tile) {
            throw DataError("tile '" + id + "' is [" + std::to_string(tile.C) + "," +
                            std::to_string(tile.H) + "," + std::to_string(tile.W) +
                            "], model expects [" + std::to_string(vcfg_.in_channels) + "," +
                            std::to_string(vcfg_.tile) + "," + std::to_string(vcfg_.tile) + "]");
        }
        if (tile.space == Space::raw) tile = transform_radiance(tile, stats_, Direction::forward);
        return cache_.emplace(id, std::move(tile.data)).first->second;
    }

    // Normalized, pooled target maps in cfg.head_products order, each h*w at
    // latent resolution.
    const std::vector<std::vector<float>>& targets(const std::string& id) {
        auto it = target_cache_.find(id);
        if (it != target_cache_.end()) return it->second;
        const L2ProductSet set = read_products(data_.l2_dir + "/" + id + ".hsl2");
        const std::int64_t factor = vcfg_.tile / vcfg_.latent_hw();
        std::vector<std::vector<float>> maps;
        maps.reserve(products_.size());
        for (const auto& name : products_) {
            const L2Product& prod = set.find(name);
            const L2Normalizer* norm = nullptr;
            for (const auto& [n, nm] : normalizers_) {
                if (n == name) norm = &nm;
            }
            if (!norm) throw ConfigError("no normalizer fitted for product '" + name + "'");
            const auto normed = transform_l2(prod.data, *norm, Direction::forward);
            maps.push_back(pool_l2(normed, set.h, set.w, factor));
        }
        return target_cache_.emplace(id, std::move(maps)).first->second;
    }

private:
    VaeConfig vcfg_;
    TrainDataConfig data_;
    RadianceStats stats_;
    std::vector<std::pair<std::string, L2Normalizer>> normalizers_;
    std::vector<std::string> products_;
    std::unordered_map<std::string, std::vector<float>> cache_;
    std::unordered_map<std::string, std::vector<std::vector<float>>> target_cache_;
};

// ---------------------------------------------------------------------------
// Checkpoints: everything the loop state depends on, so a resumed run replays
// bit-for-bit.
// ---------------------------------------------------------------------------

inline constexpr char kCkptMagic[8] = {'H', 'S', 'N', 'C', 'C', 'K', 'P', '1'};

struct Checkpoint {
    VaeConfig vae_cfg;
    TrainConfig train_cfg;
    VaeParams params;
    OptimState opt;
    Rng model_rng{0};
    SampleBuffer buffer;
    std::vector<std::string> val_ids;
    std::uint64_t step = 0;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    write_magic(os, kCkptMagic);
    write_le<std::uint32_t>(os, 1);
    const std::string cfg_blob =
        nlohmann::json{{"vae", vae_config_to_json(ck.vae_cfg)},
                       {"train", train_config_to_json(ck.train_cfg)}}
            .dump();
    write_string_u32(os, cfg_blob);
    write_le<std::uint64_t>(os, ck.step);

    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.params.named.size()));
    for (const auto& [name, t] : ck.params.named) {
        write_string_u32(os, name);
        write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) write_le<std::int64_t>(os, t.dim(d));
        write_bytes(os, t.vec().data(), t.vec().size() * sizeof(float));
    }

    write_le<std::uint64_t>(os, ck.opt.t);
    if (ck.opt.m.size() != ck.params.named.size()) {
        throw UsageError("save_checkpoint: optimizer state does not match parameter list");
    }
    for (std::size_t i = 0; i < ck.opt.m.size(); ++i) {
        write_bytes(os, ck.opt.m[i].data(), ck.opt.m[i].size() * sizeof(float));
        write_bytes(os, ck.opt.v[i].data(), ck.opt.v[i].size() * sizeof(float));
    }

    write_le<std::uint64_t>(os, ck.model_rng.key());
    write_le<std::uint64_t>(os, ck.model_rng.counter());
    ck.buffer.save(os);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.val_ids.size()));
    for (const auto& id : ck.val_ids) write_string_u32(os, id);
    os.flush();
    if (!os) throw DataError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint '" + path + "'");
    expect_magic(is, kCkptMagic, "HSNCCKP1");
    const auto version = read_le<std::uint32_t>(is, "checkpoint version");
    if (version != 1) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    const std::string cfg_blob = read_string_u32(is, "checkpoint config");
    try {
        const auto j = nlohmann::json::parse(cfg_blob);
        ck.vae_cfg = vae_config_from_json(j.at("vae"));
        ck.train_cfg = train_config_from_json(j.at("train"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed checkpoint config: ") + e.what());
    }
    ck.step = read_le<std::uint64_t>(is, "checkpoint step");

    const auto nparams = read_le<std::uint32_t>(is, "parameter count");
    if (nparams > (1u << 20)) throw FormatError("implausible parameter count");
    ck.params.named.reserve(nparams);
    for (std::uint32_t i = 0; i < nparams; ++i) {
        std::string name = read_string_u32(is, "parameter name");
        const auto rank = read_le<std::uint32_t>(is, "parameter rank");
        if (rank > 8) throw FormatError("implausible parameter rank");
        std::vector<std::int64_t> shape(rank);
        for (auto& d : shape) d = read_le<std::int64_t>(is, "parameter dim");
        Tensor t(shape, true);
        read_bytes(is, t.vec().data(), t.vec().size() * sizeof(float), "parameter data");
        ck.params.named.emplace_back(std::move(name), std::move(t));
    }

    ck.opt.t = read_le<std::uint64_t>(is, "optimizer step");
    ck.opt.m.resize(nparams);
    ck.opt.v.resize(nparams);
    for (std::uint32_t i = 0; i < nparams; ++i) {
        const std::size_t n = ck.params.named[i].second.vec().size();
        ck.opt.m[i].resize(n);
        ck.opt.v[i].resize(n);
        read_bytes(is, ck.opt.m[i].data(), n * sizeof(float), "optimizer m");
        read_bytes(is, ck.opt.v[i].data(), n * sizeof(float), "optimizer v");
    }

    const auto key = read_le<std::uint64_t>(is, "model rng key");
    const auto counter = read_le<std::uint64_t>(is, "model rng counter");
    ck.model_rng = Rng::restore(key, counter);
    ck.buffer = SampleBuffer::load(is);
    const auto nval = read_le<std::uint32_t>(is, "val id count");
    if (nval > (1u << 24)) throw FormatError("implausible val id count");
    ck.val_ids.resize(nval);
    for (auto& id : ck.val_ids) id = read_string_u32(is, "val id");
    return ck;
}

// ---------------------------------------------------------------------------
// Validation: eval mode (z = mu), means over the whole set, pure.
// ---------------------------------------------------------------------------

struct EvalMetrics {
    double rec = 0.0;
    double nll = 0.0;
    double kl = 0.0;
    double total = 0.0;
    std::vector<std::pair<std::string, double>> mse; // supervised heads
};

inline EvalMetrics validate(const VaeParams& params, const VaeConfig& cfg,
                            const std::vector<std::string>& val_ids, TileStore& store,
                            std::int64_t batch) {
    if (val_ids.empty()) throw UsageError("validate: empty validation set");
    const std::int64_t C = cfg.in_channels, T = cfg.tile, hw = cfg.latent_hw();
    EvalMetrics out;
    for (const auto& name : cfg.head_products) out.mse.emplace_back(name, 0.0);

    std::size_t done = 0;
    while (done < val_ids.size()) {
        const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(batch),
                                                       val_ids.size() - done);
        Tensor xb({static_cast<std::int64_t>(take), C, T, T});
        for (std::size_t b = 0; b < take; ++b) {
            const auto& px = store.normalized(val_ids[done + b]);
            std::copy(px.begin(), px.end(), xb.vec().begin() + static_cast<std::ptrdiff_t>(b * px.size()));
        }
        Graph g(false);
        auto lat = encode(g, xb, params, cfg);
        auto xhat = decode(g, lat.mu, params, cfg);
        auto losses = compute_losses(g, xb, xhat, lat, params, cfg);
        const double w = static_cast<double>(take) / static_cast<double>(val_ids.size());
        out.rec += w * losses.rec.item();
        out.nll += w * losses.nll.item();
        out.kl += w * losses.kl.item();
        out.total += w * losses.total.item();
        if (cfg.supervised) {
            auto preds = supervised_forward(g, lat, params, cfg);
            std::vector<std::pair<std::string, Tensor>> tgts;
            for (std::size_t pi = 0; pi < cfg.head_products.size(); ++pi) {
                Tensor t({static_cast<std::int64_t>(take), 1, hw, hw});
                for (std::size_t b = 0; b < take; ++b) {
                    const auto& maps = store.targets(val_ids[done + b]);
                    std::copy(maps[pi].begin(), maps[pi].end(),
                              t.vec().begin() + static_cast<std::ptrdiff_t>(b * maps[pi].size()));
                }
                tgts.emplace_back(cfg.head_products[pi], std::move(t));
            }
            auto sup = compute_supervised_losses(g, losses.total, preds, tgts);
            for (std::size_t pi = 0; pi < sup.mse.size(); ++pi) {
                out.mse[pi].second += w * sup.mse[pi].second.item();
            }
            out.total += w * (sup.total.item() - losses.total.item());
        }
        done += take;
    }
    return out;
}

// Mean-predictor reconstruction baseline: average over channels of the
// per-channel population std of the normalized data.
inline double baseline_rec(const std::vector<std::string>& ids, TileStore& store, std::int64_t C) {
    if (ids.empty()) throw UsageError("baseline_rec: empty id list");
    std::vector<double> sum(static_cast<std::size_t>(C), 0.0), sumsq(static_cast<std::size_t>(C), 0.0);
    std::int64_t per_channel = 0;
    for (const auto& id : ids) {
        const auto& px = store.normalized(id);
        const std::size_t hw = px.size() / static_cast<std::size_t>(C);
        per_channel += static_cast<std::int64_t>(hw);
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < hw; ++i) {
                const double v = px[static_cast<std::size_t>(c) * hw + i];
                sum[static_cast<std::size_t>(c)] += v;
                sumsq[static_cast<std::size_t>(c)] += v * v;
            }
        }
    }
    double acc = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
        const double mean = sum[static_cast<std::size_t>(c)] / static_cast<double>(per_channel);
        const double var = sumsq[static_cast<std::size_t>(c)] / static_cast<double>(per_channel) - mean * mean;
        acc += std::sqrt(std::max(0.0, var));
    }
    return acc / static_cast<double>(C);
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainResult {
    std::string run_dir;
    VaeParams params;
    EvalMetrics final_val;
    std::uint64_t steps_done = 0;
};

namespace detail {

inline void append_metrics_line(std::ofstream& log, const nlohmann::json& j) {
    log << j.dump() << "\n";
    log.flush();
    if (!log) throw DataError("failed to append to metrics log");
}

} // namespace detail

inline TrainResult train_vae(const VaeConfig& vae_cfg, const TrainConfig& train_cfg,
                             const TrainDataConfig& data_cfg, const std::string& run_dir,
                             const std::string& resume_from = "") {
    vae_cfg.validate();
    train_cfg.validate();
    std::filesystem::create_directories(run_dir);

    const RadianceStats stats = [&] {
        std::ifstream is(data_cfg.stats_path);
        if (!is) throw DataError("cannot open stats file '" + data_cfg.stats_path + "'");
        try {
            return radiance_stats_from_json(nlohmann::json::parse(is));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("malformed stats JSON in '" + data_cfg.stats_path + "': " + e.what());
        }
    }();
    if (static_cast<std::int64_t>(stats.mu.size()) != vae_cfg.in_channels) {
        throw DataError("stats cover " + std::to_string(stats.mu.size()) + " channels, model expects " +
                        std::to_string(vae_cfg.in_channels));
    }

    std::vector<std::pair<std::string, L2Normalizer>> normalizers;
    if (vae_cfg.supervised) {
        std::ifstream is(data_cfg.normalizers_path);
        if (!is) throw DataError("cannot open normalizer file '" + data_cfg.normalizers_path + "'");
        try {
            const auto j = nlohmann::json::parse(is);
            for (const auto& entry : j.at("normalizers")) {
                normalizers.push_back(l2_normalizer_from_json(entry));
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("malformed normalizer JSON in '" + data_cfg.normalizers_path + "': " +
                              e.what());
        }
    }

    TileStore store(vae_cfg, data_cfg, stats, normalizers);

    const auto all_ids = list_tile_ids(data_cfg.tile_dir);
    if (all_ids.empty()) throw DataError("no .hst tiles in '" + data_cfg.tile_dir + "'");
    const auto split = split_files(all_ids, data_cfg.train_pct);
    if (split.train_ids.empty()) throw DataError("train split is empty");
    if (split.val_ids.empty()) throw DataError("val split is empty");

    VaeParams params;
    OptimState opt;
    Rng model_rng(train_cfg.seed, 2);
    SampleBuffer buffer;
    std::vector<std::string> val_ids;
    std::uint64_t start_step = 0;

    if (resume_from.empty()) {
        Rng init_rng(train_cfg.seed, 0);
        params = init_params(vae_cfg, init_rng);
        opt.init(params.named);
        buffer = SampleBuffer(split.train_ids, std::min<std::int64_t>(data_cfg.train_buffer,
                                                                      static_cast<std::int64_t>(
                                                                          split.train_ids.size())),
                              Rng(train_cfg.seed, 1));
        // deterministic validation set: lexicographically first val ids
        val_ids = split.val_ids;
        std::sort(val_ids.begin(), val_ids.end());
        if (static_cast<std::int64_t>(val_ids.size()) > data_cfg.val_tiles) {
            val_ids.resize(static_cast<std::size_t>(data_cfg.val_tiles));
        }
    } else {
        Checkpoint ck = load_checkpoint(resume_from);
        // the step budget may grow on resume; everything else must match
        auto strip = [](const VaeConfig& v, const TrainConfig& t) {
            auto j = nlohmann::json{{"vae", vae_config_to_json(v)}, {"train", train_config_to_json(t)}};
            j["train"].erase("steps");
            return j.dump();
        };
        const auto want = strip(vae_cfg, train_cfg);
        const auto have = strip(ck.vae_cfg, ck.train_cfg);
        if (want != have) {
            throw ConfigError("checkpoint '" + resume_from + "' was written with a different config");
        }
        params = std::move(ck.params);
        opt = std::move(ck.opt);
        model_rng = ck.model_rng;
        buffer = std::move(ck.buffer);
        val_ids = std::move(ck.val_ids);
        start_step = ck.step;
    }

    {
        std::ofstream cfg_out(run_dir + "/config.json", std::ios::trunc);
        cfg_out << nlohmann::json{{"vae", vae_config_to_json(vae_cfg)},
                                  {"train", train_config_to_json(train_cfg)},
                                  {"data", data_config_to_json(data_cfg)},
                                  {"val_ids", val_ids}}
                       .dump(2)
                << "\n";
        if (!cfg_out) throw DataError("cannot write '" + run_dir + "/config.json'");
    }

    std::ofstream log(run_dir + "/metrics.jsonl", resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot open '" + run_dir + "/metrics.jsonl'");
    detail::append_metrics_line(log, nlohmann::json{{"phase", "header"},
                                                    {"resumed_at", start_step},
                                                    {"seed", train_cfg.seed},
                                                    {"steps", train_cfg.steps}});

    auto save_point = [&](const std::string& name, std::uint64_t step) {
        Checkpoint ck;
        ck.vae_cfg = vae_cfg;
        ck.train_cfg = train_cfg;
        ck.params = params;
        ck.opt = opt;
        ck.model_rng = model_rng;
        ck.buffer = buffer;
        ck.val_ids = val_ids;
        ck.step = step;
        save_checkpoint(run_dir + "/" + name, ck);
    };

    if (resume_from.empty()) save_point("ckpt_step_0.bin", 0);

    const std::int64_t C = vae_cfg.in_channels, T = vae_cfg.tile, hw = vae_cfg.latent_hw();
    for (std::uint64_t step = start_step + 1; step <= static_cast<std::uint64_t>(train_cfg.steps);
         ++step) {
        const auto ids = sample_batch(buffer, train_cfg.batch);
        Tensor xb({train_cfg.batch, C, T, T});
        for (std::size_t b = 0; b < ids.size(); ++b) {
            const auto& px = store.normalized(ids[b]);
            std::copy(px.begin(), px.end(), xb.vec().begin() + static_cast<std::ptrdiff_t>(b * px.size()));
        }

        Graph g;
        auto lat = encode(g, xb, params, vae_cfg);
        auto z = reparameterize(g, lat, model_rng);
        auto xhat = decode(g, z, params, vae_cfg);
        auto losses = compute_losses(g, xb, xhat, lat, params, vae_cfg);
        Tensor total = losses.total;
        std::vector<std::pair<std::string, Tensor>> sup_mse;
        if (vae_cfg.supervised) {
            auto preds = supervised_forward(g, lat, params, vae_cfg);
            std::vector<std::pair<std::string, Tensor>> tgts;
            for (std::size_t pi = 0; pi < vae_cfg.head_products.size(); ++pi) {
                Tensor t({train_cfg.batch, 1, hw, hw});
                for (std::size_t b = 0; b < ids.size(); ++b) {
                    const auto& maps = store.targets(ids[b]);
                    std::copy(maps[pi].begin(), maps[pi].end(),
                              t.vec().begin() + static_cast<std::ptrdiff_t>(b * maps[pi].size()));
                }
                tgts.emplace_back(vae_cfg.head_products[pi], std::move(t));
            }
            auto sup = compute_supervised_losses(g, losses.total, preds, tgts);
            total = sup.total;
            sup_mse = std::move(sup.mse);
        }

        if (!std::isfinite(total.item())) {
            throw TrainingFault("step " + std::to_string(step) +
                                ": non-finite training loss, last checkpoint retained in " + run_dir);
        }

        params.zero_grads();
        g.backward(total);
        float scale = 1.0f;
        try {
            scale = clip_grad_norm(params.named, train_cfg.clip_norm);
        } catch (const TrainingFault& e) {
            throw TrainingFault("step " + std::to_string(step) + ": " + e.what() +
                                ", last checkpoint retained in " + run_dir);
        }
        adamw_step(params.named, opt, train_cfg);

        // HSNC_CHECK_FINITE adds a full parameter scan after every step.
        if (check_finite_enabled()) {
            for (const auto& [name, t] : params.named) {
                for (float v : t.vec()) {
                    if (!std::isfinite(v)) {
                        throw TrainingFault("non-finite value in parameter '" + name + "' after step " +
                                            std::to_string(step));
                    }
                }
            }
        }

        nlohmann::json rec{{"phase", "train"},
                           {"step", step},
                           {"rec", static_cast<double>(losses.rec.item())},
                           {"nll", static_cast<double>(losses.nll.item())},
                           {"kl", static_cast<double>(losses.kl.item())},
                           {"total", static_cast<double>(total.item())},
                           {"clip_scale", static_cast<double>(scale)}};
        for (const auto& [name, t] : sup_mse) {
            rec["mse_" + name] = static_cast<double>(t.item());
        }
        detail::append_metrics_line(log, rec);

        if (step % static_cast<std::uint64_t>(train_cfg.val_every) == 0) {
            auto vm = validate(params, vae_cfg, val_ids, store, train_cfg.batch);
            nlohmann::json vrec{{"phase", "val"}, {"step", step},    {"rec", vm.rec},
                                {"nll", vm.nll},  {"kl", vm.kl},     {"total", vm.total}};
            for (const auto& [name, m] : vm.mse) vrec["mse_" + name] = m;
            detail::append_metrics_line(log, vrec);
        }
        if (step % static_cast<std::uint64_t>(train_cfg.ckpt_every) == 0) {
            save_point("ckpt_step_" + std::to_string(step) + ".bin", step);
        }
    }

    save_point("final.bin", static_cast<std::uint64_t>(train_cfg.steps));

    TrainResult result;
    result.run_dir = run_dir;
    result.steps_done = static_cast<std::uint64_t>(train_cfg.steps);
    result.final_val = validate(params, vae_cfg, val_ids, store, train_cfg.batch);
    result.params = std::move(params);
    return result;
}

// Exponential moving average with the conventional span smoothing
// alpha = 2/(span+1), over the per-step values in order.
inline std::vector<double> ema_series(const std::vector<double>& values, int span) {
    if (span < 1) throw UsageError("ema_series: span must be >= 1");
    std::vector<double> out(values.size());
    const double alpha = 2.0 / (span + 1.0);
    double ema = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        ema = i == 0 ? values[0] : alpha * values[i] + (1.0 - alpha) * ema;
        out[i] = ema;
    }
    return out;
}

struct MetricsLog {
    std::vector<nlohmann::json> train;
    std::vector<nlohmann::json> val;
};

inline MetricsLog read_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open metrics log '" + path + "'");
    MetricsLog out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            const std::string phase = j.value("phase", "");
            if (phase == "train") out.train.push_back(std::move(j));
            else if (phase == "val") out.val.push_back(std::move(j));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("malformed metrics line " + std::to_string(lineno) + " in '" + path +
                              "': " + e.what());
        }
    }
    return out;
}

} // namespace hsnc
