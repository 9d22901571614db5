#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hsnc/attention.hpp"
#include "hsnc/conv.hpp"
#include "hsnc/errors.hpp"
#include "hsnc/ops.hpp"
#include "hsnc/rng.hpp"
#include "hsnc/tensor.hpp"

namespace hsnc {

// ---------------------------------------------------------------------------
// Convolutional VAE over spectral tiles. The encoder halves the spatial
// extent n_down times while walking the enc_channels widths, a middle block
// adds self-attention at the bottleneck, and a zero-initialized 3x3
// projection produces (mu, logvar). The decoder mirrors the path with
// transposed convolutions and ends in a zero-initialized 3x3 projection, so a
// fresh model reconstructs exactly zero.
// ---------------------------------------------------------------------------

struct VaeConfig {
    std::int64_t in_channels = 1028;
    std::int64_t tile = 64;
    std::vector<std::int64_t> enc_channels = {512, 256, 128};
    std::int64_t n_down = 2;
    std::int64_t latent_channels = 32;
    std::int64_t attn_heads = 4;
    std::int64_t groups = 8;
    float gn_eps = 1e-6f;
    float kl_weight = 1e-6f;
    float log_s2_init = 6.0f;
    float logvar_lo = -30.0f;
    float logvar_hi = 20.0f;
    bool supervised = false;
    std::vector<std::string> head_products;

    std::int64_t latent_hw() const { return tile / (std::int64_t(1) << n_down); }

    void validate() const {
        if (in_channels < 1) throw ConfigError("vae: in_channels must be >= 1");
        if (tile < 1) throw ConfigError("vae: tile must be >= 1");
        if (n_down < 0) throw ConfigError("vae: n_down must be >= 0");
        if (static_cast<std::int64_t>(enc_channels.size()) != n_down + 1) {
            throw ConfigError("vae: enc_channels must list n_down+1 = " + std::to_string(n_down + 1) +
                              " widths, got " + std::to_string(enc_channels.size()));
        }
        if (groups < 1) throw ConfigError("vae: groups must be >= 1");
        if (attn_heads < 1) throw ConfigError("vae: attn_heads must be >= 1");
        for (auto ch : enc_channels) {
            if (ch < 1) throw ConfigError("vae: encoder widths must be >= 1");
            if (ch % groups != 0) {
                throw ConfigError("vae: width " + std::to_string(ch) + " is not divisible by groups = " +
                                  std::to_string(groups));
            }
        }
        if (enc_channels.back() % attn_heads != 0) {
            throw ConfigError("vae: bottleneck width " + std::to_string(enc_channels.back()) +
                              " is not divisible by attn_heads = " + std::to_string(attn_heads));
        }
        if (latent_channels < 1) throw ConfigError("vae: latent_channels must be >= 1");
        if (tile % (std::int64_t(1) << n_down) != 0 || latent_hw() < 1) {
            throw ConfigError("vae: tile " + std::to_string(tile) + " does not survive " +
                              std::to_string(n_down) + " halvings");
        }
        if (!(gn_eps > 0)) throw ConfigError("vae: gn_eps must be positive");
        if (!(logvar_lo < logvar_hi)) throw ConfigError("vae: logvar clamp range is empty");
        if (supervised) {
            if (head_products.empty()) throw ConfigError("vae: supervised model needs head_products");
            std::unordered_set<std::string> seen;
            for (const auto& n : head_products) {
                if (n.empty() || !seen.insert(n).second) {
                    throw ConfigError("vae: head_products must be unique and non-empty");
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Parameters are an ordered list of named tensors; the order is the creation
// order and is what the optimizer and checkpoint serialization iterate.
// log_s2 lives in the list like any other parameter.
// ---------------------------------------------------------------------------

struct VaeParams {
    std::vector<std::pair<std::string, Tensor>> named;

    Tensor& at(const std::string& name) {
        for (auto& [n, t] : named)
            if (n == name) return t;
        throw UsageError("no parameter named '" + name + "'");
    }
    const Tensor& at(const std::string& name) const {
        for (const auto& [n, t] : named)
            if (n == name) return t;
        throw UsageError("no parameter named '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : named)
            if (n == name) return true;
        return false;
    }
    std::int64_t total_params() const {
        std::int64_t s = 0;
        for (const auto& [n, t] : named) s += t.numel();
        return s;
    }
    void zero_grads() {
        for (auto& [n, t] : named) t.zero_grad();
    }
};

namespace detail {

enum class InitKind { fanin, zero, one, value };

struct ParamSpec {
    std::string name;
    std::vector<std::int64_t> shape;
    InitKind init = InitKind::fanin;
    float value = 0.0f;
};

inline void plan_resnet_block(std::vector<ParamSpec>& plan, const std::string& pre,
                              std::int64_t cin, std::int64_t cout) {
    plan.push_back({pre + ".gn1.gamma", {cin}, InitKind::one});
    plan.push_back({pre + ".gn1.beta", {cin}, InitKind::zero});
    plan.push_back({pre + ".conv1.weight", {cout, cin, 3, 3}, InitKind::fanin});
    plan.push_back({pre + ".conv1.bias", {cout}, InitKind::zero});
    plan.push_back({pre + ".gn2.gamma", {cout}, InitKind::one});
    plan.push_back({pre + ".gn2.beta", {cout}, InitKind::zero});
    plan.push_back({pre + ".conv2.weight", {cout, cout, 3, 3}, InitKind::zero});
    plan.push_back({pre + ".conv2.bias", {cout}, InitKind::zero});
    if (cin != cout) {
        plan.push_back({pre + ".skip.weight", {cout, cin, 1, 1}, InitKind::fanin});
        plan.push_back({pre + ".skip.bias", {cout}, InitKind::zero});
    }
}

inline void plan_middle(std::vector<ParamSpec>& plan, const std::string& pre, std::int64_t ch) {
    plan_resnet_block(plan, pre + ".rb1", ch, ch);
    plan.push_back({pre + ".attn.wq", {ch, ch}, InitKind::fanin});
    plan.push_back({pre + ".attn.wk", {ch, ch}, InitKind::fanin});
    plan.push_back({pre + ".attn.wv", {ch, ch}, InitKind::fanin});
    plan.push_back({pre + ".attn.wo", {ch, ch}, InitKind::fanin});
    plan_resnet_block(plan, pre + ".rb2", ch, ch);
}

inline std::vector<ParamSpec> param_plan(const VaeConfig& cfg) {
    std::vector<ParamSpec> plan;
    const auto& ec = cfg.enc_channels;
    const std::int64_t last = ec.back();
    const std::int64_t c2 = 2 * cfg.latent_channels;

    plan.push_back({"enc.init.weight", {ec[0], cfg.in_channels, 3, 3}, InitKind::fanin});
    plan.push_back({"enc.init.bias", {ec[0]}, InitKind::zero});
    for (std::int64_t i = 0; i <= cfg.n_down; ++i) {
        const std::string pre = "enc.level" + std::to_string(i);
        plan_resnet_block(plan, pre + ".rb", ec[static_cast<std::size_t>(i)], ec[static_cast<std::size_t>(i)]);
        if (i < cfg.n_down) {
            plan.push_back({pre + ".down.weight",
                            {ec[static_cast<std::size_t>(i + 1)], ec[static_cast<std::size_t>(i)], 2, 2},
                            InitKind::fanin});
            plan.push_back({pre + ".down.bias", {ec[static_cast<std::size_t>(i + 1)]}, InitKind::zero});
        }
    }
    plan_middle(plan, "enc.mid", last);
    plan.push_back({"enc.out.weight", {c2, last, 3, 3}, InitKind::zero});
    plan.push_back({"enc.out.bias", {c2}, InitKind::zero});

    plan.push_back({"dec.init.weight", {last, cfg.latent_channels, 3, 3}, InitKind::fanin});
    plan.push_back({"dec.init.bias", {last}, InitKind::zero});
    plan_middle(plan, "dec.mid", last);
    for (std::int64_t i = 0; i < cfg.n_down; ++i) {
        // walking the widths back up: level i runs at ec[n_down - i] and the
        // transposed conv hands off to ec[n_down - i - 1]
        const std::int64_t cur = ec[static_cast<std::size_t>(cfg.n_down - i)];
        const std::int64_t nxt = ec[static_cast<std::size_t>(cfg.n_down - i - 1)];
        const std::string pre = "dec.level" + std::to_string(i);
        plan_resnet_block(plan, pre + ".rb", cur, cur);
        plan.push_back({pre + ".up.weight", {cur, nxt, 2, 2}, InitKind::fanin});
        plan.push_back({pre + ".up.bias", {nxt}, InitKind::zero});
    }
    plan_resnet_block(plan, "dec.final_rb", ec[0], ec[0]);
    plan.push_back({"dec.out.weight", {cfg.in_channels, ec[0], 3, 3}, InitKind::zero});
    plan.push_back({"dec.out.bias", {cfg.in_channels}, InitKind::zero});

    plan.push_back({"log_s2", {1}, InitKind::value, cfg.log_s2_init});

    if (cfg.supervised) {
        for (const auto& name : cfg.head_products) {
            plan.push_back({"head." + name + ".weight", {1, cfg.latent_channels, 1, 1}, InitKind::fanin});
            plan.push_back({"head." + name + ".bias", {1}, InitKind::zero});
        }
    }
    return plan;
}

} // namespace detail

inline VaeParams init_params(const VaeConfig& cfg, Rng& rng) {
    cfg.validate();
    VaeParams params;
    for (const auto& spec : detail::param_plan(cfg)) {
        Tensor t(spec.shape, true);
        switch (spec.init) {
            case detail::InitKind::zero:
                break;
            case detail::InitKind::one:
                for (auto& v : t.vec()) v = 1.0f;
                break;
            case detail::InitKind::value:
                for (auto& v : t.vec()) v = spec.value;
                break;
            case detail::InitKind::fanin: {
                // fan-in = size(1) * kernel area, matching the usual
                // convention for conv, transposed conv, and linear weights
                std::int64_t fan = t.rank() > 1 ? t.dim(1) : t.dim(0);
                for (int d = 2; d < t.rank(); ++d) fan *= t.dim(d);
                const float bound = 1.0f / std::sqrt(static_cast<float>(fan));
                for (auto& v : t.vec()) v = static_cast<float>(rng.uniform_in(-bound, bound));
                break;
            }
        }
        params.named.emplace_back(spec.name, std::move(t));
    }
    return params;
}

// Analytic parameter count, kept as plain arithmetic so it can cross-check
// the tensors actually allocated by init_params.
inline std::int64_t count_params(const VaeConfig& cfg) {
    cfg.validate();
    auto conv = [](std::int64_t cin, std::int64_t cout, std::int64_t k) {
        return cout * cin * k * k + cout;
    };
    auto rb = [&](std::int64_t cin, std::int64_t cout) {
        std::int64_t n = 2 * cin + conv(cin, cout, 3) + 2 * cout + conv(cout, cout, 3);
        if (cin != cout) n += conv(cin, cout, 1);
        return n;
    };
    auto middle = [&](std::int64_t ch) { return 2 * rb(ch, ch) + 4 * ch * ch; };

    const auto& ec = cfg.enc_channels;
    const std::int64_t last = ec.back();
    std::int64_t n = 0;
    n += conv(cfg.in_channels, ec[0], 3);
    for (std::int64_t i = 0; i <= cfg.n_down; ++i) {
        n += rb(ec[static_cast<std::size_t>(i)], ec[static_cast<std::size_t>(i)]);
        if (i < cfg.n_down) n += conv(ec[static_cast<std::size_t>(i)], ec[static_cast<std::size_t>(i + 1)], 2);
    }
    n += middle(last);
    n += conv(last, 2 * cfg.latent_channels, 3);

    n += conv(cfg.latent_channels, last, 3);
    n += middle(last);
    for (std::int64_t i = 0; i < cfg.n_down; ++i) {
        const std::int64_t cur = ec[static_cast<std::size_t>(cfg.n_down - i)];
        const std::int64_t nxt = ec[static_cast<std::size_t>(cfg.n_down - i - 1)];
        n += rb(cur, cur);
        n += cur * nxt * 4 + nxt;
    }
    n += rb(ec[0], ec[0]);
    n += conv(ec[0], cfg.in_channels, 3);

    n += 1; // log_s2
    if (cfg.supervised) {
        n += static_cast<std::int64_t>(cfg.head_products.size()) * (cfg.latent_channels + 1);
    }
    return n;
}

// ---------------------------------------------------------------------------
// Forward passes.
// ---------------------------------------------------------------------------

struct GaussianLatent {
    Tensor mu;
    Tensor logvar;
};

namespace detail {

inline Tensor resnet_block(Graph& g, const Tensor& x, const VaeParams& p, const std::string& pre,
                           const VaeConfig& cfg) {
    Tensor h = group_norm(g, x, static_cast<int>(cfg.groups), p.at(pre + ".gn1.gamma"),
                          p.at(pre + ".gn1.beta"), cfg.gn_eps);
    h = gelu(g, h);
    h = conv2d(g, h, p.at(pre + ".conv1.weight"), p.at(pre + ".conv1.bias"), 1, 1);
    h = group_norm(g, h, static_cast<int>(cfg.groups), p.at(pre + ".gn2.gamma"),
                   p.at(pre + ".gn2.beta"), cfg.gn_eps);
    h = gelu(g, h);
    h = conv2d(g, h, p.at(pre + ".conv2.weight"), p.at(pre + ".conv2.bias"), 1, 1);
    Tensor skip = x;
    if (p.has(pre + ".skip.weight")) {
        skip = conv2d(g, x, p.at(pre + ".skip.weight"), p.at(pre + ".skip.bias"), 1, 0);
    }
    return add(g, skip, h);
}

inline Tensor middle_block(Graph& g, const Tensor& x, const VaeParams& p, const std::string& pre,
                           const VaeConfig& cfg) {
    Tensor h = resnet_block(g, x, p, pre + ".rb1", cfg);
    h = self_attention(g, h, static_cast<int>(cfg.attn_heads), p.at(pre + ".attn.wq"),
                       p.at(pre + ".attn.wk"), p.at(pre + ".attn.wv"), p.at(pre + ".attn.wo"));
    return resnet_block(g, h, p, pre + ".rb2", cfg);
}

} // namespace detail

inline GaussianLatent encode(Graph& g, const Tensor& x, const VaeParams& params, const VaeConfig& cfg) {
    if (x.rank() != 4 || x.dim(1) != cfg.in_channels || x.dim(2) != cfg.tile || x.dim(3) != cfg.tile) {
        throw DimensionError("encode: input " + shape_str(x.shape()) + " does not match config [B," +
                             std::to_string(cfg.in_channels) + "," + std::to_string(cfg.tile) + "," +
                             std::to_string(cfg.tile) + "]");
    }
    Tensor h = conv2d(g, x, params.at("enc.init.weight"), params.at("enc.init.bias"), 1, 1);
    for (std::int64_t i = 0; i <= cfg.n_down; ++i) {
        const std::string pre = "enc.level" + std::to_string(i);
        h = detail::resnet_block(g, h, params, pre + ".rb", cfg);
        if (i < cfg.n_down) {
            h = conv2d(g, h, params.at(pre + ".down.weight"), params.at(pre + ".down.bias"), 2, 0);
        }
    }
    h = detail::middle_block(g, h, params, "enc.mid", cfg);
    h = conv2d(g, h, params.at("enc.out.weight"), params.at("enc.out.bias"), 1, 1);

    GaussianLatent lat;
    lat.mu = slice_channels(g, h, 0, cfg.latent_channels);
    lat.logvar = clamp(g, slice_channels(g, h, cfg.latent_channels, 2 * cfg.latent_channels),
                       cfg.logvar_lo, cfg.logvar_hi);
    return lat;
}

inline Tensor reparameterize(Graph& g, const GaussianLatent& lat, Rng& rng, bool sampling = true) {
    if (!sampling) return lat.mu;
    Tensor eps = rnormal(rng, lat.mu.shape());
    Tensor std_dev = exp_t(g, mul_scalar(g, lat.logvar, 0.5f));
    return add(g, lat.mu, mul(g, std_dev, eps));
}

inline Tensor decode(Graph& g, const Tensor& z, const VaeParams& params, const VaeConfig& cfg) {
    const std::int64_t hw = cfg.latent_hw();
    if (z.rank() != 4 || z.dim(1) != cfg.latent_channels || z.dim(2) != hw || z.dim(3) != hw) {
        throw DimensionError("decode: latent " + shape_str(z.shape()) + " does not match config [B," +
                             std::to_string(cfg.latent_channels) + "," + std::to_string(hw) + "," +
                             std::to_string(hw) + "]");
    }
    Tensor h = conv2d(g, z, params.at("dec.init.weight"), params.at("dec.init.bias"), 1, 1);
    h = detail::middle_block(g, h, params, "dec.mid", cfg);
    for (std::int64_t i = 0; i < cfg.n_down; ++i) {
        const std::string pre = "dec.level" + std::to_string(i);
        h = detail::resnet_block(g, h, params, pre + ".rb", cfg);
        h = conv_transpose2d(g, h, params.at(pre + ".up.weight"), params.at(pre + ".up.bias"), 2);
    }
    h = detail::resnet_block(g, h, params, "dec.final_rb", cfg);
    return conv2d(g, h, params.at("dec.out.weight"), params.at("dec.out.bias"), 1, 1);
}

// ---------------------------------------------------------------------------
// Losses. rec is a mean so log_s2 and kl_weight stay comparable across tile
// sizes; kl sums over latent dims and averages over the batch.
// ---------------------------------------------------------------------------

struct VaeLosses {
    Tensor rec;
    Tensor nll;
    Tensor kl;
    Tensor total;
};

inline VaeLosses compute_losses(Graph& g, const Tensor& x, const Tensor& xhat,
                                const GaussianLatent& lat, const VaeParams& params,
                                const VaeConfig& cfg) {
    detail::require_same_shape(x, xhat, "compute_losses");
    const Tensor& log_s2 = params.at("log_s2");

    VaeLosses out;
    out.rec = mean_all(g, abs_t(g, sub(g, x, xhat)));
    out.nll = add(g, div(g, out.rec, exp_t(g, log_s2)), log_s2);

    const auto batch = static_cast<float>(lat.mu.dim(0));
    Tensor inner = sub(g, add_scalar(g, lat.logvar, 1.0f),
                       add(g, mul(g, lat.mu, lat.mu), exp_t(g, lat.logvar)));
    out.kl = mul_scalar(g, sum_all(g, inner), -0.5f / batch);

    out.total = add(g, out.nll, mul_scalar(g, out.kl, cfg.kl_weight));
    return out;
}

// Per-product 1x1 conv heads applied to the latent mean.
inline std::vector<std::pair<std::string, Tensor>> supervised_forward(Graph& g,
                                                                      const GaussianLatent& lat,
                                                                      const VaeParams& params,
                                                                      const VaeConfig& cfg) {
    if (!cfg.supervised) throw UsageError("supervised_forward: config is not supervised");
    std::vector<std::pair<std::string, Tensor>> preds;
    preds.reserve(cfg.head_products.size());
    for (const auto& name : cfg.head_products) {
        preds.emplace_back(name, conv2d(g, lat.mu, params.at("head." + name + ".weight"),
                                        params.at("head." + name + ".bias"), 1, 0));
    }
    return preds;
}

struct SupervisedLosses {
    std::vector<std::pair<std::string, Tensor>> mse; // per product, scalar
    Tensor total;                                    // base total + sum of mse
};

// targets must be normalized pooled maps at latent resolution, NaN where
// invalid; order and names must match cfg.head_products.
inline SupervisedLosses compute_supervised_losses(Graph& g, const Tensor& base_total,
                                                  const std::vector<std::pair<std::string, Tensor>>& preds,
                                                  const std::vector<std::pair<std::string, Tensor>>& targets) {
    if (preds.size() != targets.size()) {
        throw UsageError("compute_supervised_losses: " + std::to_string(preds.size()) + " heads vs " +
                         std::to_string(targets.size()) + " targets");
    }
    SupervisedLosses out;
    out.total = base_total;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].first != targets[i].first) {
            throw UsageError("compute_supervised_losses: head '" + preds[i].first +
                             "' paired with target '" + targets[i].first + "'");
        }
        if (preds[i].second.shape() != targets[i].second.shape()) {
            throw DataError("supervised target '" + targets[i].first + "' has shape " +
                            shape_str(targets[i].second.shape()) + ", head predicts " +
                            shape_str(preds[i].second.shape()));
        }
        Tensor m = masked_mse(g, preds[i].second, targets[i].second);
        out.mse.emplace_back(preds[i].first, m);
        out.total = add(g, out.total, m);
    }
    return out;
}

} // namespace hsnc
