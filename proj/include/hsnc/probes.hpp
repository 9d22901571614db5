#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsnc/errors.hpp"
#include "hsnc/ops.hpp"
#include "hsnc/rng.hpp"
#include "hsnc/tensor.hpp"
#include "hsnc/train.hpp"
#include "hsnc/vae.hpp"

namespace hsnc {

// ---------------------------------------------------------------------------
// Post-hoc probes: small regressors from frozen per-pixel latent mean vectors
// to one normalized product value. The VAE is never mutated here.
// ---------------------------------------------------------------------------

enum class ProbeKind { linear, mlp };

inline const char* probe_kind_name(ProbeKind k) {
    return k == ProbeKind::linear ? "linear" : "mlp";
}

inline ProbeKind probe_kind_from_name(const std::string& s) {
    if (s == "linear") return ProbeKind::linear;
    if (s == "mlp") return ProbeKind::mlp;
    throw ConfigError("unknown probe kind '" + s + "'");
}

struct ProbeConfig {
    ProbeKind kind = ProbeKind::linear;
    std::vector<std::int64_t> hidden; // empty for linear
    float dropout = 0.0f;
    float lr = 1e-3f;
    float weight_decay = 0.01f;
    std::int64_t batch = 512;
    std::int64_t max_epochs = 100;
    std::int64_t patience = 10;
    std::int64_t pixels_per_file = 2000;
    float train_fraction = 0.8f;
    std::uint64_t seed = 42;

    static ProbeConfig defaults(ProbeKind kind) {
        ProbeConfig c;
        c.kind = kind;
        if (kind == ProbeKind::mlp) {
            c.hidden = {512, 512};
            c.dropout = 0.1f;
            c.max_epochs = 2000;
            c.pixels_per_file = 1000;
        }
        return c;
    }

    void validate() const {
        if (kind == ProbeKind::mlp && hidden.size() != 2) {
            throw ConfigError("probe: mlp needs two hidden widths");
        }
        if (kind == ProbeKind::linear && !hidden.empty()) {
            throw ConfigError("probe: linear probe takes no hidden layers");
        }
        for (auto h : hidden) {
            if (h < 1) throw ConfigError("probe: hidden widths must be >= 1");
        }
        if (dropout < 0 || dropout >= 1) throw ConfigError("probe: dropout must be in [0,1)");
        if (!(lr > 0)) throw ConfigError("probe: lr must be positive");
        if (weight_decay < 0) throw ConfigError("probe: weight_decay must be >= 0");
        if (batch < 1) throw ConfigError("probe: batch must be >= 1");
        if (max_epochs < 1) throw ConfigError("probe: max_epochs must be >= 1");
        if (patience < 1 || patience >= max_epochs) {
            throw ConfigError("probe: patience must be in [1, max_epochs)");
        }
        if (pixels_per_file < 1) throw ConfigError("probe: pixels_per_file must be >= 1");
        if (!(train_fraction > 0 && train_fraction < 1)) {
            throw ConfigError("probe: train_fraction must be in (0,1)");
        }
    }
};

inline nlohmann::json probe_config_to_json(const ProbeConfig& c) {
    return nlohmann::json{
        {"kind", probe_kind_name(c.kind)},
        {"hidden", c.hidden},
        {"dropout", c.dropout},
        {"lr", c.lr},
        {"weight_decay", c.weight_decay},
        {"batch", c.batch},
        {"max_epochs", c.max_epochs},
        {"patience", c.patience},
        {"pixels_per_file", c.pixels_per_file},
        {"train_fraction", c.train_fraction},
        {"seed", c.seed},
    };
}

inline ProbeConfig probe_config_from_json(const nlohmann::json& j) {
    try {
        ProbeConfig c = ProbeConfig::defaults(probe_kind_from_name(j.value("kind", "linear")));
        c.hidden = j.value("hidden", c.hidden);
        c.dropout = j.value("dropout", c.dropout);
        c.lr = j.value("lr", c.lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.batch = j.value("batch", c.batch);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.patience = j.value("patience", c.patience);
        c.pixels_per_file = j.value("pixels_per_file", c.pixels_per_file);
        c.train_fraction = j.value("train_fraction", c.train_fraction);
        c.seed = j.value("seed", c.seed);
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed probe config JSON: ") + e.what());
    }
}

struct ProbeDataset {
    std::int64_t dim = 0;
    std::vector<float> features; // rows * dim
    std::vector<float> targets;  // rows
    struct Row {
        std::string tile_id;
        std::int64_t y = 0, x = 0;
    };
    std::vector<Row> provenance;

    std::int64_t rows() const { return static_cast<std::int64_t>(targets.size()); }
};

struct ProbeModel {
    ProbeKind kind = ProbeKind::linear;
    std::int64_t in_dim = 0;
    ParamList params;

    std::int64_t total_params() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params) n += t.numel();
        return n;
    }
};

inline ProbeModel init_probe(const ProbeConfig& cfg, std::int64_t in_dim, Rng& rng) {
    cfg.validate();
    if (in_dim < 1) throw ConfigError("probe: feature dim must be >= 1");
    ProbeModel m;
    m.kind = cfg.kind;
    m.in_dim = in_dim;
    auto layer = [&rng](ParamList& out, const std::string& pre, std::int64_t dout, std::int64_t din) {
        Tensor W({dout, din}, true);
        const float bound = 1.0f / std::sqrt(static_cast<float>(din));
        for (auto& v : W.vec()) v = static_cast<float>(rng.uniform_in(-bound, bound));
        out.emplace_back(pre + ".weight", std::move(W));
        out.emplace_back(pre + ".bias", Tensor({dout}, true));
    };
    if (cfg.kind == ProbeKind::linear) {
        layer(m.params, "out", 1, in_dim);
    } else {
        layer(m.params, "fc1", cfg.hidden[0], in_dim);
        layer(m.params, "fc2", cfg.hidden[1], cfg.hidden[0]);
        layer(m.params, "out", 1, cfg.hidden[1]);
    }
    return m;
}

// Batch forward over X [N, dim] -> [N, 1]. Dropout is active only in
// training mode.
inline Tensor probe_forward_batch(Graph& g, const ProbeModel& m, const Tensor& X,
                                  const ProbeConfig& cfg, bool training, Rng& rng) {
    if (X.rank() != 2 || X.dim(1) != m.in_dim) {
        throw DimensionError("probe_forward: features must be [N," + std::to_string(m.in_dim) +
                             "], got " + shape_str(X.shape()));
    }
    auto find = [&m](const std::string& n) -> const Tensor& {
        for (const auto& [name, t] : m.params)
            if (name == n) return t;
        throw UsageError("probe model has no parameter '" + n + "'");
    };
    if (m.kind == ProbeKind::linear) {
        return linear(g, X, find("out.weight"), find("out.bias"));
    }
    Tensor h = relu(g, linear(g, X, find("fc1.weight"), find("fc1.bias")));
    h = relu(g, linear(g, h, find("fc2.weight"), find("fc2.bias")));
    h = dropout(g, h, cfg.dropout, training, rng);
    return linear(g, h, find("out.weight"), find("out.bias"));
}

// Single-vector wrapper. Dropout only fires when training is true.
inline float probe_forward(const ProbeModel& m, const std::vector<float>& z, const ProbeConfig& cfg,
                           bool training, Rng& rng) {
    if (static_cast<std::int64_t>(z.size()) != m.in_dim) {
        throw DimensionError("probe_forward: expected " + std::to_string(m.in_dim) + " features, got " +
                             std::to_string(z.size()));
    }
    Tensor X({1, m.in_dim});
    std::copy(z.begin(), z.end(), X.vec().begin());
    Graph g(false);
    return probe_forward_batch(g, m, X, cfg, training, rng).vec()[0];
}

inline float probe_forward(const ProbeModel& m, const std::vector<float>& z, const ProbeConfig& cfg) {
    Rng unused(0);
    return probe_forward(m, z, cfg, false, unused);
}

// ---------------------------------------------------------------------------
// Dataset assembly: encode each tile in eval mode, then sample feature rows
// uniformly without replacement from pixels whose pooled target is valid.
// ---------------------------------------------------------------------------

inline std::pair<ProbeDataset, ProbeDataset> build_probe_dataset(
    const VaeParams& params, const VaeConfig& cfg, const std::vector<std::string>& ids,
    TileStore& store, const ProbeConfig& probe_cfg, const std::string& product, Rng& rng) {
    probe_cfg.validate();
    std::size_t product_index = store.products().size();
    for (std::size_t i = 0; i < store.products().size(); ++i) {
        if (store.products()[i] == product) product_index = i;
    }
    if (product_index == store.products().size()) {
        throw UsageError("tile store does not serve product '" + product + "'");
    }

    const std::int64_t c = cfg.latent_channels, hw = cfg.latent_hw();
    ProbeDataset all;
    all.dim = c;

    for (const auto& id : ids) {
        const auto& px = store.normalized(id);
        Tensor x({1, cfg.in_channels, cfg.tile, cfg.tile});
        std::copy(px.begin(), px.end(), x.vec().begin());
        Graph g(false);
        const auto lat = encode(g, x, params, cfg);
        const auto& mu = lat.mu.vec(); // [c, hw, hw]

        const auto& target = store.targets(id)[product_index];
        std::vector<std::int64_t> valid;
        for (std::int64_t i = 0; i < hw * hw; ++i) {
            if (std::isfinite(target[static_cast<std::size_t>(i)])) valid.push_back(i);
        }
        const std::int64_t take = std::min<std::int64_t>(probe_cfg.pixels_per_file,
                                                         static_cast<std::int64_t>(valid.size()));
        for (std::int64_t j = 0; j < take; ++j) {
            const auto pick = j + static_cast<std::int64_t>(
                                      rng.below(static_cast<std::uint64_t>(valid.size() - j)));
            std::swap(valid[static_cast<std::size_t>(j)], valid[static_cast<std::size_t>(pick)]);
            const std::int64_t pos = valid[static_cast<std::size_t>(j)];
            const std::int64_t y = pos / hw, xcol = pos % hw;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                all.features.push_back(mu[static_cast<std::size_t>(ch * hw * hw + pos)]);
            }
            all.targets.push_back(target[static_cast<std::size_t>(pos)]);
            all.provenance.push_back({id, y, xcol});
        }
    }
    if (all.rows() == 0) {
        throw DataError("no valid '" + product + "' pixels across " + std::to_string(ids.size()) +
                        " files");
    }

    // global row shuffle, then split
    const std::int64_t n = all.rows();
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = n; i > 1; --i) {
        std::swap(order[static_cast<std::size_t>(i - 1)],
                  order[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i)))]);
    }
    const std::int64_t n_train = static_cast<std::int64_t>(
        std::floor(static_cast<double>(probe_cfg.train_fraction) * static_cast<double>(n)));

    auto gather = [&all, c](const std::vector<std::int64_t>& idx, std::int64_t lo, std::int64_t hi) {
        ProbeDataset ds;
        ds.dim = all.dim;
        for (std::int64_t i = lo; i < hi; ++i) {
            const auto r = idx[static_cast<std::size_t>(i)];
            const auto* f = all.features.data() + r * c;
            ds.features.insert(ds.features.end(), f, f + c);
            ds.targets.push_back(all.targets[static_cast<std::size_t>(r)]);
            ds.provenance.push_back(all.provenance[static_cast<std::size_t>(r)]);
        }
        return ds;
    };
    return {gather(order, 0, n_train), gather(order, n_train, n)};
}

// ---------------------------------------------------------------------------
// Training with early stopping on test MSE.
// ---------------------------------------------------------------------------

struct ProbeHistoryEntry {
    std::int64_t epoch = 0; // 1-based
    double train_mse = 0.0;
    double test_mse = 0.0;
};

struct ProbeTrainResult {
    ProbeModel model; // parameters from the best epoch
    std::vector<ProbeHistoryEntry> history;
    std::int64_t best_epoch = 0;
    double best_test_mse = 0.0;
};

inline double probe_eval_mse(const ProbeModel& m, const ProbeDataset& ds, const ProbeConfig& cfg) {
    if (ds.rows() == 0) throw UsageError("probe_eval_mse: empty dataset");
    Tensor X({ds.rows(), ds.dim});
    std::copy(ds.features.begin(), ds.features.end(), X.vec().begin());
    Graph g(false);
    Rng unused(0);
    const Tensor pred = probe_forward_batch(g, m, X, cfg, false, unused);
    double acc = 0.0;
    for (std::int64_t i = 0; i < ds.rows(); ++i) {
        const double d = static_cast<double>(pred.vec()[static_cast<std::size_t>(i)]) -
                         static_cast<double>(ds.targets[static_cast<std::size_t>(i)]);
        acc += d * d;
    }
    return acc / static_cast<double>(ds.rows());
}

// eval_hook, when given, replaces the test-MSE evaluation (the early-stopping
// contract is tested by injecting a synthetic loss trajectory).
inline ProbeTrainResult train_probe(
    const ProbeDataset& ds_train, const ProbeDataset& ds_test, const ProbeConfig& cfg, Rng& rng,
    const std::function<double(const ProbeModel&, std::int64_t epoch)>& eval_hook = nullptr) {
    cfg.validate();
    if (ds_train.rows() == 0) throw UsageError("train_probe: empty training set");
    if (!eval_hook && ds_test.rows() == 0) throw UsageError("train_probe: empty test set");

    ProbeModel model = init_probe(cfg, ds_train.dim, rng);
    OptimState opt;
    opt.init(model.params);
    TrainConfig optim_cfg;
    optim_cfg.lr = cfg.lr;
    optim_cfg.weight_decay = cfg.weight_decay;

    const std::int64_t n = ds_train.rows(), c = ds_train.dim;
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    ProbeTrainResult out;
    std::vector<std::vector<float>> best_params;
    auto snapshot = [&] {
        best_params.clear();
        for (const auto& [name, t] : model.params) best_params.push_back(t.vec());
    };

    for (std::int64_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        for (std::int64_t i = n; i > 1; --i) {
            std::swap(order[static_cast<std::size_t>(i - 1)],
                      order[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i)))]);
        }
        double train_acc = 0.0;
        std::int64_t nb = 0;
        for (std::int64_t lo = 0; lo < n; lo += cfg.batch) {
            const std::int64_t take = std::min(cfg.batch, n - lo);
            Tensor X({take, c});
            Tensor Y({take, 1});
            for (std::int64_t b = 0; b < take; ++b) {
                const auto r = order[static_cast<std::size_t>(lo + b)];
                std::copy(ds_train.features.begin() + r * c, ds_train.features.begin() + (r + 1) * c,
                          X.vec().begin() + b * c);
                Y.vec()[static_cast<std::size_t>(b)] = ds_train.targets[static_cast<std::size_t>(r)];
            }
            Graph g;
            Tensor pred = probe_forward_batch(g, model, X, cfg, true, rng);
            Tensor diff = sub(g, pred, Y);
            Tensor mse = mean_all(g, mul(g, diff, diff));
            for (auto& [name, t] : model.params) t.zero_grad();
            g.backward(mse);
            adamw_step(model.params, opt, optim_cfg);
            train_acc += mse.item();
            ++nb;
        }

        const double test_mse =
            eval_hook ? eval_hook(model, epoch) : probe_eval_mse(model, ds_test, cfg);
        out.history.push_back({epoch, train_acc / static_cast<double>(nb), test_mse});

        if (out.best_epoch == 0 || test_mse < out.best_test_mse) {
            out.best_epoch = epoch;
            out.best_test_mse = test_mse;
            snapshot();
        }
        if (epoch - out.best_epoch >= cfg.patience) break;
    }

    for (std::size_t i = 0; i < model.params.size(); ++i) {
        model.params[i].second.vec() = best_params[i];
    }
    out.model = std::move(model);
    return out;
}

// ---------------------------------------------------------------------------
// Metrics and the product x kind suite.
// ---------------------------------------------------------------------------

inline double r_squared(const std::vector<float>& pred, const std::vector<float>& truth) {
    if (pred.size() != truth.size()) {
        throw UsageError("r_squared: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(truth.size()) + " truths");
    }
    if (truth.size() < 2) throw UsageError("r_squared: need at least 2 points");
    double mean = 0.0;
    for (float t : truth) mean += t;
    mean /= static_cast<double>(truth.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ss_res += (static_cast<double>(truth[i]) - pred[i]) * (static_cast<double>(truth[i]) - pred[i]);
        ss_tot += (truth[i] - mean) * (truth[i] - mean);
    }
    if (ss_tot == 0.0) throw MetricError("r_squared: truth variance is zero");
    return 1.0 - ss_res / ss_tot;
}

struct ProbeResult {
    std::string product;
    std::string kind;
    double r2 = 0.0;
    double mse = 0.0;
    std::int64_t n_train = 0;
    std::int64_t n_test = 0;
    std::int64_t best_epoch = 0;
    std::vector<std::pair<float, float>> scatter; // (pred, truth) on the test set
};

inline ProbeResult evaluate_probe(const VaeParams& params, const VaeConfig& cfg,
                                  const std::vector<std::string>& ids, TileStore& store,
                                  const ProbeConfig& probe_cfg, const std::string& product) {
    Rng rng(probe_cfg.seed, fnv1a64(product + ":" + probe_kind_name(probe_cfg.kind)));
    auto [train_ds, test_ds] = build_probe_dataset(params, cfg, ids, store, probe_cfg, product, rng);
    auto trained = train_probe(train_ds, test_ds, probe_cfg, rng);

    ProbeResult res;
    res.product = product;
    res.kind = probe_kind_name(probe_cfg.kind);
    res.n_train = train_ds.rows();
    res.n_test = test_ds.rows();
    res.best_epoch = trained.best_epoch;
    res.mse = trained.best_test_mse;

    Tensor X({test_ds.rows(), test_ds.dim});
    std::copy(test_ds.features.begin(), test_ds.features.end(), X.vec().begin());
    Graph g(false);
    Rng unused(0);
    const Tensor pred = probe_forward_batch(g, trained.model, X, probe_cfg, false, unused);
    res.scatter.reserve(static_cast<std::size_t>(test_ds.rows()));
    std::vector<float> p(static_cast<std::size_t>(test_ds.rows()));
    for (std::int64_t i = 0; i < test_ds.rows(); ++i) {
        p[static_cast<std::size_t>(i)] = pred.vec()[static_cast<std::size_t>(i)];
        res.scatter.emplace_back(p[static_cast<std::size_t>(i)],
                                 test_ds.targets[static_cast<std::size_t>(i)]);
    }
    res.r2 = r_squared(p, test_ds.targets);
    return res;
}

inline std::vector<ProbeResult> evaluate_probe_suite(const VaeParams& params, const VaeConfig& cfg,
                                                     const std::vector<std::string>& ids,
                                                     TileStore& store,
                                                     const std::vector<std::string>& products,
                                                     const std::vector<ProbeConfig>& kinds) {
    std::vector<ProbeResult> out;
    for (const auto& product : products) {
        for (const auto& pc : kinds) {
            out.push_back(evaluate_probe(params, cfg, ids, store, pc, product));
        }
    }
    return out;
}

} // namespace hsnc
