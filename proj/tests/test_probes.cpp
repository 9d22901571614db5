#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <vector>

#include "hsnc/dataio.hpp"
#include "hsnc/probes.hpp"

using namespace hsnc;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

namespace {

constexpr float kNaN = std::numeric_limits<float>::quiet_NaN();

std::vector<std::vector<float>> param_vecs(const ProbeModel& m) {
    std::vector<std::vector<float>> out;
    for (const auto& [name, t] : m.params) out.push_back(t.vec());
    return out;
}

Tensor& model_param(ProbeModel& m, const std::string& name) {
    for (auto& [n, t] : m.params)
        if (n == name) return t;
    throw std::runtime_error("missing param " + name);
}

ProbeDataset make_dataset(std::int64_t rows, std::int64_t dim,
                          const std::function<float(const float*)>& target, Rng& rng) {
    ProbeDataset ds;
    ds.dim = dim;
    for (std::int64_t r = 0; r < rows; ++r) {
        std::vector<float> z(static_cast<std::size_t>(dim));
        for (auto& v : z) v = static_cast<float>(rng.normal());
        ds.features.insert(ds.features.end(), z.begin(), z.end());
        ds.targets.push_back(target(z.data()));
    }
    return ds;
}

// tiles on disk plus a single hand-crafted "toy" product map per tile, so
// valid-pixel layouts are exact
struct ProbeFixture {
    fs::path root;
    VaeConfig vcfg;
    TrainDataConfig data;
    RadianceStats stats;
    std::vector<std::pair<std::string, L2Normalizer>> norms;
    std::vector<std::string> ids;

    ProbeFixture(const std::string& tag, const std::vector<std::vector<float>>& toy_maps) {
        vcfg.in_channels = 4;
        vcfg.tile = 8;
        vcfg.enc_channels = {8, 8};
        vcfg.n_down = 1; // latent plane is 4x4
        vcfg.latent_channels = 3;
        vcfg.attn_heads = 2;
        vcfg.groups = 4;

        root = fs::temp_directory_path() / ("hsnc_probe_test_" + tag);
        fs::remove_all(root);
        fs::create_directories(root / "tiles");
        fs::create_directories(root / "l2");

        SynthConfig scfg;
        scfg.channels = 4;
        scfg.tile = 8;
        scfg.nan_fraction = 0.0;
        RadianceStatsAccumulator acc;
        std::vector<float> toy_values;
        for (std::size_t i = 0; i < toy_maps.size(); ++i) {
            char buf[16];
            std::snprintf(buf, sizeof buf, "t%02zu", i);
            ids.emplace_back(buf);
            Rng rng(7, i);
            auto [tile, prods] = synth_generate(scfg, rng, buf);
            write_tile(tile, (root / "tiles" / (ids.back() + ".hst")).string());
            L2ProductSet set;
            set.id = ids.back();
            set.h = set.w = 8;
            set.products.push_back({"toy", NormKind::zscore, toy_maps[i]});
            write_products(set, (root / "l2" / (ids.back() + ".hsl2")).string());
            for (float v : toy_maps[i])
                if (std::isfinite(v)) toy_values.push_back(v);
            acc.add(tile);
        }
        stats = acc.finish();
        if (toy_values.size() < 2) toy_values = {0.0f, 1.0f}; // all-NaN maps still need a fit
        norms.emplace_back("toy", fit_l2_normalizer(toy_values, NormKind::zscore, 1.0f));
        data.tile_dir = (root / "tiles").string();
        data.l2_dir = (root / "l2").string();
    }

    ~ProbeFixture() { fs::remove_all(root); }

    TileStore store() { return TileStore(vcfg, data, stats, norms, {"toy"}); }

    // fresh params leave mu identically zero; salt the encoder output conv so
    // features depend on pixels and position
    VaeParams salted_params() const {
        Rng rng(3, 0);
        VaeParams p = init_params(vcfg, rng);
        Rng salt(9, 9);
        for (float& v : p.at("enc.out.weight").vec()) v = 0.3f * static_cast<float>(salt.normal());
        for (float& v : p.at("enc.out.bias").vec()) v = 0.1f * static_cast<float>(salt.normal());
        return p;
    }
};

std::vector<float> valid_map(std::uint64_t stream) {
    Rng rng(21, stream);
    std::vector<float> m(64);
    for (auto& v : m) v = static_cast<float>(rng.uniform_in(-2.0, 2.0));
    return m;
}

} // namespace

TEST_CASE("probe kind names round trip") {
    REQUIRE(std::string(probe_kind_name(ProbeKind::linear)) == "linear");
    REQUIRE(std::string(probe_kind_name(ProbeKind::mlp)) == "mlp");
    REQUIRE(probe_kind_from_name("linear") == ProbeKind::linear);
    REQUIRE(probe_kind_from_name("mlp") == ProbeKind::mlp);
    REQUIRE_THROWS_MATCHES(probe_kind_from_name("svm"), ConfigError,
                           MessageMatches(ContainsSubstring("unknown probe kind 'svm'")));
}

TEST_CASE("probe config: per-kind defaults") {
    const ProbeConfig lin = ProbeConfig::defaults(ProbeKind::linear);
    REQUIRE(lin.kind == ProbeKind::linear);
    REQUIRE(lin.hidden.empty());
    REQUIRE(lin.dropout == 0.0f);
    REQUIRE(lin.lr == 1e-3f);
    REQUIRE(lin.weight_decay == 0.01f);
    REQUIRE(lin.batch == 512);
    REQUIRE(lin.max_epochs == 100);
    REQUIRE(lin.patience == 10);
    REQUIRE(lin.pixels_per_file == 2000);
    REQUIRE(lin.train_fraction == 0.8f);
    REQUIRE(lin.seed == 42u);

    const ProbeConfig mlp = ProbeConfig::defaults(ProbeKind::mlp);
    REQUIRE(mlp.kind == ProbeKind::mlp);
    REQUIRE(mlp.hidden == std::vector<std::int64_t>{512, 512});
    REQUIRE(mlp.dropout == 0.1f);
    REQUIRE(mlp.max_epochs == 2000);
    REQUIRE(mlp.pixels_per_file == 1000);
    REQUIRE(mlp.lr == 1e-3f);
    REQUIRE(mlp.weight_decay == 0.01f);
    REQUIRE(mlp.batch == 512);
    REQUIRE(mlp.patience == 10);

    REQUIRE_NOTHROW(lin.validate());
    REQUIRE_NOTHROW(mlp.validate());
}

TEST_CASE("probe config: validation rejects bad fields") {
    auto base = ProbeConfig::defaults(ProbeKind::linear);

    auto bad = base;
    bad.hidden = {16};
    REQUIRE_THROWS_MATCHES(bad.validate(), ConfigError,
                           MessageMatches(ContainsSubstring("linear probe takes no hidden layers")));

    auto mlp = ProbeConfig::defaults(ProbeKind::mlp);
    mlp.hidden = {512};
    REQUIRE_THROWS_MATCHES(mlp.validate(), ConfigError,
                           MessageMatches(ContainsSubstring("mlp needs two hidden widths")));
    mlp.hidden = {512, 0};
    REQUIRE_THROWS_MATCHES(mlp.validate(), ConfigError,
                           MessageMatches(ContainsSubstring("hidden widths must be >= 1")));

    bad = base;
    bad.dropout = 1.0f;
    REQUIRE_THROWS_MATCHES(bad.validate(), ConfigError,
                           MessageMatches(ContainsSubstring("dropout must be in [0,1)")));
    bad = base;
    bad.lr = 0.0f;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = base;
    bad.weight_decay = -0.1f;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = base;
    bad.batch = 0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = base;
    bad.patience = bad.max_epochs;
    REQUIRE_THROWS_MATCHES(bad.validate(), ConfigError,
                           MessageMatches(ContainsSubstring("patience must be in [1, max_epochs)")));
    bad = base;
    bad.pixels_per_file = 0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = base;
    bad.train_fraction = 1.0f;
    REQUIRE_THROWS_MATCHES(bad.validate(), ConfigError,
                           MessageMatches(ContainsSubstring("train_fraction must be in (0,1)")));
}

TEST_CASE("probe config: JSON round trip starts from kind defaults") {
    ProbeConfig c = ProbeConfig::defaults(ProbeKind::mlp);
    c.hidden = {64, 32};
    c.dropout = 0.25f;
    c.lr = 5e-4f;
    c.weight_decay = 0.0f;
    c.batch = 17;
    c.max_epochs = 55;
    c.patience = 9;
    c.pixels_per_file = 123;
    c.train_fraction = 0.7f;
    c.seed = 99;

    const ProbeConfig back = probe_config_from_json(probe_config_to_json(c));
    REQUIRE(back.kind == c.kind);
    REQUIRE(back.hidden == c.hidden);
    REQUIRE(back.dropout == c.dropout);
    REQUIRE(back.lr == c.lr);
    REQUIRE(back.weight_decay == c.weight_decay);
    REQUIRE(back.batch == c.batch);
    REQUIRE(back.max_epochs == c.max_epochs);
    REQUIRE(back.patience == c.patience);
    REQUIRE(back.pixels_per_file == c.pixels_per_file);
    REQUIRE(back.train_fraction == c.train_fraction);
    REQUIRE(back.seed == c.seed);

    // sparse JSON fills everything else from that kind's defaults
    const ProbeConfig sparse = probe_config_from_json(nlohmann::json{{"kind", "mlp"}});
    REQUIRE(sparse.hidden == std::vector<std::int64_t>{512, 512});
    REQUIRE(sparse.dropout == 0.1f);
    REQUIRE(sparse.max_epochs == 2000);
    REQUIRE(sparse.pixels_per_file == 1000);

    REQUIRE_THROWS_AS(probe_config_from_json(nlohmann::json{{"kind", "tree"}}), ConfigError);
    REQUIRE_THROWS_MATCHES(probe_config_from_json(nlohmann::json{{"hidden", "lots"}}), ConfigError,
                           MessageMatches(ContainsSubstring("malformed probe config JSON")));
}

TEST_CASE("init_probe: shapes, parameter count, and init ranges") {
    Rng rng(4, 0);

    ProbeModel lin = init_probe(ProbeConfig::defaults(ProbeKind::linear), 32, rng);
    REQUIRE(lin.params.size() == 2);
    REQUIRE(lin.params[0].first == "out.weight");
    REQUIRE(lin.params[0].second.shape() == std::vector<std::int64_t>{1, 32});
    REQUIRE(lin.params[1].first == "out.bias");
    REQUIRE(lin.params[1].second.shape() == std::vector<std::int64_t>{1});
    REQUIRE(lin.total_params() == 33);

    ProbeModel mlp = init_probe(ProbeConfig::defaults(ProbeKind::mlp), 32, rng);
    REQUIRE(mlp.params.size() == 6);
    REQUIRE(mlp.params[0].first == "fc1.weight");
    REQUIRE(mlp.params[0].second.shape() == std::vector<std::int64_t>{512, 32});
    REQUIRE(mlp.params[2].first == "fc2.weight");
    REQUIRE(mlp.params[2].second.shape() == std::vector<std::int64_t>{512, 512});
    REQUIRE(mlp.params[4].first == "out.weight");
    REQUIRE(mlp.params[4].second.shape() == std::vector<std::int64_t>{1, 512});
    // 512c+512 + 512*512+512 + 512+1 for c=32
    REQUIRE(mlp.total_params() == 512 * 32 + 512 + 512 * 512 + 512 + 512 + 1);
    REQUIRE(mlp.total_params() == 280065);

    // weights live in (-1/sqrt(din), 1/sqrt(din)); biases start at zero
    const float bound1 = 1.0f / std::sqrt(32.0f);
    for (float v : mlp.params[0].second.vec()) {
        REQUIRE(v > -bound1);
        REQUIRE(v < bound1);
    }
    for (float v : mlp.params[1].second.vec()) REQUIRE(v == 0.0f);
    for (float v : mlp.params[5].second.vec()) REQUIRE(v == 0.0f);

    Rng ra(4, 0), rb(4, 0);
    const auto a = param_vecs(init_probe(ProbeConfig::defaults(ProbeKind::mlp), 8, ra));
    const auto b = param_vecs(init_probe(ProbeConfig::defaults(ProbeKind::mlp), 8, rb));
    REQUIRE(a == b);

    Rng rc(4, 0);
    REQUIRE_THROWS_MATCHES(init_probe(ProbeConfig::defaults(ProbeKind::linear), 0, rc), ConfigError,
                           MessageMatches(ContainsSubstring("feature dim must be >= 1")));
}

TEST_CASE("probe_forward: linear closed form") {
    ProbeConfig cfg = ProbeConfig::defaults(ProbeKind::linear);
    Rng rng(5, 0);
    ProbeModel m = init_probe(cfg, 3, rng);

    SECTION("zero weights predict the bias for every input") {
        model_param(m, "out.weight").vec() = {0.0f, 0.0f, 0.0f};
        model_param(m, "out.bias").vec() = {0.625f};
        for (float base : {-3.0f, 0.0f, 7.5f}) {
            REQUIRE(probe_forward(m, {base, base + 1, base - 2}, cfg) == 0.625f);
        }
    }

    SECTION("general case matches the dot product") {
        model_param(m, "out.weight").vec() = {0.25f, -0.5f, 1.0f};
        model_param(m, "out.bias").vec() = {0.125f};
        REQUIRE_THAT(probe_forward(m, {2.0f, 4.0f, 8.0f}, cfg), WithinAbs(6.625, 1e-6));
    }

    SECTION("feature length is checked") {
        REQUIRE_THROWS_MATCHES(probe_forward(m, {1.0f, 2.0f}, cfg), DimensionError,
                               MessageMatches(ContainsSubstring("expected 3 features, got 2")));
        Graph g(false);
        Tensor bad({2});
        Rng unused(0);
        REQUIRE_THROWS_MATCHES(probe_forward_batch(g, m, bad, cfg, false, unused), DimensionError,
                               MessageMatches(ContainsSubstring("features must be [N,3]")));
    }
}

TEST_CASE("probe_forward: mlp matches a hand-rolled reference") {
    ProbeConfig cfg = ProbeConfig::defaults(ProbeKind::mlp);
    cfg.hidden = {3, 2};
    Rng rng(6, 0);
    ProbeModel m = init_probe(cfg, 2, rng);

    const std::vector<float> W1 = {0.5f, -1.0f, 1.5f, 0.25f, -0.75f, 2.0f};
    const std::vector<float> b1 = {0.1f, -0.2f, 0.3f};
    const std::vector<float> W2 = {1.0f, -0.5f, 0.25f, -1.5f, 0.5f, 2.0f};
    const std::vector<float> b2 = {0.05f, -0.1f};
    const std::vector<float> W3 = {2.0f, -3.0f};
    const std::vector<float> b3 = {0.4f};
    model_param(m, "fc1.weight").vec() = W1;
    model_param(m, "fc1.bias").vec() = b1;
    model_param(m, "fc2.weight").vec() = W2;
    model_param(m, "fc2.bias").vec() = b2;
    model_param(m, "out.weight").vec() = W3;
    model_param(m, "out.bias").vec() = b3;

    auto reference = [&](const std::vector<float>& z) {
        std::vector<double> h1(3), h2(2);
        for (int i = 0; i < 3; ++i) {
            double s = b1[static_cast<std::size_t>(i)];
            for (int j = 0; j < 2; ++j) s += static_cast<double>(W1[static_cast<std::size_t>(i * 2 + j)]) * z[static_cast<std::size_t>(j)];
            h1[static_cast<std::size_t>(i)] = std::max(0.0, s);
        }
        for (int i = 0; i < 2; ++i) {
            double s = b2[static_cast<std::size_t>(i)];
            for (int j = 0; j < 3; ++j) s += static_cast<double>(W2[static_cast<std::size_t>(i * 3 + j)]) * h1[static_cast<std::size_t>(j)];
            h2[static_cast<std::size_t>(i)] = std::max(0.0, s);
        }
        double y = b3[0];
        for (int i = 0; i < 2; ++i) y += static_cast<double>(W3[static_cast<std::size_t>(i)]) * h2[static_cast<std::size_t>(i)];
        return y;
    };

    REQUIRE_THAT(probe_forward(m, {0.3f, -0.6f}, cfg), WithinAbs(2.1, 1e-6));
    Rng zr(13, 0);
    for (int trial = 0; trial < 20; ++trial) {
        const std::vector<float> z = {static_cast<float>(zr.normal()), static_cast<float>(zr.normal())};
        REQUIRE_THAT(probe_forward(m, z, cfg), WithinAbs(reference(z), 1e-6));
    }

    SECTION("zero first layer makes the output input-independent") {
        model_param(m, "fc1.weight").vec() = std::vector<float>(6, 0.0f);
        model_param(m, "fc1.bias").vec() = std::vector<float>(3, 0.0f);
        // y = W3 . relu(b2) + b3
        const double expect = 2.0 * 0.05 + -3.0 * 0.0 + 0.4;
        for (float base : {-5.0f, 0.0f, 2.5f}) {
            REQUIRE_THAT(probe_forward(m, {base, -base}, cfg), WithinAbs(expect, 1e-6));
        }
    }
}

TEST_CASE("probe_forward: dropout only fires in training mode") {
    ProbeConfig cfg = ProbeConfig::defaults(ProbeKind::mlp);
    cfg.hidden = {4, 4};
    cfg.dropout = 0.5f;
    Rng rng(8, 0);
    ProbeModel m = init_probe(cfg, 3, rng);
    for (auto& [name, t] : m.params) {
        if (name.ends_with(".bias")) {
            for (auto& v : t.vec()) v = 0.2f; // keep relu paths alive
        }
    }
    const std::vector<float> z = {0.4f, -0.2f, 0.9f};

    const float eval1 = probe_forward(m, z, cfg);
    const float eval2 = probe_forward(m, z, cfg);
    REQUIRE(eval1 == eval2);

    Rng r1(42, 0), r2(42, 0);
    const float train1 = probe_forward(m, z, cfg, true, r1);
    const float train2 = probe_forward(m, z, cfg, true, r2);
    REQUIRE(train1 == train2);
    REQUIRE(train1 != eval1);

    ProbeConfig nodrop = cfg;
    nodrop.dropout = 0.0f;
    Rng r3(42, 0);
    REQUIRE(probe_forward(m, z, nodrop, true, r3) == eval1);
}

TEST_CASE("probe_eval_mse: hand value and empty dataset") {
    ProbeConfig cfg = ProbeConfig::defaults(ProbeKind::linear);
    Rng rng(5, 0);
    ProbeModel m = init_probe(cfg, 2, rng);
    model_param(m, "out.weight").vec() = {1.0f, -1.0f};
    model_param(m, "out.bias").vec() = {0.5f};

    ProbeDataset ds;
    ds.dim = 2;
    ds.features = {1.0f, 2.0f, 3.0f, 1.0f};
    ds.targets = {0.0f, 2.0f};
    // preds: -0.5 and 2.5, so both squared errors are 0.25
    REQUIRE_THAT(probe_eval_mse(m, ds, cfg), WithinAbs(0.25, 1e-7));

    ProbeDataset empty;
    REQUIRE_THROWS_MATCHES(probe_eval_mse(m, empty, cfg), UsageError,
                           MessageMatches(ContainsSubstring("empty dataset")));
}

TEST_CASE("train_probe: early stopping returns the best epoch's parameters") {
    ProbeConfig cfg = ProbeConfig::defaults(ProbeKind::linear);
    cfg.batch = 8;
    Rng data_rng(30, 0);
    const ProbeDataset ds =
        make_dataset(32, 3, [&](const float* z) { return z[0] - 0.5f * z[2] + 0.1f; }, data_rng);

    std::map<std::int64_t, std::vector<std::vector<float>>> snaps;
    auto hook = [&snaps](const ProbeModel& m, std::int64_t epoch) {
        snaps[epoch] = param_vecs(m);
        return static_cast<double>(std::llabs(epoch - 7)) + 1.0;
    };

    Rng rng(31, 0);
    const ProbeTrainResult res = train_probe(ds, ProbeDataset{}, cfg, rng, hook);

    // min at epoch 7, no improvement through 8..17, patience 10 halts at 17
    REQUIRE(res.best_epoch == 7);
    REQUIRE(res.best_test_mse == 1.0);
    REQUIRE(res.history.size() == 17);
    for (std::size_t i = 0; i < res.history.size(); ++i) {
        REQUIRE(res.history[i].epoch == static_cast<std::int64_t>(i) + 1);
        REQUIRE(res.history[i].test_mse ==
                static_cast<double>(std::llabs(static_cast<std::int64_t>(i) + 1 - 7)) + 1.0);
        REQUIRE(res.history[i].train_mse >= 0.0);
    }
    REQUIRE(param_vecs(res.model) == snaps.at(7));
    REQUIRE(param_vecs(res.model) != snaps.at(17));
}

TEST_CASE("train_probe: runs to max_epochs while the loss keeps improving") {
    ProbeConfig cfg = ProbeConfig::defaults(ProbeKind::linear);
    cfg.batch = 8;
    cfg.max_epochs = 12;
    cfg.patience = 5;
    Rng data_rng(32, 0);
    const ProbeDataset ds = make_dataset(16, 2, [](const float* z) { return z[0]; }, data_rng);

    std::map<std::int64_t, std::vector<std::vector<float>>> snaps;
    auto hook = [&snaps](const ProbeModel& m, std::int64_t epoch) {
        snaps[epoch] = param_vecs(m);
        return 1.0 / static_cast<double>(epoch);
    };
    Rng rng(33, 0);
    const ProbeTrainResult res = train_probe(ds, ProbeDataset{}, cfg, rng, hook);
    REQUIRE(res.history.size() == 12);
    REQUIRE(res.best_epoch == 12);
    REQUIRE(res.best_test_mse == 1.0 / 12.0);
    REQUIRE(param_vecs(res.model) == snaps.at(12));

    Rng r2(33, 0);
    REQUIRE_THROWS_MATCHES(train_probe(ProbeDataset{}, ds, cfg, r2), UsageError,
                           MessageMatches(ContainsSubstring("empty training set")));
    REQUIRE_THROWS_MATCHES(train_probe(ds, ProbeDataset{}, cfg, r2), UsageError,
                           MessageMatches(ContainsSubstring("empty test set")));
}

TEST_CASE("train_probe: zero targets drive a linear probe to zero") {
    ProbeConfig cfg = ProbeConfig::defaults(ProbeKind::linear);
    cfg.lr = 1e-4f;
    cfg.batch = 32;
    cfg.max_epochs = 1000;
    cfg.patience = 50;

    Rng data_rng(40, 0);
    auto zero = [](const float*) { return 0.0f; };
    const ProbeDataset train = make_dataset(256, 3, zero, data_rng);
    const ProbeDataset test = make_dataset(64, 3, zero, data_rng);

    Rng rng(41, 0);
    const ProbeTrainResult res = train_probe(train, test, cfg, rng);
    REQUIRE(res.best_test_mse < 1e-6);
    REQUIRE(probe_eval_mse(res.model, test, cfg) == res.best_test_mse);
    for (const auto& [name, t] : res.model.params) {
        for (float v : t.vec()) REQUIRE(std::abs(v) < 0.01f);
    }
}

TEST_CASE("train_probe: recovers a planted linear map") {
    const std::int64_t dim = 8;
    Rng wr(11, 0);
    std::vector<float> w(static_cast<std::size_t>(dim));
    for (auto& v : w) v = static_cast<float>(wr.uniform_in(-1.0, 1.0));
    auto target = [&w, dim](const float* z) {
        float s = 0.3f;
        for (std::int64_t i = 0; i < dim; ++i) s += w[static_cast<std::size_t>(i)] * z[i];
        return s;
    };

    Rng data_rng(42, 0);
    const ProbeDataset train = make_dataset(1600, dim, target, data_rng);
    const ProbeDataset test = make_dataset(400, dim, target, data_rng);

    ProbeConfig cfg = ProbeConfig::defaults(ProbeKind::linear);
    cfg.batch = 128;
    cfg.max_epochs = 1000;
    cfg.patience = 25;

    Rng rng(43, 0);
    const ProbeTrainResult res = train_probe(train, test, cfg, rng);

    Tensor X({test.rows(), dim});
    std::copy(test.features.begin(), test.features.end(), X.vec().begin());
    Graph g(false);
    Rng unused(0);
    const Tensor pred = probe_forward_batch(g, res.model, X, cfg, false, unused);
    const double r2 = r_squared(pred.vec(), test.targets);
    INFO("linear recovery R^2 = " << r2 << " best epoch " << res.best_epoch);
    REQUIRE(r2 > 0.999);
}

TEST_CASE("train_probe: mlp beats linear on a planted nonlinear target") {
    const std::int64_t dim = 4;
    const std::vector<float> w = {0.5f, -0.3f, 0.8f, 0.2f};
    auto target = [&w, dim](const float* z) {
        float u = 0.0f;
        for (std::int64_t i = 0; i < dim; ++i) u += w[static_cast<std::size_t>(i)] * z[i];
        return std::sin(3.0f * u);
    };

    Rng data_rng(50, 0);
    const ProbeDataset train = make_dataset(1600, dim, target, data_rng);
    const ProbeDataset test = make_dataset(400, dim, target, data_rng);

    auto test_r2 = [&](const ProbeModel& m, const ProbeConfig& cfg) {
        Tensor X({test.rows(), dim});
        std::copy(test.features.begin(), test.features.end(), X.vec().begin());
        Graph g(false);
        Rng unused(0);
        const Tensor pred = probe_forward_batch(g, m, X, cfg, false, unused);
        return r_squared(pred.vec(), test.targets);
    };

    ProbeConfig lin = ProbeConfig::defaults(ProbeKind::linear);
    lin.batch = 128;
    lin.max_epochs = 200;
    lin.patience = 20;
    Rng lr(51, 0);
    const double r2_lin = test_r2(train_probe(train, test, lin, lr).model, lin);

    ProbeConfig mlp = ProbeConfig::defaults(ProbeKind::mlp);
    mlp.hidden = {64, 64};
    mlp.dropout = 0.0f;
    mlp.batch = 128;
    mlp.max_epochs = 600;
    mlp.patience = 40;
    Rng mr(52, 0);
    const double r2_mlp = test_r2(train_probe(train, test, mlp, mr).model, mlp);

    INFO("linear R^2 = " << r2_lin << ", mlp R^2 = " << r2_mlp);
    REQUIRE(r2_mlp - r2_lin >= 0.2);
}

TEST_CASE("r_squared: hand values and errors") {
    REQUIRE(r_squared({1.0f, 2.0f, 3.0f}, {1.0f, 2.0f, 3.0f}) == 1.0);
    REQUIRE(r_squared({2.0f, 2.0f, 2.0f}, {1.0f, 2.0f, 3.0f}) == 0.0);
    REQUIRE_THAT(r_squared({1.0f, 2.0f, 4.0f}, {1.0f, 2.0f, 3.0f}), WithinAbs(0.5, 1e-12));

    REQUIRE_THROWS_MATCHES(r_squared({1.0f, 2.0f}, {1.0f, 2.0f, 3.0f}), UsageError,
                           MessageMatches(ContainsSubstring("2 predictions vs 3 truths")));
    REQUIRE_THROWS_MATCHES(r_squared({1.0f}, {1.0f}), UsageError,
                           MessageMatches(ContainsSubstring("need at least 2 points")));
    REQUIRE_THROWS_MATCHES(r_squared({1.0f, 2.0f}, {3.0f, 3.0f}), MetricError,
                           MessageMatches(ContainsSubstring("truth variance is zero")));
}

TEST_CASE("build_probe_dataset: exhaustion and split sizes") {
    // one tile, all NaN except one raw pixel inside 5 of the 16 pooled blocks
    std::vector<float> map(64, kNaN);
    const std::vector<std::pair<std::int64_t, float>> plants = {
        {0 * 8 + 0, 1.0f}, {0 * 8 + 6, 2.0f}, {2 * 8 + 2, 3.0f}, {4 * 8 + 4, 4.0f}, {6 * 8 + 6, 5.0f}};
    for (const auto& [idx, v] : plants) map[static_cast<std::size_t>(idx)] = v;

    ProbeFixture fx("exhaust", {map});
    TileStore store = fx.store();
    const VaeParams params = fx.salted_params();
    ProbeConfig pcfg = ProbeConfig::defaults(ProbeKind::linear); // pixels_per_file 2000

    Rng rng(60, 0);
    const auto [train, test] = build_probe_dataset(params, fx.vcfg, fx.ids, store, pcfg, "toy", rng);
    REQUIRE(train.rows() + test.rows() == 5);
    REQUIRE(train.rows() == 4); // floor(0.8 * 5)
    REQUIRE(test.rows() == 1);
    REQUIRE(train.dim == 3);
    REQUIRE(test.dim == 3);
    REQUIRE(train.features.size() == 12);

    // the sampled positions are exactly the valid pooled blocks
    std::vector<std::pair<std::int64_t, std::int64_t>> got;
    for (const auto& r : train.provenance) got.emplace_back(r.y, r.x);
    for (const auto& r : test.provenance) got.emplace_back(r.y, r.x);
    std::sort(got.begin(), got.end());
    const std::vector<std::pair<std::int64_t, std::int64_t>> want = {
        {0, 0}, {0, 3}, {1, 1}, {2, 2}, {3, 3}};
    REQUIRE(got == want);

    // targets are the normalized planted values (single valid pixel per block)
    std::vector<float> got_t = train.targets;
    got_t.insert(got_t.end(), test.targets.begin(), test.targets.end());
    std::sort(got_t.begin(), got_t.end());
    std::vector<float> want_t = transform_l2({1.0f, 2.0f, 3.0f, 4.0f, 5.0f},
                                             fx.norms[0].second, Direction::forward);
    std::sort(want_t.begin(), want_t.end());
    REQUIRE(got_t == want_t);
    for (float t : got_t) REQUIRE(std::isfinite(t));
}

TEST_CASE("build_probe_dataset: NaN blocks are excluded") {
    // top half of the raw map is NaN, so pooled rows 0..1 are invalid
    std::vector<float> map = valid_map(0);
    for (std::size_t i = 0; i < 32; ++i) map[i] = kNaN;

    ProbeFixture fx("nanhalf", {map});
    TileStore store = fx.store();
    const VaeParams params = fx.salted_params();
    ProbeConfig pcfg = ProbeConfig::defaults(ProbeKind::linear);

    Rng rng(61, 0);
    const auto [train, test] = build_probe_dataset(params, fx.vcfg, fx.ids, store, pcfg, "toy", rng);
    REQUIRE(train.rows() + test.rows() == 8);
    for (const auto& r : train.provenance) REQUIRE(r.y >= 2);
    for (const auto& r : test.provenance) REQUIRE(r.y >= 2);
    for (float t : train.targets) REQUIRE(std::isfinite(t));
    for (float t : test.targets) REQUIRE(std::isfinite(t));
}

TEST_CASE("build_probe_dataset: provenance rows align with re-encoded latents") {
    ProbeFixture fx("align", {valid_map(1), valid_map(2), valid_map(3)});
    TileStore store = fx.store();
    const VaeParams params = fx.salted_params();
    ProbeConfig pcfg = ProbeConfig::defaults(ProbeKind::linear);
    pcfg.pixels_per_file = 6;

    Rng rng(62, 0);
    const auto [train, test] = build_probe_dataset(params, fx.vcfg, fx.ids, store, pcfg, "toy", rng);
    REQUIRE(train.rows() + test.rows() == 18);
    REQUIRE(train.rows() == 14); // floor(0.8 * 18)

    auto check = [&](const ProbeDataset& ds) {
        const std::int64_t hw = fx.vcfg.latent_hw();
        for (std::int64_t r = 0; r < ds.rows(); ++r) {
            const auto& row = ds.provenance[static_cast<std::size_t>(r)];
            const auto& px = store.normalized(row.tile_id);
            Tensor x({1, fx.vcfg.in_channels, fx.vcfg.tile, fx.vcfg.tile});
            std::copy(px.begin(), px.end(), x.vec().begin());
            Graph g(false);
            const GaussianLatent lat = encode(g, x, params, fx.vcfg);
            const std::int64_t pos = row.y * hw + row.x;
            for (std::int64_t ch = 0; ch < ds.dim; ++ch) {
                REQUIRE(ds.features[static_cast<std::size_t>(r * ds.dim + ch)] ==
                        lat.mu.vec()[static_cast<std::size_t>(ch * hw * hw + pos)]);
            }
            REQUIRE(ds.targets[static_cast<std::size_t>(r)] ==
                    store.targets(row.tile_id)[0][static_cast<std::size_t>(pos)]);
        }
    };
    check(train);
    check(test);
}

TEST_CASE("build_probe_dataset: deterministic per rng stream") {
    ProbeFixture fx("determ", {valid_map(4), valid_map(5)});
    TileStore store = fx.store();
    const VaeParams params = fx.salted_params();
    ProbeConfig pcfg = ProbeConfig::defaults(ProbeKind::linear);
    pcfg.pixels_per_file = 9;

    auto run = [&](std::uint64_t stream) {
        Rng rng(63, stream);
        return build_probe_dataset(params, fx.vcfg, fx.ids, store, pcfg, "toy", rng);
    };
    const auto [tr1, te1] = run(0);
    const auto [tr2, te2] = run(0);
    REQUIRE(tr1.features == tr2.features);
    REQUIRE(tr1.targets == tr2.targets);
    REQUIRE(te1.features == te2.features);
    REQUIRE(te1.targets == te2.targets);
    for (std::size_t i = 0; i < tr1.provenance.size(); ++i) {
        REQUIRE(tr1.provenance[i].tile_id == tr2.provenance[i].tile_id);
        REQUIRE(tr1.provenance[i].y == tr2.provenance[i].y);
        REQUIRE(tr1.provenance[i].x == tr2.provenance[i].x);
    }

    const auto [tr3, te3] = run(1);
    REQUIRE(tr1.rows() == tr3.rows());
    REQUIRE((tr1.targets != tr3.targets || te1.targets != te3.targets));
}

TEST_CASE("build_probe_dataset: errors") {
    ProbeFixture fx("errs", {std::vector<float>(64, kNaN)});
    TileStore store = fx.store();
    const VaeParams params = fx.salted_params();
    ProbeConfig pcfg = ProbeConfig::defaults(ProbeKind::linear);

    Rng rng(64, 0);
    REQUIRE_THROWS_MATCHES(build_probe_dataset(params, fx.vcfg, fx.ids, store, pcfg, "nope", rng),
                           UsageError,
                           MessageMatches(ContainsSubstring("does not serve product 'nope'")));
    REQUIRE_THROWS_MATCHES(build_probe_dataset(params, fx.vcfg, fx.ids, store, pcfg, "toy", rng),
                           DataError,
                           MessageMatches(ContainsSubstring("no valid 'toy' pixels across 1 files")));
}

TEST_CASE("evaluate_probe: schema, determinism, frozen encoder") {
    ProbeFixture fx("eval", {valid_map(6), valid_map(7)});
    TileStore store = fx.store();
    const VaeParams params = fx.salted_params();

    ProbeConfig pcfg = ProbeConfig::defaults(ProbeKind::linear);
    pcfg.pixels_per_file = 16;
    pcfg.batch = 16;
    pcfg.max_epochs = 8;
    pcfg.patience = 3;

    std::vector<std::vector<float>> before;
    for (const auto& [n, t] : params.named) before.push_back(t.vec());

    const ProbeResult res = evaluate_probe(params, fx.vcfg, fx.ids, store, pcfg, "toy");
    REQUIRE(res.product == "toy");
    REQUIRE(res.kind == "linear");
    REQUIRE(res.n_train == 25); // floor(0.8 * 32)
    REQUIRE(res.n_test == 7);
    REQUIRE(res.best_epoch >= 1);
    REQUIRE(res.best_epoch <= pcfg.max_epochs);
    REQUIRE(res.scatter.size() == 7);
    REQUIRE(res.mse >= 0.0);
    REQUIRE(res.r2 <= 1.0);

    std::vector<float> preds, truths;
    for (const auto& [p, t] : res.scatter) {
        preds.push_back(p);
        truths.push_back(t);
    }
    REQUIRE(res.r2 == r_squared(preds, truths));

    std::size_t i = 0;
    for (const auto& [n, t] : params.named) REQUIRE(t.vec() == before[i++]);

    const ProbeResult res2 = evaluate_probe(params, fx.vcfg, fx.ids, store, pcfg, "toy");
    REQUIRE(res2.r2 == res.r2);
    REQUIRE(res2.mse == res.mse);
    REQUIRE(res2.best_epoch == res.best_epoch);
    REQUIRE(res2.scatter == res.scatter);
}

TEST_CASE("evaluate_probe_suite: product x kind cartesian product") {
    ProbeFixture fx("suite", {valid_map(8), valid_map(9)});
    TileStore store = fx.store();
    const VaeParams params = fx.salted_params();

    ProbeConfig lin = ProbeConfig::defaults(ProbeKind::linear);
    lin.pixels_per_file = 12;
    lin.batch = 16;
    lin.max_epochs = 5;
    lin.patience = 2;
    ProbeConfig mlp = ProbeConfig::defaults(ProbeKind::mlp);
    mlp.hidden = {8, 8};
    mlp.pixels_per_file = 12;
    mlp.batch = 16;
    mlp.max_epochs = 5;
    mlp.patience = 2;

    const auto results = evaluate_probe_suite(params, fx.vcfg, fx.ids, store, {"toy"}, {lin, mlp});
    REQUIRE(results.size() == 2);
    REQUIRE(results[0].product == "toy");
    REQUIRE(results[0].kind == "linear");
    REQUIRE(results[1].product == "toy");
    REQUIRE(results[1].kind == "mlp");
    for (const auto& r : results) {
        REQUIRE(r.n_train == 19); // floor(0.8 * 24)
        REQUIRE(r.n_test == 5);
        REQUIRE(r.scatter.size() == 5);
    }
}
