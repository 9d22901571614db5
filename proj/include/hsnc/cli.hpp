#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hsnc/codec.hpp"
#include "hsnc/dataio.hpp"
#include "hsnc/errors.hpp"
#include "hsnc/normalize.hpp"
#include "hsnc/probes.hpp"
#include "hsnc/train.hpp"
#include "hsnc/vae.hpp"
#include "hsnc/version.hpp"

namespace hsnc::cli {

// ---------------------------------------------------------------------------
// Run manifests: one appended JSON line per executed command.
// ---------------------------------------------------------------------------

struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;
};

inline std::string config_hash(const nlohmann::json& j) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

inline void append_manifest(const std::filesystem::path& dir, const RunManifest& m) {
    std::filesystem::create_directories(dir);
    nlohmann::json j{
        {"command", m.command},       {"version", kVersion},
        {"seed", m.seed},             {"config_hash", config_hash(m.config)},
        {"config", m.config},         {"inputs", m.inputs},
        {"outputs", m.outputs},       {"wall_seconds", m.wall_seconds},
    };
    std::ofstream os(dir / "manifest.jsonl", std::ios::app);
    if (!os) throw DataError("cannot append manifest in '" + dir.string() + "'");
    os << j.dump() << "\n";
}

namespace detail {

inline nlohmann::json load_json_file(const std::string& path, const char* what) {
    std::ifstream is(path);
    if (!is) throw DataError(std::string("cannot open ") + what + " '" + path + "'");
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed ") + what + " JSON in '" + path + "': " + e.what());
    }
}

inline RadianceStats load_stats(const std::string& path) {
    return radiance_stats_from_json(load_json_file(path, "stats file"));
}

inline std::vector<std::pair<std::string, L2Normalizer>> load_normalizers(const std::string& path) {
    const auto j = load_json_file(path, "normalizer file");
    std::vector<std::pair<std::string, L2Normalizer>> out;
    try {
        for (const auto& entry : j.at("normalizers")) out.push_back(l2_normalizer_from_json(entry));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed normalizer JSON in '" + path + "': " + e.what());
    }
    return out;
}

inline void require(const std::string& value, const char* flag, const char* cmd) {
    if (value.empty()) {
        throw UsageError(std::string(cmd) + ": " + flag + " is required");
    }
}

inline std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto end = comma == std::string::npos ? s.size() : comma;
        if (end > start) out.push_back(s.substr(start, end - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline LatentDtype parse_dtype(const std::string& s) {
    if (s == "f32") return LatentDtype::f32;
    if (s == "f16") return LatentDtype::f16;
    throw UsageError("unknown dtype '" + s + "' (expected f32 or f16)");
}

inline LatentContent parse_content(const std::string& s) {
    if (s == "mean") return LatentContent::mean_only;
    if (s == "mean_logvar") return LatentContent::mean_logvar;
    throw UsageError("unknown content '" + s + "' (expected mean or mean_logvar)");
}

// Unit scales for the asinh-normalized column products.
inline float default_unit_scale(const std::string& product) {
    if (product == "no2") return 1e15f;
    if (product == "hcho") return 1e16f;
    return 1.0f;
}

inline bool print_config_and_exit(bool flag, const nlohmann::json& merged) {
    if (flag) std::cout << merged.dump(2) << "\n";
    return flag;
}

struct Stopwatch {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthOpts {
    std::string config_path, out, prefix = "tile";
    std::uint64_t seed = 42;
    std::int64_t count = 16;
    bool seed_given = false, count_given = false, prefix_given = false;
    bool print_config = false;
};

inline int cmd_synth(const SynthOpts& o) {
    nlohmann::json merged{{"synth", synth_config_to_json(SynthConfig{})},
                          {"count", o.count},
                          {"seed", o.seed},
                          {"prefix", o.prefix}};
    if (!o.config_path.empty()) {
        const auto file = load_json_file(o.config_path, "synth config");
        merged.merge_patch(file);
    }
    if (o.count_given) merged["count"] = o.count;
    if (o.seed_given) merged["seed"] = o.seed;
    if (o.prefix_given) merged["prefix"] = o.prefix;
    if (print_config_and_exit(o.print_config, merged)) return 0;
    require(o.out, "--out", "synth");

    const SynthConfig cfg = synth_config_from_json(merged["synth"]);
    cfg.validate();
    const auto count = merged["count"].get<std::int64_t>();
    const auto seed = merged["seed"].get<std::uint64_t>();
    const auto prefix = merged["prefix"].get<std::string>();
    if (count < 1) throw UsageError("synth: --count must be >= 1");

    Stopwatch sw;
    const std::filesystem::path out(o.out);
    std::filesystem::create_directories(out / "tiles");
    std::filesystem::create_directories(out / "l2");
    for (std::int64_t i = 0; i < count; ++i) {
        char suffix[24];
        std::snprintf(suffix, sizeof suffix, "_%05lld", static_cast<long long>(i));
        const std::string id = prefix + suffix;
        Rng rng(seed, static_cast<std::uint64_t>(i));
        auto [tile, set] = synth_generate(cfg, rng, id);
        write_tile(tile, (out / "tiles" / (id + ".hst")).string());
        write_products(set, (out / "l2" / (id + ".hsl2")).string());
    }

    RunManifest m;
    m.command = "synth";
    m.config = merged;
    if (!o.config_path.empty()) m.inputs.push_back(o.config_path);
    m.outputs = {(out / "tiles").string(), (out / "l2").string()};
    m.seed = seed;
    m.wall_seconds = sw.seconds();
    append_manifest(out, m);
    return 0;
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

struct StatsOpts {
    std::string data, tiles_dir, l2_dir, out;
    int train_pct = 70;
    bool print_config = false;
};

inline int cmd_stats(const StatsOpts& o) {
    const std::string tile_dir =
        !o.tiles_dir.empty() ? o.tiles_dir : (std::filesystem::path(o.data) / "tiles").string();
    const std::string l2_dir =
        !o.l2_dir.empty() ? o.l2_dir : (std::filesystem::path(o.data) / "l2").string();
    nlohmann::json merged{
        {"tiles_dir", tile_dir}, {"l2_dir", l2_dir}, {"train_pct", o.train_pct}};
    if (print_config_and_exit(o.print_config, merged)) return 0;
    if (o.data.empty() && (o.tiles_dir.empty() || o.l2_dir.empty())) {
        throw UsageError("stats: --data (or --tiles-dir and --l2-dir) is required");
    }
    require(o.out, "--out", "stats");

    Stopwatch sw;
    const auto ids = list_tile_ids(tile_dir);
    if (ids.empty()) throw DataError("no .hst tiles in '" + tile_dir + "'");
    const auto split = split_files(ids, o.train_pct);
    if (split.train_ids.empty()) throw DataError("train split is empty");

    RadianceStatsAccumulator acc;
    std::vector<std::string> product_names;
    std::vector<NormKind> product_kinds;
    std::vector<std::vector<float>> product_values;
    for (const auto& id : split.train_ids) {
        acc.add(read_tile((std::filesystem::path(tile_dir) / (id + ".hst")).string()));
        const auto set = read_products((std::filesystem::path(l2_dir) / (id + ".hsl2")).string());
        if (product_names.empty()) {
            for (const auto& p : set.products) {
                product_names.push_back(p.name);
                product_kinds.push_back(p.kind);
            }
            product_values.resize(product_names.size());
        }
        for (std::size_t pi = 0; pi < product_names.size(); ++pi) {
            const auto& p = set.find(product_names[pi]);
            for (float v : p.data) {
                if (std::isfinite(v)) product_values[pi].push_back(v);
            }
        }
    }
    const RadianceStats stats = acc.finish();

    nlohmann::json normalizers = nlohmann::json::array();
    for (std::size_t pi = 0; pi < product_names.size(); ++pi) {
        const auto n = fit_l2_normalizer(product_values[pi], product_kinds[pi],
                                         default_unit_scale(product_names[pi]));
        normalizers.push_back(l2_normalizer_to_json(product_names[pi], n));
    }

    const std::filesystem::path out(o.out);
    std::filesystem::create_directories(out);
    auto dump_to = [&out](const char* name, const nlohmann::json& j) {
        std::ofstream os(out / name);
        if (!os) throw DataError("cannot open '" + (out / name).string() + "' for writing");
        os << j.dump(2) << "\n";
    };
    dump_to("stats.json", radiance_stats_to_json(stats));
    dump_to("normalizers.json", nlohmann::json{{"normalizers", normalizers}});
    dump_to("split.json", split_to_json(split));

    RunManifest m;
    m.command = "stats";
    m.config = merged;
    m.inputs = {tile_dir, l2_dir};
    m.outputs = {(out / "stats.json").string(), (out / "normalizers.json").string(),
                 (out / "split.json").string()};
    m.wall_seconds = sw.seconds();
    append_manifest(out, m);
    return 0;
}

// ---------------------------------------------------------------------------
// train-vae / train-supervised
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string config_path, out, resume;
    std::string data, tiles_dir, l2_dir, stats, normalizers, products;
    std::int64_t steps = 0, batch = 0;
    std::uint64_t seed = 0;
    bool steps_given = false, batch_given = false, seed_given = false;
    bool print_config = false;
};

inline int cmd_train(const TrainOpts& o, bool supervised) {
    const char* cmd = supervised ? "train-supervised" : "train-vae";
    nlohmann::json merged{{"vae", vae_config_to_json(VaeConfig{})},
                          {"train", train_config_to_json(TrainConfig{})},
                          {"data", data_config_to_json(TrainDataConfig{})}};
    if (!o.config_path.empty()) {
        merged.merge_patch(load_json_file(o.config_path, "train config"));
    }
    if (!o.data.empty()) {
        merged["data"]["tile_dir"] = (std::filesystem::path(o.data) / "tiles").string();
        merged["data"]["l2_dir"] = (std::filesystem::path(o.data) / "l2").string();
    }
    if (!o.tiles_dir.empty()) merged["data"]["tile_dir"] = o.tiles_dir;
    if (!o.l2_dir.empty()) merged["data"]["l2_dir"] = o.l2_dir;
    if (!o.stats.empty()) merged["data"]["stats_path"] = o.stats;
    if (!o.normalizers.empty()) merged["data"]["normalizers_path"] = o.normalizers;
    if (o.steps_given) merged["train"]["steps"] = o.steps;
    if (o.batch_given) merged["train"]["batch"] = o.batch;
    if (o.seed_given) merged["train"]["seed"] = o.seed;
    if (supervised) {
        merged["vae"]["supervised"] = true;
        if (!o.products.empty()) {
            merged["vae"]["head_products"] = split_csv(o.products);
        } else if (merged["vae"].value("head_products", std::vector<std::string>{}).empty()) {
            merged["vae"]["head_products"] = {"no2", "o3", "hcho", "cloud"};
        }
    }
    if (print_config_and_exit(o.print_config, merged)) return 0;
    require(o.out, "--out", cmd);

    const VaeConfig vae_cfg = vae_config_from_json(merged["vae"]);
    const TrainConfig train_cfg = train_config_from_json(merged["train"]);
    const TrainDataConfig data_cfg = data_config_from_json(merged["data"]);

    Stopwatch sw;
    const auto result = train_vae(vae_cfg, train_cfg, data_cfg, o.out, o.resume);

    RunManifest m;
    m.command = cmd;
    m.config = merged;
    if (!o.config_path.empty()) m.inputs.push_back(o.config_path);
    m.inputs.push_back(data_cfg.tile_dir);
    m.inputs.push_back(data_cfg.stats_path);
    if (!o.resume.empty()) m.inputs.push_back(o.resume);
    m.outputs = {(std::filesystem::path(o.out) / "metrics.jsonl").string(),
                 (std::filesystem::path(o.out) / "final.bin").string()};
    m.seed = train_cfg.seed;
    m.wall_seconds = sw.seconds();
    append_manifest(o.out, m);
    return 0;
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

struct CodecOpts {
    std::string model, stats, in, out;
    std::string dtype = "f32", content = "mean";
    bool print_config = false;
};

inline int cmd_encode(const CodecOpts& o) {
    nlohmann::json merged{{"model", o.model},
                          {"stats", o.stats},
                          {"in", o.in},
                          {"out", o.out},
                          {"dtype", o.dtype},
                          {"content", o.content}};
    if (print_config_and_exit(o.print_config, merged)) return 0;
    require(o.model, "--model", "encode");
    require(o.stats, "--stats", "encode");
    require(o.in, "--in", "encode");
    require(o.out, "--out", "encode");

    Stopwatch sw;
    const auto ck = load_checkpoint(o.model);
    const auto stats = load_stats(o.stats);
    const auto tile = read_tile(o.in);
    CodecOptions copts{parse_dtype(o.dtype), parse_content(o.content)};
    const auto code = compress(tile, stats, ck.params, ck.vae_cfg, copts);
    const auto parent = std::filesystem::path(o.out).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    write_latent(std::filesystem::path(o.out), code);

    RunManifest m;
    m.command = "encode";
    m.config = merged;
    m.inputs = {o.model, o.stats, o.in};
    m.outputs = {o.out};
    m.wall_seconds = sw.seconds();
    append_manifest(std::filesystem::path(o.out).parent_path(), m);
    return 0;
}

inline int cmd_decode(const CodecOpts& o) {
    nlohmann::json merged{{"model", o.model}, {"stats", o.stats}, {"in", o.in}, {"out", o.out}};
    if (print_config_and_exit(o.print_config, merged)) return 0;
    require(o.model, "--model", "decode");
    require(o.stats, "--stats", "decode");
    require(o.in, "--in", "decode");
    require(o.out, "--out", "decode");

    Stopwatch sw;
    const auto ck = load_checkpoint(o.model);
    const auto stats = load_stats(o.stats);
    const auto code = read_latent(std::filesystem::path(o.in));
    const auto tile = decompress(code, stats, ck.params, ck.vae_cfg);
    const auto parent = std::filesystem::path(o.out).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    write_tile(tile, o.out);

    RunManifest m;
    m.command = "decode";
    m.config = merged;
    m.inputs = {o.model, o.stats, o.in};
    m.outputs = {o.out};
    m.wall_seconds = sw.seconds();
    append_manifest(std::filesystem::path(o.out).parent_path(), m);
    return 0;
}

// ---------------------------------------------------------------------------
// eval-recon
// ---------------------------------------------------------------------------

struct EvalReconOpts {
    std::string orig, recon, stats, out, model;
    std::string dtype = "f32", content = "mean";
    bool print_config = false;
};

inline int cmd_eval_recon(const EvalReconOpts& o) {
    nlohmann::json merged{{"orig", o.orig},   {"recon", o.recon},     {"stats", o.stats},
                          {"out", o.out},     {"model", o.model},     {"dtype", o.dtype},
                          {"content", o.content}};
    if (print_config_and_exit(o.print_config, merged)) return 0;
    require(o.orig, "--orig", "eval-recon");
    require(o.recon, "--recon", "eval-recon");
    require(o.stats, "--stats", "eval-recon");
    require(o.out, "--out", "eval-recon");

    Stopwatch sw;
    auto gather = [](const std::string& path) {
        std::vector<HyperspectralTile> tiles;
        if (std::filesystem::is_directory(path)) {
            for (const auto& id : list_tile_ids(path)) {
                tiles.push_back(read_tile((std::filesystem::path(path) / (id + ".hst")).string()));
            }
        } else {
            tiles.push_back(read_tile(path));
        }
        if (tiles.empty()) throw DataError("no .hst tiles in '" + path + "'");
        return tiles;
    };
    const auto origs = gather(o.orig);
    const auto recons = gather(o.recon);
    if (origs.size() != recons.size()) {
        throw DataError("eval-recon: " + std::to_string(origs.size()) + " originals vs " +
                        std::to_string(recons.size()) + " reconstructions");
    }
    for (std::size_t i = 0; i < origs.size(); ++i) {
        if (origs[i].id != recons[i].id) {
            throw DataError("eval-recon: id mismatch '" + origs[i].id + "' vs '" + recons[i].id + "'");
        }
    }
    const auto stats = load_stats(o.stats);
    auto rep = eval_reconstruction(origs, recons, stats);
    if (!o.model.empty()) {
        const auto ck = load_checkpoint(o.model);
        LatentCode shape;
        shape.c = ck.vae_cfg.latent_channels;
        shape.h = ck.vae_cfg.latent_hw();
        shape.w = ck.vae_cfg.latent_hw();
        shape.dtype = parse_dtype(o.dtype);
        shape.content = parse_content(o.content);
        rep.compression_ratio =
            compression_ratio(ck.vae_cfg.in_channels, ck.vae_cfg.tile, ck.vae_cfg.tile, shape);
        rep.byte_ratio =
            byte_compression_ratio(ck.vae_cfg.in_channels, ck.vae_cfg.tile, ck.vae_cfg.tile, shape);
    }
    write_recon_report(rep, o.out);

    RunManifest m;
    m.command = "eval-recon";
    m.config = merged;
    m.inputs = {o.orig, o.recon, o.stats};
    m.outputs = {(std::filesystem::path(o.out) / "rmse_per_channel.csv").string(),
                 (std::filesystem::path(o.out) / "summary.json").string()};
    m.wall_seconds = sw.seconds();
    append_manifest(o.out, m);
    return 0;
}

// ---------------------------------------------------------------------------
// train-probes
// ---------------------------------------------------------------------------

struct ProbesOpts {
    std::string model, config_path, data, tiles_dir, l2_dir, stats, normalizers, out;
    std::string products = "no2,o3,hcho,cloud";
    std::string kinds = "linear,mlp";
    std::string split = "all";
    int train_pct = 70;
    std::int64_t max_tiles = 0;
    bool print_config = false;
};

inline int cmd_train_probes(const ProbesOpts& o) {
    nlohmann::json merged{
        {"linear", probe_config_to_json(ProbeConfig::defaults(ProbeKind::linear))},
        {"mlp", probe_config_to_json(ProbeConfig::defaults(ProbeKind::mlp))},
        {"products", split_csv(o.products)},
        {"kinds", split_csv(o.kinds)},
        {"split", o.split},
        {"train_pct", o.train_pct},
        {"max_tiles", o.max_tiles},
    };
    if (!o.config_path.empty()) {
        merged.merge_patch(load_json_file(o.config_path, "probe config"));
    }
    merged["linear"]["kind"] = "linear";
    merged["mlp"]["kind"] = "mlp";
    if (print_config_and_exit(o.print_config, merged)) return 0;
    const char* cmd = "train-probes";
    require(o.model, "--model", cmd);
    require(o.stats, "--stats", cmd);
    require(o.normalizers, "--normalizers", cmd);
    require(o.out, "--out", cmd);
    if (o.data.empty() && (o.tiles_dir.empty() || o.l2_dir.empty())) {
        throw UsageError("train-probes: --data (or --tiles-dir and --l2-dir) is required");
    }

    Stopwatch sw;
    const auto ck = load_checkpoint(o.model);
    const auto stats = load_stats(o.stats);
    const auto normalizers = load_normalizers(o.normalizers);
    const auto products = merged["products"].get<std::vector<std::string>>();
    if (products.empty()) throw UsageError("train-probes: --products must be non-empty");

    TrainDataConfig data_cfg;
    data_cfg.tile_dir =
        !o.tiles_dir.empty() ? o.tiles_dir : (std::filesystem::path(o.data) / "tiles").string();
    data_cfg.l2_dir =
        !o.l2_dir.empty() ? o.l2_dir : (std::filesystem::path(o.data) / "l2").string();
    TileStore store(ck.vae_cfg, data_cfg, stats, normalizers, products);

    auto ids = list_tile_ids(data_cfg.tile_dir);
    if (ids.empty()) throw DataError("no .hst tiles in '" + data_cfg.tile_dir + "'");
    const std::string which = merged["split"].get<std::string>();
    if (which != "all") {
        const auto split = split_files(ids, merged["train_pct"].get<int>());
        if (which == "train") ids = split.train_ids;
        else if (which == "val") ids = split.val_ids;
        else throw UsageError("train-probes: --split must be all, train, or val");
    }
    const auto max_tiles = merged["max_tiles"].get<std::int64_t>();
    if (max_tiles > 0 && static_cast<std::int64_t>(ids.size()) > max_tiles) {
        ids.resize(static_cast<std::size_t>(max_tiles));
    }
    if (ids.empty()) throw DataError("train-probes: tile selection is empty");

    std::vector<ProbeConfig> kinds;
    for (const auto& k : merged["kinds"].get<std::vector<std::string>>()) {
        if (k != "linear" && k != "mlp") throw UsageError("unknown probe kind '" + k + "'");
        kinds.push_back(probe_config_from_json(merged[k]));
    }
    if (kinds.empty()) throw UsageError("train-probes: --kinds must be non-empty");

    const auto results = evaluate_probe_suite(ck.params, ck.vae_cfg, ids, store, products, kinds);

    const std::filesystem::path out(o.out);
    std::filesystem::create_directories(out);
    nlohmann::json entries = nlohmann::json::array();
    RunManifest m;
    for (const auto& r : results) {
        entries.push_back(nlohmann::json{{"product", r.product},
                                         {"kind", r.kind},
                                         {"r2", r.r2},
                                         {"mse", r.mse},
                                         {"n_train", r.n_train},
                                         {"n_test", r.n_test},
                                         {"best_epoch", r.best_epoch}});
        const auto scatter_path = out / ("scatter_" + r.product + "_" + r.kind + ".csv");
        std::ofstream os(scatter_path);
        if (!os) throw DataError("cannot open '" + scatter_path.string() + "' for writing");
        os << "pred,truth\n" << std::setprecision(9);
        for (const auto& [pred, truth] : r.scatter) os << pred << ',' << truth << '\n';
        m.outputs.push_back(scatter_path.string());
    }
    {
        std::ofstream os(out / "probe_report.json");
        if (!os) throw DataError("cannot open '" + (out / "probe_report.json").string() + "'");
        os << nlohmann::json{{"entries", entries}}.dump(2) << "\n";
    }

    m.command = cmd;
    m.config = merged;
    m.inputs = {o.model, o.stats, o.normalizers, data_cfg.tile_dir, data_cfg.l2_dir};
    m.outputs.insert(m.outputs.begin(), (out / "probe_report.json").string());
    m.wall_seconds = sw.seconds();
    append_manifest(out, m);
    return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportOpts {
    std::string run, out;
    bool print_config = false;
};

inline int cmd_report(const ReportOpts& o) {
    nlohmann::json merged{{"run", o.run}, {"out", o.out}};
    if (print_config_and_exit(o.print_config, merged)) return 0;
    require(o.run, "--run", "report");
    require(o.out, "--out", "report");

    Stopwatch sw;
    const auto metrics_path = (std::filesystem::path(o.run) / "metrics.jsonl").string();
    const auto log = read_metrics(metrics_path);

    auto extra_keys = [](const std::vector<nlohmann::json>& recs,
                         const std::set<std::string>& fixed) {
        std::set<std::string> keys;
        for (const auto& r : recs) {
            for (const auto& [k, v] : r.items()) {
                if (!fixed.count(k) && k != "phase") keys.insert(k);
            }
        }
        return keys;
    };
    auto write_csv = [&extra_keys](const std::filesystem::path& path,
                                   const std::vector<nlohmann::json>& recs,
                                   const std::vector<std::string>& fixed) {
        std::ofstream os(path);
        if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
        const std::set<std::string> fixed_set(fixed.begin(), fixed.end());
        const auto extras = extra_keys(recs, fixed_set);
        os << std::setprecision(12);
        bool first = true;
        for (const auto& k : fixed) {
            os << (first ? "" : ",") << k;
            first = false;
        }
        for (const auto& k : extras) os << ',' << k;
        os << '\n';
        for (const auto& r : recs) {
            first = true;
            auto cell = [&](const std::string& k) {
                if (!first) os << ',';
                first = false;
                if (r.contains(k)) {
                    const auto& v = r.at(k);
                    if (v.is_number_float()) os << v.get<double>();
                    else os << v.dump();
                }
            };
            for (const auto& k : fixed) cell(k);
            for (const auto& k : extras) cell(k);
            os << '\n';
        }
    };

    const std::filesystem::path out(o.out);
    std::filesystem::create_directories(out);
    write_csv(out / "train.csv", log.train, {"step", "rec", "nll", "kl", "total", "clip_scale"});
    write_csv(out / "val.csv", log.val, {"step", "rec", "nll", "kl", "total"});

    nlohmann::json summary{{"train_records", log.train.size()}, {"val_records", log.val.size()}};
    if (!log.train.empty()) summary["final_train"] = log.train.back();
    if (!log.val.empty()) {
        summary["final_val"] = log.val.back();
        const auto best = std::min_element(
            log.val.begin(), log.val.end(), [](const nlohmann::json& a, const nlohmann::json& b) {
                return a.value("total", 0.0) < b.value("total", 0.0);
            });
        summary["best_val"] = *best;
    }
    {
        std::ofstream os(out / "summary.json");
        if (!os) throw DataError("cannot open '" + (out / "summary.json").string() + "'");
        os << summary.dump(2) << "\n";
    }

    RunManifest m;
    m.command = "report";
    m.config = merged;
    m.inputs = {metrics_path};
    m.outputs = {(out / "train.csv").string(), (out / "val.csv").string(),
                 (out / "summary.json").string()};
    m.wall_seconds = sw.seconds();
    append_manifest(out, m);
    return 0;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Entry point. Exit codes: 0 ok, 1 data/config errors, 2 usage errors.
// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args) {
    CLI::App app{"hsnc: neural compression toolkit for hyperspectral cubes"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(0, 1);
    bool deterministic = false;
    app.add_flag("--deterministic", deterministic,
                 "force single-threaded numerics (this build is always single-threaded)");

    detail::SynthOpts so;
    auto* synth = app.add_subcommand("synth", "generate a synthetic tile + L2 dataset");
    synth->add_option("--config", so.config_path, "synth config JSON");
    synth->add_option("--out", so.out, "output dataset directory");
    auto* so_seed = synth->add_option("--seed", so.seed, "master seed");
    auto* so_count = synth->add_option("--count", so.count, "number of tiles");
    auto* so_prefix = synth->add_option("--prefix", so.prefix, "tile id prefix");
    synth->add_flag("--print-config", so.print_config, "print merged config and exit");

    detail::StatsOpts to;
    auto* stats = app.add_subcommand("stats", "fit radiance stats and L2 normalizers on the train split");
    stats->add_option("--data", to.data, "dataset directory (tiles/ + l2/)");
    stats->add_option("--tiles-dir", to.tiles_dir, "tile directory override");
    stats->add_option("--l2-dir", to.l2_dir, "L2 directory override");
    stats->add_option("--out", to.out, "output directory");
    stats->add_option("--train-pct", to.train_pct, "train split percentage");
    stats->add_flag("--print-config", to.print_config, "print merged config and exit");

    auto add_train_options = [](CLI::App* sub, detail::TrainOpts& opts) {
        sub->add_option("--config", opts.config_path, "train config JSON (vae/train/data sections)");
        sub->add_option("--out", opts.out, "run directory");
        sub->add_option("--resume", opts.resume, "checkpoint to resume from");
        sub->add_option("--data", opts.data, "dataset directory (tiles/ + l2/)");
        sub->add_option("--tiles-dir", opts.tiles_dir, "tile directory override");
        sub->add_option("--l2-dir", opts.l2_dir, "L2 directory override");
        sub->add_option("--stats", opts.stats, "radiance stats JSON");
        sub->add_option("--normalizers", opts.normalizers, "L2 normalizer JSON");
        sub->add_flag("--print-config", opts.print_config, "print merged config and exit");
        return std::array<CLI::Option*, 3>{
            sub->add_option("--steps", opts.steps, "step budget"),
            sub->add_option("--batch", opts.batch, "batch size"),
            sub->add_option("--seed", opts.seed, "training seed"),
        };
    };
    detail::TrainOpts vo;
    auto* train = app.add_subcommand("train-vae", "train the reconstruction VAE");
    auto vo_flags = add_train_options(train, vo);
    detail::TrainOpts supo;
    auto* trains = app.add_subcommand("train-supervised", "train the VAE with latent product heads");
    auto supo_flags = add_train_options(trains, supo);
    trains->add_option("--products", supo.products, "comma-separated head products");

    detail::CodecOpts eo;
    auto* enc = app.add_subcommand("encode", "compress a raw tile to a latent code");
    enc->add_option("--model", eo.model, "checkpoint file");
    enc->add_option("--stats", eo.stats, "radiance stats JSON");
    enc->add_option("--in", eo.in, "input .hst tile");
    enc->add_option("--out", eo.out, "output .hsl latent");
    enc->add_option("--dtype", eo.dtype, "payload dtype: f32 or f16");
    enc->add_option("--content", eo.content, "payload content: mean or mean_logvar");
    enc->add_flag("--print-config", eo.print_config, "print merged config and exit");

    detail::CodecOpts do_;
    auto* dec = app.add_subcommand("decode", "decompress a latent code to a raw tile");
    dec->add_option("--model", do_.model, "checkpoint file");
    dec->add_option("--stats", do_.stats, "radiance stats JSON");
    dec->add_option("--in", do_.in, "input .hsl latent");
    dec->add_option("--out", do_.out, "output .hst tile");
    dec->add_flag("--print-config", do_.print_config, "print merged config and exit");

    detail::EvalReconOpts ro;
    auto* recon = app.add_subcommand("eval-recon", "reconstruction quality report");
    recon->add_option("--orig", ro.orig, "original tile file or directory");
    recon->add_option("--recon", ro.recon, "reconstructed tile file or directory");
    recon->add_option("--stats", ro.stats, "radiance stats JSON");
    recon->add_option("--out", ro.out, "report directory");
    recon->add_option("--model", ro.model, "checkpoint (enables compression-ratio reporting)");
    recon->add_option("--dtype", ro.dtype, "latent dtype for byte accounting");
    recon->add_option("--content", ro.content, "latent content for ratio accounting");
    recon->add_flag("--print-config", ro.print_config, "print merged config and exit");

    detail::ProbesOpts po;
    auto* probes = app.add_subcommand("train-probes", "train latent-to-product probes");
    probes->add_option("--model", po.model, "checkpoint file");
    probes->add_option("--config", po.config_path, "probe config JSON (linear/mlp sections)");
    probes->add_option("--data", po.data, "dataset directory (tiles/ + l2/)");
    probes->add_option("--tiles-dir", po.tiles_dir, "tile directory override");
    probes->add_option("--l2-dir", po.l2_dir, "L2 directory override");
    probes->add_option("--stats", po.stats, "radiance stats JSON");
    probes->add_option("--normalizers", po.normalizers, "L2 normalizer JSON");
    probes->add_option("--out", po.out, "report directory");
    probes->add_option("--products", po.products, "comma-separated products");
    probes->add_option("--kinds", po.kinds, "comma-separated probe kinds");
    probes->add_option("--split", po.split, "tile selection: all, train, or val");
    probes->add_option("--train-pct", po.train_pct, "train split percentage");
    probes->add_option("--max-tiles", po.max_tiles, "cap on tiles used (0 = no cap)");
    probes->add_flag("--print-config", po.print_config, "print merged config and exit");

    detail::ReportOpts repo;
    auto* report = app.add_subcommand("report", "merge a run's metrics into plot-ready CSV/JSON");
    report->add_option("--run", repo.run, "run directory with metrics.jsonl");
    report->add_option("--out", repo.out, "output directory");
    report->add_flag("--print-config", repo.print_config, "print merged config and exit");

    std::reverse(args.begin(), args.end()); // CLI11 consumes right to left
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << nlohmann::json{{"category", "usage"}, {"error", e.what()}}.dump() << "\n";
        return 2;
    }

    if (deterministic) setenv("HSNC_DETERMINISTIC", "1", 1);

    auto fail = [](const char* category, const std::exception& e) {
        std::cerr << nlohmann::json{{"category", category}, {"error", e.what()}}.dump() << "\n";
    };
    try {
        so.seed_given = so_seed->count() > 0;
        so.count_given = so_count->count() > 0;
        so.prefix_given = so_prefix->count() > 0;
        vo.steps_given = vo_flags[0]->count() > 0;
        vo.batch_given = vo_flags[1]->count() > 0;
        vo.seed_given = vo_flags[2]->count() > 0;
        supo.steps_given = supo_flags[0]->count() > 0;
        supo.batch_given = supo_flags[1]->count() > 0;
        supo.seed_given = supo_flags[2]->count() > 0;

        if (app.got_subcommand(synth)) return detail::cmd_synth(so);
        if (app.got_subcommand(stats)) return detail::cmd_stats(to);
        if (app.got_subcommand(train)) return detail::cmd_train(vo, false);
        if (app.got_subcommand(trains)) return detail::cmd_train(supo, true);
        if (app.got_subcommand(enc)) return detail::cmd_encode(eo);
        if (app.got_subcommand(dec)) return detail::cmd_decode(do_);
        if (app.got_subcommand(recon)) return detail::cmd_eval_recon(ro);
        if (app.got_subcommand(probes)) return detail::cmd_train_probes(po);
        if (app.got_subcommand(report)) return detail::cmd_report(repo);
        std::cerr << nlohmann::json{{"category", "usage"},
                                    {"error", "missing subcommand (see --help)"}}
                         .dump()
                  << "\n";
        return 2;
    } catch (const UsageError& e) {
        fail("usage", e);
        return 2;
    } catch (const ConfigError& e) {
        fail("config", e);
        return 1;
    } catch (const FormatError& e) {
        fail("format", e);
        return 1;
    } catch (const DataError& e) {
        fail("data", e);
        return 1;
    } catch (const TrainingFault& e) {
        fail("training", e);
        return 1;
    } catch (const MetricError& e) {
        fail("metric", e);
        return 1;
    } catch (const Error& e) {
        fail("error", e);
        return 1;
    } catch (const std::exception& e) {
        fail("internal", e);
        return 1;
    }
}

inline int run(int argc, char** argv) {
    std::vector<std::string> args;
    args.reserve(static_cast<std::size_t>(argc > 0 ? argc - 1 : 0));
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(std::move(args));
}

} // namespace hsnc::cli
