#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedleak/attack.hpp"
#include "fedleak/errors.hpp"
#include "fedleak/fl.hpp"
#include "fedleak/model.hpp"
#include "fedleak/plan.hpp"

// Experiment configuration: one JSON file describing dataset, splits, prior,
// model, federation plan, attack settings, sweep grid, and metric options.
// The FEDLEAK_SEED environment variable overrides the global seed.

namespace fedleak::config {

using nlohmann::json;

struct DatasetConfig {
    std::string root;
    std::string manifest = "manifest.csv";
    int image_size = 0;  // 0 = native
    int channels = 0;    // 0 = native
};

struct SplitConfig {
    int test = 0;
    int pretrain = 0;
    int prior = 0;
};

enum class PriorMode { Heldout, Corpus, None };

struct PriorConfig {
    PriorMode mode = PriorMode::Heldout;
    std::string root;      // corpus mode
    std::string manifest;  // corpus mode
};

struct ModelConfig {
    std::string arch = "cnn4";
    std::vector<int> widths;
    bool avg_pool = false;
    model::BNConfig bn;
    int warm_start_epochs = 0;
    int warm_start_batch = 8;
    double warm_start_lr = 0.05;
};

struct SweepConfig {
    std::vector<double> sigma0{0.0};
    std::vector<defense::DPConfig> dp_sgd;  // extra DP-SGD settings
    std::vector<std::string> clients;       // empty = every client
    std::vector<int> rounds;                // empty = last round
    std::vector<std::uint64_t> attack_seeds{1};
};

struct MetricsConfig {
    int bootstrap_trials = 1000;
    double bootstrap_level = 0.95;
    int iip_k = 1;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    SplitConfig splits;
    PriorConfig prior;
    ModelConfig model;
    FederationPlan federation;
    attack::AttackConfig attack;
    SweepConfig sweep;
    MetricsConfig metrics;
    json raw;  // snapshot of the parsed file
};

namespace detail {

template <typename T>
T field(const json& j, const std::string& path, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + "." + key + ": wrong type");
    }
}

inline const json& section(const json& j, const std::string& key, const json& empty) {
    if (!j.contains(key)) return empty;
    if (!j.at(key).is_object()) throw ConfigError(key + ": must be an object");
    return j.at(key);
}

}  // namespace detail

inline defense::DPConfig parse_dp(const json& j, const std::string& path) {
    defense::DPConfig dp;
    dp.mechanism = defense::mechanism_from_name(detail::field<std::string>(j, path, "mechanism", "none"));
    dp.sigma0 = detail::field<double>(j, path, "sigma0", 0.0);
    dp.q = detail::field<double>(j, path, "q", 95.0);
    dp.percentile_interpolate = detail::field<bool>(j, path, "percentile_interpolate", false);
    dp.noise_bn_buffers = detail::field<bool>(j, path, "noise_bn_buffers", false);
    dp.clip_norm = detail::field<double>(j, path, "clip_norm", 1.0);
    dp.noise_multiplier = detail::field<double>(j, path, "noise_multiplier", 0.0);
    dp.validate();
    return dp;
}

inline attack::AttackConfig parse_attack(const json& j, std::uint64_t default_seed) {
    attack::AttackConfig a;
    a.iterations = detail::field<int>(j, "attack", "iterations", a.iterations);
    a.learning_rate = detail::field<double>(j, "attack", "lr", a.learning_rate);
    a.cosine_decay = detail::field<bool>(j, "attack", "cosine_decay", a.cosine_decay);
    a.decay_start = detail::field<double>(j, "attack", "decay_start", a.decay_start);
    a.w_grad = detail::field<double>(j, "attack", "w_grad", a.w_grad);
    a.w_bn = detail::field<double>(j, "attack", "w_bn", a.w_bn);
    a.bn_auto_scale = detail::field<bool>(j, "attack", "bn_auto_scale", a.bn_auto_scale);
    a.w_tv = detail::field<double>(j, "attack", "w_tv", a.w_tv);
    a.w_l2 = detail::field<double>(j, "attack", "w_l2", a.w_l2);
    a.use_bn_loss = detail::field<bool>(j, "attack", "use_bn_loss", true);
    a.use_global_ckpt = detail::field<bool>(j, "attack", "use_global_ckpt", true);
    a.use_prior = detail::field<bool>(j, "attack", "use_prior", true);
    a.grayscale = detail::field<bool>(j, "attack", "grayscale", false);
    a.known_batch_order = detail::field<bool>(j, "attack", "known_batch_order", true);
    a.restarts = detail::field<int>(j, "attack", "restarts", 1);
    a.seed = detail::field<std::uint64_t>(j, "attack", "seed", default_seed);
    a.init_jitter = detail::field<double>(j, "attack", "init_jitter", a.init_jitter);
    const std::string mode = detail::field<std::string>(j, "attack", "match_mode", "weight_change");
    if (mode == "weight_change")
        a.match_mode = attack::MatchMode::WeightChange;
    else if (mode == "single_step")
        a.match_mode = attack::MatchMode::SingleStep;
    else
        throw ConfigError("attack.match_mode: unknown mode '" + mode + "'");
    a.validate();
    return a;
}

inline ExperimentConfig parse_experiment(const json& j) {
    static const json empty = json::object();
    ExperimentConfig cfg;
    cfg.raw = j;
    cfg.seed = detail::field<std::uint64_t>(j, "", "seed", 0);
    if (const char* env = std::getenv("FEDLEAK_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (...) {
            throw ConfigError("FEDLEAK_SEED: not an integer");
        }
    }

    const json& jd = detail::section(j, "dataset", empty);
    cfg.dataset.root = detail::field<std::string>(jd, "dataset", "root", "");
    cfg.dataset.manifest = detail::field<std::string>(jd, "dataset", "manifest", "manifest.csv");
    cfg.dataset.image_size = detail::field<int>(jd, "dataset", "image_size", 0);
    cfg.dataset.channels = detail::field<int>(jd, "dataset", "channels", 0);
    if (cfg.dataset.root.empty()) throw ConfigError("dataset.root: required");

    const json& js = detail::section(j, "splits", empty);
    cfg.splits.test = detail::field<int>(js, "splits", "test", 0);
    cfg.splits.pretrain = detail::field<int>(js, "splits", "pretrain", 0);
    cfg.splits.prior = detail::field<int>(js, "splits", "prior", 0);
    for (const auto& [name, v] : {std::pair<const char*, int>{"test", cfg.splits.test},
                                  {"pretrain", cfg.splits.pretrain},
                                  {"prior", cfg.splits.prior}})
        if (v < 0) throw ConfigError(std::string("splits.") + name + ": must be >= 0");

    const json& jp = detail::section(j, "prior", empty);
    const std::string pmode = detail::field<std::string>(jp, "prior", "mode", "heldout");
    if (pmode == "heldout")
        cfg.prior.mode = PriorMode::Heldout;
    else if (pmode == "corpus")
        cfg.prior.mode = PriorMode::Corpus;
    else if (pmode == "none")
        cfg.prior.mode = PriorMode::None;
    else
        throw ConfigError("prior.mode: expected heldout|corpus|none, got '" + pmode + "'");
    cfg.prior.root = detail::field<std::string>(jp, "prior", "root", "");
    cfg.prior.manifest = detail::field<std::string>(jp, "prior", "manifest", "manifest.csv");
    if (cfg.prior.mode == PriorMode::Corpus && cfg.prior.root.empty())
        throw ConfigError("prior.root: required for corpus mode");
    if (cfg.prior.mode == PriorMode::Heldout && cfg.splits.prior <= 0)
        throw ConfigError("splits.prior: must be > 0 for the held-out prior mode");

    const json& jm = detail::section(j, "model", empty);
    cfg.model.arch = detail::field<std::string>(jm, "model", "arch", "cnn4");
    cfg.model.widths = detail::field<std::vector<int>>(jm, "model", "widths", {});
    const std::string pool = detail::field<std::string>(jm, "model", "pool", "max");
    if (pool != "max" && pool != "avg") throw ConfigError("model.pool: expected max|avg");
    cfg.model.avg_pool = pool == "avg";
    cfg.model.bn.momentum = detail::field<double>(jm, "model", "bn_momentum", 0.1);
    cfg.model.bn.epsilon = detail::field<double>(jm, "model", "bn_epsilon", 1e-5);
    cfg.model.bn.validate();
    cfg.model.warm_start_epochs = detail::field<int>(jm, "model", "warm_start_epochs", 0);
    cfg.model.warm_start_batch = detail::field<int>(jm, "model", "warm_start_batch", 8);
    cfg.model.warm_start_lr = detail::field<double>(jm, "model", "warm_start_lr", 0.05);
    if (cfg.model.warm_start_epochs > 0 && cfg.splits.pretrain <= 0)
        throw ConfigError("splits.pretrain: must be > 0 when model.warm_start_epochs > 0");

    const json& jf = detail::section(j, "federation", empty);
    cfg.federation.rounds = detail::field<int>(jf, "federation", "rounds", 1);
    cfg.federation.learning_rate = detail::field<double>(jf, "federation", "lr", 0.1);
    cfg.federation.lr_decay_factor = detail::field<double>(jf, "federation", "lr_decay_factor", 0.1);
    cfg.federation.lr_decay_every = detail::field<int>(jf, "federation", "lr_decay_every", 40);
    cfg.federation.seed = cfg.seed;
    if (!jf.contains("clients") || !jf.at("clients").is_array() || jf.at("clients").empty())
        throw ConfigError("federation.clients: non-empty array required");
    for (std::size_t i = 0; i < jf.at("clients").size(); ++i) {
        const json& jc = jf.at("clients").at(i);
        const std::string path = "federation.clients[" + std::to_string(i) + "]";
        ClientConfig c;
        c.id = detail::field<std::string>(jc, path, "id", "");
        c.batch_size = detail::field<int>(jc, path, "batch_size", 1);
        c.n_train = detail::field<int>(jc, path, "n_train", 1);
        c.n_valid = detail::field<int>(jc, path, "n_valid", 0);
        c.balanced = detail::field<bool>(jc, path, "balanced", true);
        const std::string st = detail::field<std::string>(jc, path, "share_train_with", "");
        const std::string sv = detail::field<std::string>(jc, path, "share_valid_with", "");
        if (!st.empty()) c.share_train_with = st;
        if (!sv.empty()) c.share_valid_with = sv;
        if (jc.contains("dp")) c.dp = parse_dp(jc.at("dp"), path + ".dp");
        cfg.federation.clients.push_back(std::move(c));
    }
    cfg.federation.validate();

    cfg.attack = parse_attack(detail::section(j, "attack", empty), seed_mix(cfg.seed, "attack"));

    const json& jw = detail::section(j, "sweep", empty);
    cfg.sweep.sigma0 = detail::field<std::vector<double>>(jw, "sweep", "sigma0", {0.0});
    cfg.sweep.clients = detail::field<std::vector<std::string>>(jw, "sweep", "clients", {});
    cfg.sweep.rounds = detail::field<std::vector<int>>(jw, "sweep", "rounds", {});
    cfg.sweep.attack_seeds = detail::field<std::vector<std::uint64_t>>(jw, "sweep", "attack_seeds", {1});
    if (jw.contains("dp_sgd")) {
        if (!jw.at("dp_sgd").is_array()) throw ConfigError("sweep.dp_sgd: must be an array");
        for (std::size_t i = 0; i < jw.at("dp_sgd").size(); ++i) {
            json entry = jw.at("dp_sgd").at(i);
            entry["mechanism"] = "dp_sgd";
            cfg.sweep.dp_sgd.push_back(parse_dp(entry, "sweep.dp_sgd[" + std::to_string(i) + "]"));
        }
    }
    if (cfg.sweep.sigma0.empty() && cfg.sweep.dp_sgd.empty()) throw ConfigError("sweep: grid must not be empty");
    for (const auto& id : cfg.sweep.clients) cfg.federation.client(id);  // existence check
    for (int r : cfg.sweep.rounds)
        if (r < 0 || r >= cfg.federation.rounds) throw ConfigError("sweep.rounds: round " + std::to_string(r) + " out of range");
    if (cfg.sweep.attack_seeds.empty()) throw ConfigError("sweep.attack_seeds: must not be empty");

    const json& jx = detail::section(j, "metrics", empty);
    cfg.metrics.bootstrap_trials = detail::field<int>(jx, "metrics", "bootstrap_trials", 1000);
    cfg.metrics.bootstrap_level = detail::field<double>(jx, "metrics", "bootstrap_level", 0.95);
    cfg.metrics.iip_k = detail::field<int>(jx, "metrics", "iip_k", 1);
    if (cfg.metrics.bootstrap_trials < 1) throw ConfigError("metrics.bootstrap_trials: must be >= 1");
    if (!(cfg.metrics.bootstrap_level > 0 && cfg.metrics.bootstrap_level < 1))
        throw ConfigError("metrics.bootstrap_level: must be in (0, 1)");
    if (cfg.metrics.iip_k < 1) throw ConfigError("metrics.iip_k: must be >= 1");
    return cfg;
}

inline ExperimentConfig load_experiment(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError("config: " + path + ": " + e.what());
    }
    auto cfg = parse_experiment(j);
    // Resolve dataset paths relative to the config file's directory.
    const auto base = std::filesystem::path(path).parent_path();
    auto resolve = [&](std::string& p) {
        if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).string();
    };
    resolve(cfg.dataset.root);
    resolve(cfg.prior.root);
    return cfg;
}

}  // namespace fedleak::config
