#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedleak/checkpoint.hpp"
#include "fedleak/dataset.hpp"
#include "fedleak/defense.hpp"
#include "fedleak/model.hpp"
#include "fedleak/plan.hpp"
#include "fedleak/rng.hpp"

// FedAvg simulation. Each round every client runs exactly one local epoch of
// plain SGD in train mode, updating its BN buffers per mini-batch; the server
// aggregates the weight deltas with n_k/n weights. Every client update is
// persisted exactly as an honest-but-curious server would intercept it:
//   runs/<id>/round_<t>/{global.ckpt, client_<k>.update, log.json}

namespace fedleak::fl {

using model::ModelState;
using TensorMap = ckpt::TensorMap;

struct ModelUpdate {
    std::string client_id;
    int round = 0;
    TensorMap delta;       // local final params minus the round's global params
    TensorMap buffers;     // BN running stats after the local epoch
    int n_iterations = 0;  // ceil(n_train / batch_size)
    int n_train = 0;
    int batch_size = 0;
    double learning_rate = 0.0;
    std::uint64_t batch_seed = 0;  // seed of the epoch's shuffle
    defense::DPConfig dp;
    double dp_sigma = 0.0;  // calibrated Gaussian sigma actually applied
};

// Per-iteration record of what the client computed; the replay oracle and the
// BN-recurrence checks consume this.
struct TrainTrace {
    std::vector<model::NamedStats> batch_stats;
    std::vector<double> losses;
    std::vector<std::vector<int>> batch_indices;  // into the shard's train set
};

inline std::uint64_t batch_order_seed(std::uint64_t plan_seed, const std::string& client_id, int round) {
    return seed_mix(seed_mix(plan_seed, client_id), seed_mix(0x9e3779b9, static_cast<std::uint64_t>(round)));
}

// The epoch's batch sequence: a seeded shuffle of the shard chopped into
// batch_size chunks (last chunk may be short).
inline std::vector<std::vector<int>> epoch_batches(int n_train, int batch_size, std::uint64_t seed) {
    Rng rng(seed);
    auto perm = rng.permutation(n_train);
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < n_train; start += batch_size) {
        const int end = std::min(n_train, start + batch_size);
        batches.emplace_back(perm.begin() + start, perm.begin() + end);
    }
    return batches;
}

inline model::Batch gather_batch(const ingest::Dataset& train, const std::vector<int>& indices) {
    const int n = static_cast<int>(indices.size());
    const auto& first = train.samples.front().image;
    model::Batch b;
    b.images = Tensor(Shape{n, first.dim(0), first.dim(1), first.dim(2)});
    for (int i = 0; i < n; ++i) {
        const auto& s = train.samples[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
        std::copy(s.image.data(), s.image.data() + s.image.numel(),
                  b.images.data() + static_cast<std::int64_t>(i) * s.image.numel());
        b.labels.push_back(s.label);
    }
    return b;
}

// One local epoch of plain SGD (no momentum). Returns the intercepted update;
// optionally records a per-iteration trace.
inline ModelUpdate local_train(const ModelState& global_state, const ingest::ClientShard& shard,
                               const ClientConfig& cfg, int round, double learning_rate, std::uint64_t plan_seed,
                               TrainTrace* trace = nullptr) {
    if (shard.train.empty()) throw std::invalid_argument("local_train: empty shard for client " + cfg.id);

    ModelState local = global_state;
    const std::uint64_t bseed = batch_order_seed(plan_seed, cfg.id, round);
    const auto batches = epoch_batches(static_cast<int>(shard.train.size()), cfg.batch_size, bseed);
    const bool dp_sgd = cfg.dp.mechanism == defense::Mechanism::DpSgd;
    Rng dp_rng(seed_mix(bseed, "dp"));

    for (std::size_t it = 0; it < batches.size(); ++it) {
        auto batch = gather_batch(shard.train, batches[it]);
        model::LossGrads lg;
        try {
            lg = model::loss_and_grads(local, batch, model::Mode::Train);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("local_train: client " + cfg.id + " round " + std::to_string(round) +
                                     " iteration " + std::to_string(it) + ": " + e.what());
        }
        TensorMap step = lg.grads;
        if (dp_sgd) {
            // Per-example gradients, each example normalized by its own batch
            // statistics, clipped and noised; buffers still follow the full
            // batch's statistics.
            std::vector<TensorMap> per_example;
            for (std::size_t i = 0; i < batch.labels.size(); ++i) {
                model::Batch one;
                const std::int64_t px = batch.images.numel() / static_cast<std::int64_t>(batch.labels.size());
                one.images = Tensor(Shape{1, batch.images.dim(1), batch.images.dim(2), batch.images.dim(3)});
                std::copy(batch.images.data() + static_cast<std::int64_t>(i) * px,
                          batch.images.data() + static_cast<std::int64_t>(i + 1) * px, one.images.data());
                one.labels = {batch.labels[i]};
                per_example.push_back(model::loss_and_grads(local, one, model::Mode::Train).grads);
            }
            step = defense::dp_sgd_step(per_example, cfg.dp.clip_norm, cfg.dp.noise_multiplier, dp_rng);
        }
        for (auto& [name, p] : local.params) {
            const Tensor& gr = step.at(name);
            for (std::int64_t i = 0; i < p.numel(); ++i) p[i] -= learning_rate * gr[i];
        }
        local.buffers = model::bn_update(local.buffers, lg.batch_stats, local.arch.bn.momentum);
        if (trace) {
            trace->batch_stats.push_back(lg.batch_stats);
            trace->losses.push_back(lg.loss);
            trace->batch_indices.push_back(batches[it]);
        }
    }

    ModelUpdate up;
    up.client_id = cfg.id;
    up.round = round;
    up.n_iterations = static_cast<int>(batches.size());
    up.n_train = static_cast<int>(shard.train.size());
    up.batch_size = cfg.batch_size;
    up.learning_rate = learning_rate;
    up.batch_seed = bseed;
    up.dp = cfg.dp;
    for (const auto& [name, p] : local.params) {
        Tensor d = p;
        d -= global_state.params.at(name);
        up.delta.emplace(name, std::move(d));
    }
    up.buffers = local.buffers;

    if (cfg.dp.mechanism == defense::Mechanism::PercentileGaussian && cfg.dp.sigma0 > 0) {
        Rng noise_rng(seed_mix(bseed, "gaussian"));
        auto noised = defense::percentile_gaussian(up.delta, up.buffers, cfg.dp.sigma0, cfg.dp.q, noise_rng,
                                                   cfg.dp.noise_bn_buffers, cfg.dp.percentile_interpolate);
        up.delta = std::move(noised.delta);
        up.buffers = std::move(noised.buffers);
        up.dp_sigma = noised.sigma;
    }
    return up;
}

// W^{t+1} = W^t + sum_k w_k * delta_k; BN buffers are aggregated by the same
// weighted average of the client buffers.
inline ModelState aggregate(const ModelState& global_state, const std::vector<ModelUpdate>& updates,
                            const std::vector<double>& weights) {
    if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
    if (updates.size() != weights.size()) throw std::invalid_argument("aggregate: weight count mismatch");
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (std::abs(wsum - 1.0) > 1e-9)
        throw std::invalid_argument("aggregate: weights sum to " + std::to_string(wsum) + ", expected 1");
    for (const auto& up : updates) {
        if (up.round != updates.front().round) throw std::invalid_argument("aggregate: updates from different rounds");
        for (const auto& [name, t] : global_state.params)
            if (!up.delta.count(name) || up.delta.at(name).shape() != t.shape())
                throw std::invalid_argument("aggregate: layer set mismatch for client " + up.client_id + " at " + name);
    }

    ModelState next = global_state;
    for (std::size_t k = 0; k < updates.size(); ++k)
        for (auto& [name, p] : next.params) {
            const Tensor& d = updates[k].delta.at(name);
            for (std::int64_t i = 0; i < p.numel(); ++i) p[i] += weights[k] * d[i];
        }
    for (auto& [name, b] : next.buffers) {
        for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = 0.0;
        for (std::size_t k = 0; k < updates.size(); ++k) {
            const Tensor& cb = updates[k].buffers.at(name);
            for (std::int64_t i = 0; i < b.numel(); ++i) b[i] += weights[k] * cb[i];
        }
    }
    return next;
}

// --- persistence ---

inline nlohmann::json dp_to_json(const defense::DPConfig& dp) {
    return {{"mechanism", defense::mechanism_name(dp.mechanism)},
            {"sigma0", dp.sigma0},
            {"q", dp.q},
            {"noise_bn_buffers", dp.noise_bn_buffers},
            {"percentile_interpolate", dp.percentile_interpolate},
            {"clip_norm", dp.clip_norm},
            {"noise_multiplier", dp.noise_multiplier}};
}

inline defense::DPConfig dp_from_json(const nlohmann::json& j) {
    defense::DPConfig dp;
    dp.mechanism = defense::mechanism_from_name(j.value("mechanism", "none"));
    dp.sigma0 = j.value("sigma0", 0.0);
    dp.q = j.value("q", 95.0);
    dp.noise_bn_buffers = j.value("noise_bn_buffers", false);
    dp.percentile_interpolate = j.value("percentile_interpolate", false);
    dp.clip_norm = j.value("clip_norm", 1.0);
    dp.noise_multiplier = j.value("noise_multiplier", 0.0);
    return dp;
}

inline void save_update(const std::string& path, const ModelUpdate& up) {
    TensorMap all;
    for (const auto& [name, t] : up.delta) all.emplace("delta." + name, t);
    for (const auto& [name, t] : up.buffers) all.emplace("buffer." + name, t);
    nlohmann::json meta{{"client_id", up.client_id},   {"round", up.round},
                        {"n_iterations", up.n_iterations}, {"n_train", up.n_train},
                        {"batch_size", up.batch_size}, {"learning_rate", up.learning_rate},
                        {"batch_seed", up.batch_seed}, {"dp", dp_to_json(up.dp)},
                        {"dp_sigma", up.dp_sigma}};
    ckpt::save(path, all, meta);
}

inline ModelUpdate load_update(const std::string& path) {
    auto loaded = ckpt::load(path);
    ModelUpdate up;
    up.client_id = loaded.meta.at("client_id").get<std::string>();
    up.round = loaded.meta.at("round").get<int>();
    up.n_iterations = loaded.meta.at("n_iterations").get<int>();
    up.n_train = loaded.meta.at("n_train").get<int>();
    up.batch_size = loaded.meta.at("batch_size").get<int>();
    up.learning_rate = loaded.meta.at("learning_rate").get<double>();
    up.batch_seed = loaded.meta.at("batch_seed").get<std::uint64_t>();
    up.dp = dp_from_json(loaded.meta.at("dp"));
    up.dp_sigma = loaded.meta.value("dp_sigma", 0.0);
    for (auto& [name, t] : loaded.tensors) {
        if (name.rfind("delta.", 0) == 0)
            up.delta.emplace(name.substr(6), std::move(t));
        else if (name.rfind("buffer.", 0) == 0)
            up.buffers.emplace(name.substr(7), std::move(t));
    }
    return up;
}

struct RoundLog {
    int round = 0;
    double learning_rate = 0.0;
    double mean_val_accuracy = 0.0;  // of the round's starting global model
    std::map<std::string, double> val_accuracy;
    std::map<std::string, double> update_norm;
    std::map<std::string, double> dp_sigma;
};

inline nlohmann::json round_log_to_json(const RoundLog& log) {
    return {{"round", log.round},
            {"learning_rate", log.learning_rate},
            {"mean_val_accuracy", log.mean_val_accuracy},
            {"val_accuracy", log.val_accuracy},
            {"update_l2_norm", log.update_norm},
            {"dp_sigma", log.dp_sigma}};
}

struct RunResult {
    ModelState final_state;
    ModelState best_state;
    int best_round = 0;  // round whose starting global model validated best
    std::vector<RoundLog> logs;
};

inline double mean_validation_accuracy(const ModelState& state, const std::vector<ingest::ClientShard>& shards,
                                       RoundLog* log = nullptr) {
    double sum = 0.0;
    int counted = 0;
    for (const auto& shard : shards) {
        if (shard.valid.empty()) continue;
        std::vector<Tensor> images;
        std::vector<int> labels;
        for (const auto& s : shard.valid.samples) {
            images.push_back(s.image);
            labels.push_back(s.label);
        }
        const double acc = model::evaluate_accuracy(state, images, labels);
        if (log) log->val_accuracy[shard.client_id] = acc;
        sum += acc;
        ++counted;
    }
    const double mean = counted ? sum / counted : 0.0;
    if (log) log->mean_val_accuracy = mean;
    return mean;
}

// Runs the full federation. Round t persists its starting global model, all
// intercepted updates, and a round log; the best global model is selected by
// mean validation accuracy (final state included).
inline RunResult run_federation(const FederationPlan& plan, const std::vector<ingest::ClientShard>& shards,
                                const ModelState& init_state, const std::string& run_dir) {
    plan.validate();
    if (shards.size() != plan.clients.size()) throw std::invalid_argument("run_federation: shard/plan mismatch");
    std::filesystem::create_directories(run_dir);

    const double total = static_cast<double>(plan.total_train());
    std::vector<double> weights;
    for (const auto& c : plan.clients) weights.push_back(static_cast<double>(c.n_train) / total);

    RunResult result;
    ModelState global = init_state;
    double best_acc = -1.0;

    for (int round = 0; round < plan.rounds; ++round) {
        const std::string round_dir = run_dir + "/round_" + std::to_string(round);
        std::filesystem::create_directories(round_dir);
        model::save_model(round_dir + "/global.ckpt", global, {{"round", round}});

        RoundLog log;
        log.round = round;
        log.learning_rate = plan.lr_at_round(round);
        mean_validation_accuracy(global, shards, &log);
        if (log.mean_val_accuracy > best_acc) {
            best_acc = log.mean_val_accuracy;
            result.best_state = global;
            result.best_round = round;
        }

        std::vector<ModelUpdate> updates;
        for (std::size_t k = 0; k < plan.clients.size(); ++k) {
            auto up = local_train(global, shards[k], plan.clients[k], round, log.learning_rate, plan.seed);
            log.update_norm[up.client_id] = defense::global_l2_norm(up.delta);
            log.dp_sigma[up.client_id] = up.dp_sigma;
            save_update(round_dir + "/client_" + up.client_id + ".update", up);
            updates.push_back(std::move(up));
        }
        global = aggregate(global, updates, weights);

        std::ofstream(round_dir + "/log.json") << round_log_to_json(log).dump(2) << '\n';
        result.logs.push_back(std::move(log));
    }

    // The state after the last aggregation competes for best as well.
    RoundLog final_log;
    final_log.round = plan.rounds;
    mean_validation_accuracy(global, shards, &final_log);
    if (final_log.mean_val_accuracy > best_acc) {
        result.best_state = global;
        result.best_round = plan.rounds;
    }
    result.final_state = global;
    model::save_model(run_dir + "/final.ckpt", result.final_state, {{"round", plan.rounds}});
    model::save_model(run_dir + "/best.ckpt", result.best_state, {{"round", result.best_round}});

    nlohmann::json index;
    index["rounds"] = plan.rounds;
    index["best_round"] = result.best_round;
    index["best_mean_val_accuracy"] = best_acc > final_log.mean_val_accuracy ? best_acc : final_log.mean_val_accuracy;
    index["clients"] = nlohmann::json::array();
    for (const auto& c : plan.clients)
        index["clients"].push_back({{"id", c.id},
                                    {"batch_size", c.batch_size},
                                    {"n_train", c.n_train},
                                    {"n_valid", c.n_valid},
                                    {"iterations", c.iterations_per_epoch()},
                                    {"dp", dp_to_json(c.dp)}});
    index["round_logs"] = nlohmann::json::array();
    for (const auto& log : result.logs) index["round_logs"].push_back(round_log_to_json(log));
    std::ofstream(run_dir + "/index.json") << index.dump(2) << '\n';
    return result;
}

// Centralized warm start: N epochs of the same plain SGD on a disjoint split,
// used to emulate a pretrained starting model.
inline ModelState centralized_train(const ModelState& init, const ingest::Dataset& data, int epochs, int batch_size,
                                    double learning_rate, std::uint64_t seed) {
    ModelState state = init;
    for (int e = 0; e < epochs; ++e) {
        const auto batches = epoch_batches(static_cast<int>(data.size()), batch_size, seed_mix(seed, static_cast<std::uint64_t>(e)));
        for (const auto& idx : batches) {
            auto batch = gather_batch(data, idx);
            auto lg = model::loss_and_grads(state, batch, model::Mode::Train);
            for (auto& [name, p] : state.params) {
                const Tensor& gr = lg.grads.at(name);
                for (std::int64_t i = 0; i < p.numel(); ++i) p[i] -= learning_rate * gr[i];
            }
            state.buffers = model::bn_update(state.buffers, lg.batch_stats, state.arch.bn.momentum);
        }
    }
    return state;
}

}  // namespace fedleak::fl
