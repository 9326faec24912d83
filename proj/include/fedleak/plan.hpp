#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedleak/defense.hpp"
#include "fedleak/errors.hpp"

namespace fedleak {

struct ClientConfig {
    std::string id;
    int batch_size = 1;
    int n_train = 1;
    int n_valid = 0;
    bool balanced = true;
    // High-risk pattern: this client's training images are drawn from (and
    // shared with) the named client's shard instead of the free pool.
    std::optional<std::string> share_train_with;
    std::optional<std::string> share_valid_with;
    defense::DPConfig dp;

    int iterations_per_epoch() const { return (n_train + batch_size - 1) / batch_size; }
};

struct FederationPlan {
    std::vector<ClientConfig> clients;
    int rounds = 1;
    double learning_rate = 0.1;
    double lr_decay_factor = 0.1;
    int lr_decay_every = 40;  // rounds
    std::uint64_t seed = 0;

    double lr_at_round(int round) const {
        double lr = learning_rate;
        if (lr_decay_every > 0)
            for (int t = lr_decay_every; t <= round; t += lr_decay_every) lr *= lr_decay_factor;
        return lr;
    }

    std::int64_t total_train() const {
        std::int64_t n = 0;
        for (const auto& c : clients) n += c.n_train;
        return n;
    }

    const ClientConfig& client(const std::string& id) const {
        for (const auto& c : clients)
            if (c.id == id) return c;
        throw ConfigError("plan: unknown client '" + id + "'");
    }

    void validate() const {
        if (rounds < 1) throw ConfigError("federation.rounds: must be >= 1");
        if (learning_rate < 0) throw ConfigError("federation.lr: must be >= 0");
        if (clients.empty()) throw ConfigError("federation.clients: must not be empty");
        for (std::size_t i = 0; i < clients.size(); ++i) {
            const auto& c = clients[i];
            const std::string at = "federation.clients[" + std::to_string(i) + "]";
            if (c.id.empty()) throw ConfigError(at + ".id: must not be empty");
            if (c.batch_size < 1) throw ConfigError(at + ".batch_size: must be >= 1");
            if (c.n_train < 1) throw ConfigError(at + ".n_train: must be >= 1");
            if (c.n_valid < 0) throw ConfigError(at + ".n_valid: must be >= 0");
            c.dp.validate();
            for (const auto& ref : {c.share_train_with, c.share_valid_with})
                if (ref && !exists(*ref)) throw ConfigError(at + ": shared client '" + *ref + "' not in plan");
            if (c.share_train_with && *c.share_train_with == c.id)
                throw ConfigError(at + ".share_train_with: cannot reference itself");
        }
        for (std::size_t i = 0; i < clients.size(); ++i)
            for (std::size_t j = i + 1; j < clients.size(); ++j)
                if (clients[i].id == clients[j].id) throw ConfigError("federation.clients: duplicate id '" + clients[i].id + "'");
    }

private:
    bool exists(const std::string& id) const {
        for (const auto& c : clients)
            if (c.id == id) return true;
        return false;
    }
};

}  // namespace fedleak
