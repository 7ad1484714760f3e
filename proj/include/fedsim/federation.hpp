#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/neuralnet.hpp"
#include "fedsim/rng.hpp"
#include <nlohmann/json.hpp>

namespace fedsim {

enum class Setting { centralized, cross_device, cross_silo };

inline const char* to_string(Setting s) {
    switch (s) {
    case Setting::centralized: return "centralized";
    case Setting::cross_device: return "cross_device";
    case Setting::cross_silo: return "cross_silo";
    }
    return "?";
}

inline Setting parse_setting(const std::string& s) {
    if (s == "centralized") return Setting::centralized;
    if (s == "cross_device") return Setting::cross_device;
    if (s == "cross_silo") return Setting::cross_silo;
    throw ConfigError("unknown learning setting '" + s + "'");
}

struct FedConfig {
    Setting setting = Setting::cross_device;
    std::size_t rounds = 20;
    std::size_t local_epochs = 5;
    std::size_t centralized_epochs = 20;
    double selection_fraction = 0.4;
    std::vector<std::size_t> silo_sizes{134, 134, 136};
    TrainConfig train;
    std::uint64_t seed = 0;
    std::size_t threads = 1;   // client trainings run concurrently within a round

    void validate() const {
        if (rounds < 1) throw ConfigError("federation: rounds must be >= 1");
        if (!(selection_fraction > 0.0 && selection_fraction <= 1.0)) {
            throw ConfigError("federation: selection fraction must lie in (0, 1]");
        }
        if (silo_sizes.empty()) throw ConfigError("federation: silo_sizes must not be empty");
        train.validate();
    }
};

struct RoundLog {
    std::size_t round = 0;
    std::vector<ClientId> selected;
    std::vector<std::size_t> sizes;          // |D_k| of each selected client, same order
    std::optional<MetricsReport> metrics;    // global model on the test windows
};

struct EpochLog {
    std::size_t epoch = 0;
    std::optional<MetricsReport> metrics;
};

inline nlohmann::json to_json(const RoundLog& log) {
    nlohmann::json j{{"round", log.round}, {"selected", log.selected}, {"sizes", log.sizes}};
    j["metrics"] = log.metrics ? to_json(*log.metrics) : nlohmann::json(nullptr);
    return j;
}

// Seed of the local training a client performs in a given round. A
// centralized run given this seed reproduces that client's update exactly.
inline std::uint64_t client_train_seed(std::uint64_t master, ClientId client, std::size_t round) {
    return derive_seed(master, client, round, "client-train");
}

inline std::uint64_t init_seed(std::uint64_t master) { return derive_seed(master, "global-init"); }

// ---------------------------------------------------------------------------
// Partitioning

// One client per user; users without windows are skipped and reported through
// `dropped` when given. Client ids follow input order.
inline std::vector<ClientDataset> partition_cross_device(std::span<const UserHistory> users, const WindowConfig& cfg,
                                                         std::vector<UserId>* dropped = nullptr) {
    std::vector<ClientDataset> clients;
    ClientId next = 0;
    for (const auto& u : users) {
        auto w = build_windows(u, cfg);
        if (w.empty()) {
            if (dropped) dropped->push_back(u.user_id);
            continue;
        }
        clients.push_back({next++, std::move(w), {u.user_id}});
    }
    if (clients.empty()) throw ConfigError("cross-device partition: no user has any window");
    return clients;
}

// Random partition of users into groups of exactly `sizes`; each silo holds the
// union of its users' windows.
inline std::vector<ClientDataset> partition_cross_silo(std::vector<UserHistory> users,
                                                       std::span<const std::size_t> sizes, std::uint64_t seed,
                                                       const WindowConfig& cfg) {
    const auto want = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    if (want != users.size()) {
        throw ConfigError("cross-silo partition: silo sizes sum to " + std::to_string(want) + " but there are " +
                          std::to_string(users.size()) + " users");
    }
    sort_by_user_id(users);
    auto rng = make_rng(seed, "silo-partition");
    std::shuffle(users.begin(), users.end(), rng);

    std::vector<ClientDataset> silos;
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < sizes.size(); ++s) {
        ClientDataset silo;
        silo.client_id = static_cast<ClientId>(s);
        for (std::size_t i = 0; i < sizes[s]; ++i, ++cursor) {
            const auto& u = users[cursor];
            silo.monitored_users.push_back(u.user_id);
            auto w = build_windows(u, cfg);
            silo.windows.insert(silo.windows.end(), std::make_move_iterator(w.begin()),
                                std::make_move_iterator(w.end()));
        }
        std::sort(silo.monitored_users.begin(), silo.monitored_users.end());
        silos.push_back(std::move(silo));
    }
    return silos;
}

// ---------------------------------------------------------------------------
// Round protocol

inline std::size_t selection_count(std::size_t n_clients, double fraction) {
    const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n_clients) + 0.5));
    return std::clamp<std::size_t>(k, 1, n_clients);
}

// Positions (into `clients`) of a uniform sample without replacement of
// max(1, round(c * N)) clients, in ascending order.
inline std::vector<std::size_t> select_clients(std::size_t n_clients, double fraction, Rng& round_rng) {
    if (n_clients == 0) throw ConfigError("select_clients: no clients");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("select_clients: fraction must lie in (0, 1]");
    std::vector<std::size_t> all(n_clients);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<std::size_t> picked;
    picked.reserve(selection_count(n_clients, fraction));
    std::sample(all.begin(), all.end(), std::back_inserter(picked), selection_count(n_clients, fraction), round_rng);
    return picked;
}

struct ClientUpdate {
    ClientId client_id = 0;
    ModelParameters params;
    std::size_t size = 0;
};

// Size-weighted mean of the client parameters. Updates are visited in
// ascending client id and the mean is accumulated as an offset from the first
// update, theta_1 + sum_k w_k (theta_k - theta_1), which equals
// sum_k w_k theta_k but reproduces identical inputs (and a lone client) bit for
// bit.
inline ModelParameters fedavg_aggregate(std::vector<ClientUpdate> updates) {
    if (updates.empty()) throw AggregationError("fedavg: no client updates");
    std::sort(updates.begin(), updates.end(),
              [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
    double total = 0.0;
    for (const auto& u : updates) {
        if (u.size == 0) throw AggregationError("fedavg: client " + std::to_string(u.client_id) + " has no samples");
        if (!u.params.same_shape(updates.front().params)) throw AggregationError("fedavg: parameter shapes differ");
        total += static_cast<double>(u.size);
    }
    ModelParameters out = updates.front().params;
    auto acc = out.values();
    const auto base = updates.front().params.values();
    for (std::size_t k = 1; k < updates.size(); ++k) {
        const double w = static_cast<double>(updates[k].size) / total;
        const auto v = updates[k].params.values();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * (v[i] - base[i]);
    }
    return out;
}

namespace detail {

// Runs task(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots by the task; the first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& task) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    task(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

inline std::optional<MetricsReport> evaluate_model(const ModelParameters& params,
                                                   std::span<const LabeledWindow> test_windows) {
    if (test_windows.empty()) return std::nullopt;
    const auto p = predict(params, test_windows);
    std::vector<int> y;
    y.reserve(test_windows.size());
    for (const auto& w : test_windows) y.push_back(w.y);
    return evaluate(p, y);
}

} // namespace detail

struct FederatedResult {
    ModelParameters params;
    std::vector<RoundLog> rounds;
};

// Each round: sample clients, broadcast the global parameters, let every
// selected client run `local_epochs` of SGD from them, aggregate with FedAvg
// and evaluate on `test_windows`. Clients are stateless between rounds.
inline FederatedResult run_federated(std::span<const ClientDataset> clients, const FedConfig& cfg,
                                     std::span<const LabeledWindow> test_windows,
                                     const std::function<void(const RoundLog&)>& on_round = {}) {
    cfg.validate();
    if (clients.empty()) throw ConfigError("federation: no clients left to train");
    for (const auto& c : clients) {
        if (c.windows.empty()) throw ConfigError("federation: client " + std::to_string(c.client_id) + " has no windows");
    }
    const auto arch = Architecture::for_input(clients.front().windows.front().x.size());

    FederatedResult result{init_params(init_seed(cfg.seed), arch), {}};
    for (std::size_t round = 0; round < cfg.rounds; ++round) {
        auto round_rng = make_rng(cfg.seed, round, "select");
        const auto picked = select_clients(clients.size(), cfg.selection_fraction, round_rng);

        std::vector<ClientUpdate> updates(picked.size());
        const auto& global = result.params;
        detail::parallel_for(picked.size(), cfg.threads, [&](std::size_t i) {
            const auto& client = clients[picked[i]];
            TrainConfig local = cfg.train;
            local.epochs = cfg.local_epochs;
            local.seed = client_train_seed(cfg.seed, client.client_id, round);
            updates[i] = {client.client_id, train_epochs(global, client.windows, local), client.size()};
        });

        RoundLog log;
        log.round = round;
        for (auto idx : picked) {
            log.selected.push_back(clients[idx].client_id);
            log.sizes.push_back(clients[idx].size());
        }
        result.params = fedavg_aggregate(std::move(updates));
        log.metrics = detail::evaluate_model(result.params, test_windows);
        if (on_round) on_round(log);
        result.rounds.push_back(std::move(log));
    }
    return result;
}

struct CentralizedResult {
    ModelParameters params;
    std::vector<EpochLog> epochs;
};

// Pooled training for cfg.centralized_epochs epochs from init_seed(cfg.seed),
// using cfg.train.seed as the training stream; evaluated after every epoch.
inline CentralizedResult run_centralized(std::span<const LabeledWindow> train_windows, const FedConfig& cfg,
                                         std::span<const LabeledWindow> test_windows,
                                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
    cfg.train.validate();
    if (train_windows.empty()) throw ConfigError("centralized: empty training set");
    const auto arch = Architecture::for_input(train_windows.front().x.size());
    CentralizedResult result{init_params(init_seed(cfg.seed), arch), {}};
    for (std::size_t e = 0; e < cfg.centralized_epochs; ++e) {
        train_one_epoch(result.params, train_windows, cfg.train, e);
        if (!result.params.all_finite()) throw NumericError("training diverged: non-finite parameters");
        EpochLog log{e, detail::evaluate_model(result.params, test_windows)};
        if (on_epoch) on_epoch(log);
        result.epochs.push_back(std::move(log));
    }
    return result;
}

} // namespace fedsim
