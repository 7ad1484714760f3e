#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/neuralnet.hpp"
#include "fedsim/resampling.hpp"
#include "fedsim/synthgen.hpp"
#include <nlohmann/json.hpp>

namespace fedsim {

enum class Scenario { raw, drop_users_5, drop_users_10, oversample, undersample, over_under };

inline constexpr std::array<Scenario, 6> kAllScenarios{Scenario::raw,        Scenario::drop_users_5,
                                                       Scenario::drop_users_10, Scenario::oversample,
                                                       Scenario::undersample, Scenario::over_under};
inline constexpr std::array<Setting, 3> kAllSettings{Setting::centralized, Setting::cross_device, Setting::cross_silo};

inline const char* to_string(Scenario s) {
    switch (s) {
    case Scenario::raw: return "raw";
    case Scenario::drop_users_5: return "drop_users_5";
    case Scenario::drop_users_10: return "drop_users_10";
    case Scenario::oversample: return "oversample";
    case Scenario::undersample: return "undersample";
    case Scenario::over_under: return "over_under";
    }
    return "?";
}

inline Scenario parse_scenario(const std::string& s) {
    for (auto sc : kAllScenarios) {
        if (s == to_string(sc)) return sc;
    }
    throw ConfigError("unknown scenario '" + s + "'");
}

inline ResampleMethod scenario_method(Scenario s) {
    switch (s) {
    case Scenario::oversample: return ResampleMethod::kmeans_smote;
    case Scenario::undersample: return ResampleMethod::undersample;
    case Scenario::over_under: return ResampleMethod::smote_enn;
    default: return ResampleMethod::none;
    }
}

// Per-class window minimum for the user-exclusion scenarios, 0 otherwise.
inline std::size_t scenario_min_per_class(Scenario s) {
    switch (s) {
    case Scenario::drop_users_5: return 5;
    case Scenario::drop_users_10: return 10;
    default: return 0;
    }
}

enum class ResampleScope { client, pooled };

struct ExperimentConfig {
    std::vector<Setting> settings{kAllSettings.begin(), kAllSettings.end()};
    std::vector<Scenario> scenarios{kAllScenarios.begin(), kAllScenarios.end()};
    SynthConfig synth;
    WindowConfig window;
    FedConfig fed;
    ResampleSpec resample;
    // When set, every listed scenario must map to this method.
    std::optional<ResampleMethod> resample_method;
    ResampleScope resample_scope = ResampleScope::client;
    double cross_device_fraction = 0.4;
    double cross_silo_fraction = 1.0;
    std::size_t n_seeds = 10;
    std::size_t holdout_users = 50;
    std::uint64_t seed = 1;
    std::string output_dir = "out";
    std::string users_csv;   // empty: <output_dir>/users.csv
    std::size_t parallel = 1;

    std::string users_path() const {
        return users_csv.empty() ? (std::filesystem::path(output_dir) / "users.csv").string() : users_csv;
    }

    void validate() const {
        if (settings.empty()) throw ConfigError("config: no learning settings selected");
        if (scenarios.empty()) throw ConfigError("config: no scenarios selected");
        if (n_seeds < 1) throw ConfigError("config: n_seeds must be >= 1");
        if (holdout_users < 1) throw ConfigError("config: holdout_users must be >= 1");
        if (parallel < 1) throw ConfigError("config: parallel must be >= 1");
        synth.validate();
        window.validate();
        resample.validate();
        FedConfig f = fed;
        f.selection_fraction = cross_device_fraction;
        f.validate();
        f.selection_fraction = cross_silo_fraction;
        f.validate();
        if (resample_method) {
            for (auto sc : scenarios) {
                if (scenario_method(sc) != *resample_method) {
                    throw ConfigError(std::string("config: scenario '") + to_string(sc) + "' requires resample method '" +
                                      to_string(scenario_method(sc)) + "', config says '" +
                                      to_string(*resample_method) + "'");
                }
            }
        }
        const bool silo = std::find(settings.begin(), settings.end(), Setting::cross_silo) != settings.end();
        if (silo && holdout_users < synth.n_users) {
            const auto sum = std::accumulate(fed.silo_sizes.begin(), fed.silo_sizes.end(), std::size_t{0});
            if (sum != synth.n_users - holdout_users) {
                throw ConfigError("config: silo_sizes sum to " + std::to_string(sum) + " but " +
                                  std::to_string(synth.n_users - holdout_users) + " users remain for training");
            }
        }
    }
};

// "paper": the full protocol. "desk": a reduced grid for quick runs.
inline ExperimentConfig preset(std::string_view name) {
    ExperimentConfig c;
    if (name == "paper") return c;
    if (name == "desk") {
        c.synth.n_users = 60;
        c.holdout_users = 10;
        c.n_seeds = 3;
        c.fed.rounds = 10;
        c.fed.centralized_epochs = 10;
        c.fed.silo_sizes = {16, 17, 17};
        return c;
    }
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk or paper)");
}

// ---------------------------------------------------------------------------
// Config file (JSON). Every key is optional and overlays the preset; unknown
// keys are rejected.

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, const char* where) {
    if (!j.is_object()) throw ConfigError(std::string("config: '") + where + "' must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError(std::string("config: unknown key '") + key + "' in " + where);
        }
    }
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            if (!j.at(key).is_number_unsigned()) throw ConfigError(std::string("config: '") + key + "' must be a non-negative integer");
        }
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

} // namespace detail

namespace detail {

inline ExperimentConfig overlay_config(ExperimentConfig c, const nlohmann::json& j) {
    using detail::read_key;
    detail::check_keys(j,
                       {"seed", "n_seeds", "holdout_users", "output_dir", "users_csv", "settings", "scenarios",
                        "resample_scope", "selection_fraction", "synth", "window", "fed", "train", "resample",
                        "parallel"},
                       "top level");
    read_key(j, "seed", c.seed);
    read_key(j, "n_seeds", c.n_seeds);
    read_key(j, "holdout_users", c.holdout_users);
    read_key(j, "output_dir", c.output_dir);
    read_key(j, "users_csv", c.users_csv);
    read_key(j, "parallel", c.parallel);
    if (j.contains("settings")) {
        c.settings.clear();
        for (const auto& s : j.at("settings")) c.settings.push_back(parse_setting(s.get<std::string>()));
    }
    if (j.contains("scenarios")) {
        c.scenarios.clear();
        for (const auto& s : j.at("scenarios")) c.scenarios.push_back(parse_scenario(s.get<std::string>()));
    }
    if (j.contains("resample_scope")) {
        const auto s = j.at("resample_scope").get<std::string>();
        if (s == "client") c.resample_scope = ResampleScope::client;
        else if (s == "pooled") c.resample_scope = ResampleScope::pooled;
        else throw ConfigError("config: resample_scope must be 'client' or 'pooled'");
    }
    if (j.contains("selection_fraction")) {
        const auto& s = j.at("selection_fraction");
        detail::check_keys(s, {"cross_device", "cross_silo"}, "selection_fraction");
        read_key(s, "cross_device", c.cross_device_fraction);
        read_key(s, "cross_silo", c.cross_silo_fraction);
    }
    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        detail::check_keys(s, {"n_users", "target_label0_fraction", "seed", "quantity_skew", "engagement"}, "synth");
        read_key(s, "n_users", c.synth.n_users);
        read_key(s, "target_label0_fraction", c.synth.target_label0_fraction);
        read_key(s, "seed", c.synth.seed);
        if (s.contains("quantity_skew")) {
            c.synth.quantity_skew.clear();
            for (const auto& b : s.at("quantity_skew")) {
                detail::check_keys(b, {"weight", "min_sessions", "max_sessions"}, "quantity_skew entry");
                LengthBucket lb;
                read_key(b, "weight", lb.weight);
                read_key(b, "min_sessions", lb.min_sessions);
                read_key(b, "max_sessions", lb.max_sessions);
                c.synth.quantity_skew.push_back(lb);
            }
        }
        if (s.contains("engagement")) {
            const auto& e = s.at("engagement");
            detail::check_keys(e,
                               {"engaged_rate_min", "engaged_rate_max", "disengaged_rate", "dwell_min", "dwell_max",
                                "share_gain", "share_spread"},
                               "engagement");
            auto& m = c.synth.engagement;
            read_key(e, "engaged_rate_min", m.engaged_rate_min);
            read_key(e, "engaged_rate_max", m.engaged_rate_max);
            read_key(e, "disengaged_rate", m.disengaged_rate);
            read_key(e, "dwell_min", m.dwell_min);
            read_key(e, "dwell_max", m.dwell_max);
            read_key(e, "share_gain", m.share_gain);
            read_key(e, "share_spread", m.share_spread);
        }
    }
    if (j.contains("window")) {
        const auto& w = j.at("window");
        detail::check_keys(w, {"window", "horizon", "adherence_threshold", "normalize"}, "window");
        read_key(w, "window", c.window.window);
        read_key(w, "horizon", c.window.horizon);
        read_key(w, "adherence_threshold", c.window.adherence_threshold);
        read_key(w, "normalize", c.window.normalize);
    }
    if (j.contains("fed")) {
        const auto& f = j.at("fed");
        detail::check_keys(f, {"rounds", "local_epochs", "centralized_epochs", "silo_sizes", "threads"}, "fed");
        read_key(f, "rounds", c.fed.rounds);
        read_key(f, "local_epochs", c.fed.local_epochs);
        read_key(f, "centralized_epochs", c.fed.centralized_epochs);
        read_key(f, "silo_sizes", c.fed.silo_sizes);
        read_key(f, "threads", c.fed.threads);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t, {"learning_rate", "batch_size", "dropout_rate"}, "train");
        read_key(t, "learning_rate", c.fed.train.learning_rate);
        read_key(t, "batch_size", c.fed.train.batch_size);
        read_key(t, "dropout_rate", c.fed.train.dropout_rate);
    }
    if (j.contains("resample")) {
        const auto& r = j.at("resample");
        detail::check_keys(r, {"method", "k_neighbors", "k_clusters", "cluster_imbalance_threshold", "enn_k",
                               "kmeans_max_iter"},
                           "resample");
        if (r.contains("method")) c.resample_method = parse_resample_method(r.at("method").get<std::string>());
        read_key(r, "k_neighbors", c.resample.k_neighbors);
        read_key(r, "k_clusters", c.resample.k_clusters);
        read_key(r, "cluster_imbalance_threshold", c.resample.cluster_imbalance_threshold);
        read_key(r, "enn_k", c.resample.enn_k);
        read_key(r, "kmeans_max_iter", c.resample.kmeans_max_iter);
    }
    return c;
}

} // namespace detail

inline ExperimentConfig apply_config_json(ExperimentConfig base, const nlohmann::json& j) {
    try {
        return detail::overlay_config(std::move(base), j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return apply_config_json(std::move(base), j);
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json settings = nlohmann::json::array(), scenarios = nlohmann::json::array(), buckets = nlohmann::json::array();
    for (auto s : c.settings) settings.push_back(to_string(s));
    for (auto s : c.scenarios) scenarios.push_back(to_string(s));
    for (const auto& b : c.synth.quantity_skew) {
        buckets.push_back({{"weight", b.weight}, {"min_sessions", b.min_sessions}, {"max_sessions", b.max_sessions}});
    }
    const auto& m = c.synth.engagement;
    nlohmann::json resample{{"k_neighbors", c.resample.k_neighbors},
                            {"k_clusters", c.resample.k_clusters},
                            {"cluster_imbalance_threshold", c.resample.cluster_imbalance_threshold},
                            {"enn_k", c.resample.enn_k},
                            {"kmeans_max_iter", c.resample.kmeans_max_iter}};
    if (c.resample_method) resample["method"] = to_string(*c.resample_method);
    return {
        {"seed", c.seed},
        {"n_seeds", c.n_seeds},
        {"holdout_users", c.holdout_users},
        {"settings", settings},
        {"scenarios", scenarios},
        {"resample_scope", c.resample_scope == ResampleScope::client ? "client" : "pooled"},
        {"selection_fraction", {{"cross_device", c.cross_device_fraction}, {"cross_silo", c.cross_silo_fraction}}},
        {"synth",
         {{"n_users", c.synth.n_users},
          {"target_label0_fraction", c.synth.target_label0_fraction},
          {"seed", c.synth.seed},
          {"quantity_skew", buckets},
          {"engagement",
           {{"engaged_rate_min", m.engaged_rate_min},
            {"engaged_rate_max", m.engaged_rate_max},
            {"disengaged_rate", m.disengaged_rate},
            {"dwell_min", m.dwell_min},
            {"dwell_max", m.dwell_max},
            {"share_gain", m.share_gain},
            {"share_spread", m.share_spread}}}}},
        {"window",
         {{"window", c.window.window},
          {"horizon", c.window.horizon},
          {"adherence_threshold", c.window.adherence_threshold},
          {"normalize", c.window.normalize}}},
        {"fed",
         {{"rounds", c.fed.rounds},
          {"local_epochs", c.fed.local_epochs},
          {"centralized_epochs", c.fed.centralized_epochs},
          {"silo_sizes", c.fed.silo_sizes}}},
        {"train",
         {{"learning_rate", c.fed.train.learning_rate},
          {"batch_size", c.fed.train.batch_size},
          {"dropout_rate", c.fed.train.dropout_rate}}},
        {"resample", resample},
    };
}

// ---------------------------------------------------------------------------
// One grid cell: (setting, scenario, seed)

struct CellResult {
    Setting setting = Setting::centralized;
    Scenario scenario = Scenario::raw;
    std::size_t seed_index = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    MetricsReport metrics;
    std::size_t participating_clients = 0;
    std::size_t train_windows = 0;
    std::size_t resample_fallbacks = 0;
    ResampleStats resample_stats;
    std::vector<std::string> log_lines;   // JSON-lines round/epoch log
};

inline std::uint64_t run_seed(const ExperimentConfig& cfg, std::size_t seed_index) {
    return cfg.seed + seed_index;
}

namespace detail {

// Resamples one client's windows; a client whose classes cannot be treated
// keeps its data unchanged and is counted as a fallback.
inline void resample_client(ClientDataset& client, const ResampleSpec& spec, CellResult& cell) {
    try {
        client.windows = resample(client.windows, spec, &cell.resample_stats);
    } catch (const ImbalanceError&) {
        ++cell.resample_fallbacks;
    }
}

inline void apply_resampling(std::vector<ClientDataset>& clients, const ExperimentConfig& cfg, Scenario scenario,
                             std::uint64_t seed, CellResult& cell) {
    ResampleSpec spec = cfg.resample;
    spec.method = scenario_method(scenario);
    if (spec.method == ResampleMethod::none) return;

    if (cfg.resample_scope == ResampleScope::client || clients.size() == 1) {
        for (auto& c : clients) {
            spec.seed = derive_seed(seed, c.client_id, "resample");
            resample_client(c, spec, cell);
        }
        return;
    }
    // Pooled: resample the union, then hand each window back to the client
    // monitoring its user (synthetic windows inherit their base sample's user).
    std::unordered_map<UserId, std::size_t> owner;
    ClientDataset pooled;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        for (const auto& u : clients[i].monitored_users) owner[u] = i;
        pooled.windows.insert(pooled.windows.end(), clients[i].windows.begin(), clients[i].windows.end());
        clients[i].windows.clear();
    }
    spec.seed = derive_seed(seed, "pooled-resample");
    resample_client(pooled, spec, cell);
    for (auto& w : pooled.windows) clients[owner.at(w.user_id)].windows.push_back(std::move(w));
}

inline std::string json_line(const nlohmann::json& j) { return j.dump(); }

} // namespace detail

inline CellResult run_cell(const ExperimentConfig& cfg, const std::vector<UserHistory>& users, Setting setting,
                           Scenario scenario, std::size_t seed_index, std::size_t threads = 1) {
    CellResult cell;
    cell.setting = setting;
    cell.scenario = scenario;
    cell.seed_index = seed_index;
    cell.seed = run_seed(cfg, seed_index);
    try {
        const auto split = split_holdout_users(users, cfg.holdout_users, cell.seed);
        const auto test_windows = build_windows(split.test, cfg.window);
        if (test_windows.empty()) throw ConfigError("held-out users have no windows to evaluate on");

        // Exclusion works on users: every user is judged on its own windows,
        // whatever setting later groups them.
        std::vector<UserId> no_windows;
        auto per_user = partition_cross_device(split.train, cfg.window, &no_windows);
        if (const auto min = scenario_min_per_class(scenario); min > 0) per_user = exclude_low_info(std::move(per_user), min);
        if (per_user.empty()) throw ConfigError("no trainable users left after exclusion");
        std::set<UserId> kept;
        for (const auto& c : per_user) kept.insert(c.monitored_users.front());

        std::vector<ClientDataset> clients;
        switch (setting) {
        case Setting::centralized: {
            ClientDataset pooled;
            for (auto& c : per_user) {
                pooled.monitored_users.push_back(c.monitored_users.front());
                pooled.windows.insert(pooled.windows.end(), c.windows.begin(), c.windows.end());
            }
            std::sort(pooled.monitored_users.begin(), pooled.monitored_users.end());
            clients.push_back(std::move(pooled));
            break;
        }
        case Setting::cross_device:
            clients = std::move(per_user);
            break;
        case Setting::cross_silo: {
            auto silos = partition_cross_silo(split.train, cfg.fed.silo_sizes, cell.seed, cfg.window);
            for (auto& s : silos) {
                std::erase_if(s.windows, [&](const LabeledWindow& w) { return !kept.contains(w.user_id); });
                std::erase_if(s.monitored_users, [&](const UserId& u) { return !kept.contains(u); });
                if (!s.windows.empty()) clients.push_back(std::move(s));
            }
            break;
        }
        }
        if (clients.empty()) throw ConfigError("no trainable clients");

        detail::apply_resampling(clients, cfg, scenario, cell.seed, cell);
        std::erase_if(clients, [](const ClientDataset& c) { return c.windows.empty(); });
        if (clients.empty()) throw ConfigError("no trainable clients after resampling");
        cell.participating_clients = clients.size();
        for (const auto& c : clients) cell.train_windows += c.size();

        FedConfig fed = cfg.fed;
        fed.seed = cell.seed;
        fed.setting = setting;
        fed.threads = threads;
        if (setting == Setting::centralized) {
            fed.train.seed = derive_seed(cell.seed, "centralized-train");
            const auto r = run_centralized(clients.front().windows, fed, test_windows, [&](const EpochLog& e) {
                nlohmann::json j{{"epoch", e.epoch}};
                j["metrics"] = e.metrics ? to_json(*e.metrics) : nlohmann::json(nullptr);
                cell.log_lines.push_back(detail::json_line(j));
            });
            if (r.epochs.empty()) throw ConfigError("centralized_epochs must be >= 1");
            cell.metrics = *r.epochs.back().metrics;
        } else {
            fed.selection_fraction = setting == Setting::cross_device ? cfg.cross_device_fraction : cfg.cross_silo_fraction;
            const auto r = run_federated(clients, fed, test_windows,
                                         [&](const RoundLog& log) { cell.log_lines.push_back(detail::json_line(to_json(log))); });
            cell.metrics = *r.rounds.back().metrics;
        }
        cell.ok = true;
    } catch (const Error& e) {
        cell.ok = false;
        cell.error = e.what();
    }
    return cell;
}

// ---------------------------------------------------------------------------
// Grid

struct GridRow {
    Setting setting;
    Scenario scenario;
    std::size_t succeeded = 0;
    std::size_t failed = 0;
    std::optional<SeedAggregate> aggregate;
};

struct GridReport {
    std::vector<CellResult> cells;   // ordered setting, scenario, seed
    std::vector<GridRow> rows;       // ordered setting, scenario
    std::vector<std::string> warnings;
};

inline const GridRow* find_row(const std::vector<GridRow>& rows, Setting s, Scenario sc) {
    for (const auto& r : rows) {
        if (r.setting == s && r.scenario == sc) return &r;
    }
    return nullptr;
}

// Soft check: cross-device recall should not drop when undersampling.
inline std::vector<std::string> shape_checks(const std::vector<GridRow>& rows) {
    std::vector<std::string> warnings;
    const auto* raw = find_row(rows, Setting::cross_device, Scenario::raw);
    const auto* under = find_row(rows, Setting::cross_device, Scenario::undersample);
    if (raw && under && raw->aggregate && under->aggregate) {
        const double a = raw->aggregate->recall().mean, b = under->aggregate->recall().mean;
        if (b < a) {
            std::ostringstream os;
            os << "shape check: cross_device undersample recall " << std::fixed << std::setprecision(4) << b
               << " is below cross_device raw recall " << a;
            warnings.push_back(os.str());
        }
    }
    return warnings;
}

inline std::vector<GridRow> aggregate_cells(const std::vector<CellResult>& cells, const std::vector<Setting>& settings,
                                            const std::vector<Scenario>& scenarios) {
    std::vector<GridRow> rows;
    for (auto s : settings) {
        for (auto sc : scenarios) {
            GridRow row{s, sc, 0, 0, std::nullopt};
            std::vector<MetricsReport> reports;
            for (const auto& c : cells) {
                if (c.setting != s || c.scenario != sc) continue;
                if (c.ok) {
                    ++row.succeeded;
                    reports.push_back(c.metrics);
                } else {
                    ++row.failed;
                }
            }
            if (!reports.empty()) row.aggregate = aggregate_seeds(reports);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

// Runs every (setting, scenario, seed) cell; up to `parallel` cells at a time.
// Results land in per-cell slots, so the report is independent of scheduling.
inline GridReport run_grid(const ExperimentConfig& cfg, const std::vector<UserHistory>& users,
                           std::ostream* progress = nullptr) {
    cfg.validate();
    if (cfg.holdout_users >= users.size()) {
        throw ConfigError("config: holdout_users must be below the " + std::to_string(users.size()) + " users in the data");
    }
    if (std::find(cfg.settings.begin(), cfg.settings.end(), Setting::cross_silo) != cfg.settings.end()) {
        const auto sum = std::accumulate(cfg.fed.silo_sizes.begin(), cfg.fed.silo_sizes.end(), std::size_t{0});
        if (sum != users.size() - cfg.holdout_users) {
            throw ConfigError("config: silo_sizes sum to " + std::to_string(sum) + " but the data leaves " +
                              std::to_string(users.size() - cfg.holdout_users) + " training users");
        }
    }
    struct Job {
        Setting setting;
        Scenario scenario;
        std::size_t seed_index;
    };
    std::vector<Job> jobs;
    for (auto s : cfg.settings) {
        for (auto sc : cfg.scenarios) {
            for (std::size_t k = 0; k < cfg.n_seeds; ++k) jobs.push_back({s, sc, k});
        }
    }
    GridReport report;
    report.cells.resize(jobs.size());
    const std::size_t client_threads = cfg.parallel > 1 ? 1 : std::max<std::size_t>(1, cfg.fed.threads);
    std::mutex progress_mutex;
    detail::parallel_for(jobs.size(), cfg.parallel, [&](std::size_t i) {
        const auto& j = jobs[i];
        report.cells[i] = run_cell(cfg, users, j.setting, j.scenario, j.seed_index, client_threads);
        if (progress) {
            std::lock_guard lock(progress_mutex);
            const auto& c = report.cells[i];
            *progress << "[" << to_string(c.setting) << " / " << to_string(c.scenario) << " / seed " << c.seed_index
                      << "] " << (c.ok ? "ok" : "FAILED: " + c.error) << '\n';
        }
    });
    report.rows = aggregate_cells(report.cells, cfg.settings, cfg.scenarios);
    report.warnings = shape_checks(report.rows);
    return report;
}

// ---------------------------------------------------------------------------
// Report files

inline std::string format_double(double v, int precision = 17) {
    if (!std::isfinite(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    return buf;
}

inline std::string format_fixed(double v, int decimals = 6) {
    if (!std::isfinite(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

inline std::string cell_file_name(const CellResult& c) {
    return std::string(to_string(c.setting)) + "__" + to_string(c.scenario) + "__seed" + std::to_string(c.seed_index) +
           ".jsonl";
}

inline constexpr const char* kPerSeedHeader =
    "setting,scenario,seed_index,seed,status,clients,train_windows,resample_fallbacks,tp,fp,tn,fn,accuracy,precision,"
    "recall,f1,gmean,error";

inline constexpr const char* kGridHeader =
    "setting,scenario,acc_mean,acc_std,p_mean,p_std,r_mean,r_std,f1_mean,f1_std,gm_mean,gm_std";

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
}

inline void write_per_seed_csv(std::ostream& out, const std::vector<CellResult>& cells) {
    out << kPerSeedHeader << '\n';
    for (const auto& c : cells) {
        out << to_string(c.setting) << ',' << to_string(c.scenario) << ',' << c.seed_index << ',' << c.seed << ','
            << (c.ok ? "ok" : "failed") << ',' << c.participating_clients << ',' << c.train_windows << ','
            << c.resample_fallbacks;
        if (c.ok) {
            const auto& m = c.metrics;
            out << ',' << m.counts.tp << ',' << m.counts.fp << ',' << m.counts.tn << ',' << m.counts.fn;
            for (std::size_t i = 0; i < kMetricNames.size(); ++i) out << ',' << format_double(metric_value(m, i));
        } else {
            out << ",,,,,,,,,";
        }
        out << ',' << csv_escape(c.error) << '\n';
    }
}

inline void write_grid_csv(std::ostream& out, const std::vector<GridRow>& rows) {
    out << kGridHeader << '\n';
    for (const auto& r : rows) {
        if (!r.aggregate) continue;
        out << to_string(r.setting) << ',' << to_string(r.scenario);
        for (const auto& m : r.aggregate->metrics) out << ',' << format_fixed(m.mean) << ',' << format_fixed(m.std);
        out << '\n';
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << content;
    if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline void write_grid_outputs(const std::filesystem::path& dir, const ExperimentConfig& cfg, const GridReport& report) {
    std::filesystem::create_directories(dir / "runs");
    for (const auto& c : report.cells) {
        std::string body;
        for (const auto& line : c.log_lines) body += line + '\n';
        write_text_file(dir / "runs" / cell_file_name(c), body);
    }
    std::ostringstream per_seed, grid;
    write_per_seed_csv(per_seed, report.cells);
    write_grid_csv(grid, report.rows);
    write_text_file(dir / "per_seed.csv", per_seed.str());
    write_text_file(dir / "grid.csv", grid.str());

    nlohmann::json failures = nlohmann::json::array();
    for (const auto& c : report.cells) {
        if (!c.ok) {
            failures.push_back({{"setting", to_string(c.setting)},
                                {"scenario", to_string(c.scenario)},
                                {"seed_index", c.seed_index},
                                {"error", c.error}});
        }
    }
    nlohmann::json summary{{"config", to_json(cfg)}, {"failures", failures}, {"warnings", report.warnings}};
    write_text_file(dir / "summary.json", summary.dump(2) + '\n');
}

// ---------------------------------------------------------------------------
// Reading a finished grid back (the `report` subcommand)

struct PerSeedRecord {
    Setting setting;
    Scenario scenario;
    std::size_t seed_index = 0;
    bool ok = false;
    MetricsReport metrics;
};

inline std::vector<std::string> split_csv_quoted(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline std::vector<PerSeedRecord> read_per_seed_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kPerSeedHeader) throw InputError("per_seed.csv: missing or unexpected header");
    std::vector<PerSeedRecord> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv_quoted(line);
        if (f.size() != 18) throw InputError("per_seed.csv line " + std::to_string(lineno) + ": expected 18 fields");
        try {
            PerSeedRecord r{parse_setting(f[0]), parse_scenario(f[1]), 0, false, {}};
            r.seed_index = std::stoull(f[2]);
            r.ok = f[4] == "ok";
            if (!r.ok && f[4] != "failed") throw InputError("bad status '" + f[4] + "'");
            if (r.ok) {
                r.metrics.counts = {std::stoull(f[8]), std::stoull(f[9]), std::stoull(f[10]), std::stoull(f[11])};
                r.metrics.accuracy = std::stod(f[12]);
                r.metrics.precision = std::stod(f[13]);
                r.metrics.recall = std::stod(f[14]);
                r.metrics.f1 = std::stod(f[15]);
                r.metrics.gmean = std::stod(f[16]);
                // Flags are a function of the counts.
                r.metrics.undefined = compute_metrics(r.metrics.counts).undefined;
            }
            out.push_back(std::move(r));
        } catch (const ConfigError& e) {
            throw InputError("per_seed.csv line " + std::to_string(lineno) + ": " + e.what());
        } catch (const std::logic_error&) {
            throw InputError("per_seed.csv line " + std::to_string(lineno) + ": malformed number");
        }
    }
    if (out.empty()) throw InputError("per_seed.csv has no rows");
    return out;
}

struct ReportOutput {
    std::vector<GridRow> rows;
    std::vector<std::string> warnings;
};

// Recomputes the aggregate grid from per_seed.csv in `dir`, prints a
// metric table (scenarios by settings) and writes plot-data CSVs under dir/plots.
inline ReportOutput report_grid(const std::filesystem::path& dir, std::ostream& out) {
    std::ifstream in(dir / "per_seed.csv");
    if (!in) throw InputError("cannot open '" + (dir / "per_seed.csv").string() + "'");
    const auto records = read_per_seed_csv(in);

    std::vector<Setting> settings;
    std::vector<Scenario> scenarios;
    std::vector<CellResult> cells;
    for (const auto& r : records) {
        if (std::find(settings.begin(), settings.end(), r.setting) == settings.end()) settings.push_back(r.setting);
        if (std::find(scenarios.begin(), scenarios.end(), r.scenario) == scenarios.end()) scenarios.push_back(r.scenario);
        CellResult c;
        c.setting = r.setting;
        c.scenario = r.scenario;
        c.seed_index = r.seed_index;
        c.ok = r.ok;
        c.metrics = r.metrics;
        cells.push_back(std::move(c));
    }
    ReportOutput rep{aggregate_cells(cells, settings, scenarios), {}};
    rep.warnings = shape_checks(rep.rows);

    out << std::left << std::setw(16) << "scenario";
    for (auto s : settings) out << " | " << std::setw(44) << to_string(s);
    out << '\n' << std::setw(16) << "";
    for (std::size_t i = 0; i < settings.size(); ++i) {
        out << " | " << std::setw(44) << "Acc      P        R        F1       GM";
    }
    out << '\n';
    for (auto sc : scenarios) {
        out << std::setw(16) << to_string(sc);
        for (auto s : settings) {
            const auto* row = find_row(rep.rows, s, sc);
            std::string cellstr;
            if (row && row->aggregate) {
                for (const auto& m : row->aggregate->metrics) cellstr += format_fixed(m.mean, 4) + "   ";
            } else {
                cellstr = "failed";
            }
            out << " | " << std::setw(44) << cellstr;
        }
        out << '\n';
    }
    out << std::right;
    for (const auto& w : rep.warnings) out << "WARNING: " << w << '\n';

    std::filesystem::create_directories(dir / "plots");
    for (auto s : settings) {
        std::ostringstream fig;
        fig << "scenario,acc_mean,acc_std,p_mean,p_std,r_mean,r_std,f1_mean,f1_std,gm_mean,gm_std\n";
        for (auto sc : scenarios) {
            const auto* row = find_row(rep.rows, s, sc);
            fig << to_string(sc);
            for (std::size_t m = 0; m < kMetricNames.size(); ++m) {
                if (row && row->aggregate) {
                    fig << ',' << format_fixed(row->aggregate->metrics[m].mean) << ','
                        << format_fixed(row->aggregate->metrics[m].std);
                } else {
                    fig << ",nan,nan";
                }
            }
            fig << '\n';
        }
        write_text_file(dir / "plots" / (std::string("metrics_") + to_string(s) + ".csv"), fig.str());
    }
    std::ostringstream gm;
    gm << "setting,scenario,gm_mean,gm_std\n";
    for (auto s : settings) {
        for (auto sc : scenarios) {
            const auto* row = find_row(rep.rows, s, sc);
            gm << to_string(s) << ',' << to_string(sc) << ',';
            if (row && row->aggregate) {
                gm << format_fixed(row->aggregate->gmean().mean) << ',' << format_fixed(row->aggregate->gmean().std);
            } else {
                gm << "nan,nan";
            }
            gm << '\n';
        }
    }
    write_text_file(dir / "plots" / "gmean_by_setting.csv", gm.str());
    return rep;
}

// ---------------------------------------------------------------------------
// `generate`

inline CalibrationReport generate_dataset(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
    cfg.synth.validate();
    cfg.window.validate();
    const auto users = generate_population(cfg.synth);
    std::filesystem::create_directories(dir);
    std::ostringstream csv;
    write_histories_csv(csv, users);
    write_text_file(dir / "users.csv", csv.str());
    const auto cal = calibration_report(users, cfg.window);
    write_text_file(dir / "calibration.json", to_json(cal).dump(2) + '\n');
    return cal;
}

} // namespace fedsim
