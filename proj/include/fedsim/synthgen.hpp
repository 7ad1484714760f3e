#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"
#include <nlohmann/json.hpp>

namespace fedsim {

// One component of the history-length mixture, in sessions (inclusive).
struct LengthBucket {
    double weight = 1.0;
    std::size_t min_sessions = 30;
    std::size_t max_sessions = 100;
};

// Per-user latent two-state process. Each user draws an engaged share and a
// mean engaged dwell time; the pair fixes the user's transition matrix:
//   leave    = 1 / dwell
//   reengage = leave * share / (1 - share)
// so the chain's stationary engaged probability is the drawn share.
struct EngagementModel {
    double engaged_rate_min = 1.0;   // Poisson mean while engaged
    double engaged_rate_max = 3.0;
    double disengaged_rate = 0.05;   // Poisson mean while disengaged
    double dwell_min = 4.0;          // mean engaged stretch, sessions
    double dwell_max = 16.0;
    // Mean engaged share is (1 - target_label0_fraction) * share_gain; each user
    // draws uniformly within +-share_spread of that mean.
    double share_gain = 0.9;
    double share_spread = 0.2;
};

struct SynthConfig {
    std::size_t n_users = 454;
    double target_label0_fraction = 0.75;
    // Default buckets are sized against 12-session windows with a 3-session
    // horizon: short users end with < 100 windows, long ones with > 200.
    std::vector<LengthBucket> quantity_skew{
        {85.0 / 454.0, 30, 113},
        {290.0 / 454.0, 114, 214},
        {79.0 / 454.0, 215, 400},
    };
    EngagementModel engagement;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_users < 1) throw ConfigError("synth: n_users must be >= 1");
        if (!(target_label0_fraction > 0.0 && target_label0_fraction < 1.0)) {
            throw ConfigError("synth: target_label0_fraction must lie in (0, 1)");
        }
        if (quantity_skew.empty()) throw ConfigError("synth: quantity_skew needs at least one bucket");
        double total = 0.0;
        for (const auto& b : quantity_skew) {
            if (!(b.weight >= 0.0) || !std::isfinite(b.weight)) {
                throw ConfigError("synth: bucket weights must be finite and >= 0");
            }
            if (b.min_sessions > b.max_sessions) throw ConfigError("synth: bucket min_sessions > max_sessions");
            total += b.weight;
        }
        if (!(total > 0.0)) throw ConfigError("synth: bucket weights sum to zero");
        const auto& e = engagement;
        if (!(e.engaged_rate_min >= 0.0 && e.engaged_rate_min <= e.engaged_rate_max)) {
            throw ConfigError("synth: engaged rate range invalid");
        }
        if (!(e.disengaged_rate >= 0.0)) throw ConfigError("synth: disengaged_rate must be >= 0");
        if (!(e.dwell_min >= 1.0 && e.dwell_min <= e.dwell_max)) {
            throw ConfigError("synth: dwell range must satisfy 1 <= min <= max");
        }
        if (!(e.share_gain > 0.0) || !(e.share_spread >= 0.0)) {
            throw ConfigError("synth: share_gain must be > 0 and share_spread >= 0");
        }
    }
};

inline std::string synth_user_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "u%04zu", index);
    return buf;
}

namespace detail {

// Largest-remainder apportionment of `n` items over the bucket weights.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<LengthBucket>& buckets) {
    double total = 0.0;
    for (const auto& b : buckets) total += b.weight;
    std::vector<std::size_t> counts(buckets.size());
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < buckets.size(); ++i) {
        const double exact = static_cast<double>(n) * buckets[i].weight / total;
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[i];
        rema.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[rema[k % rema.size()].second];
    return counts;
}

inline UserHistory simulate_user(const UserId& id, std::size_t length, const SynthConfig& cfg) {
    const auto& m = cfg.engagement;
    auto rng = make_rng(cfg.seed, id, "user");
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const double mean_share = (1.0 - cfg.target_label0_fraction) * m.share_gain;
    const double share = std::clamp(mean_share + m.share_spread * (2.0 * unit(rng) - 1.0), 0.01, 0.99);
    const double dwell = m.dwell_min + (m.dwell_max - m.dwell_min) * unit(rng);
    const double leave = 1.0 / dwell;
    const double reengage = std::min(1.0, leave * share / (1.0 - share));
    const double rate = m.engaged_rate_min + (m.engaged_rate_max - m.engaged_rate_min) * unit(rng);

    std::poisson_distribution<std::uint32_t> engaged_counts(std::max(rate, 1e-12));
    std::poisson_distribution<std::uint32_t> idle_counts(std::max(m.disengaged_rate, 1e-12));
    bool engaged = unit(rng) < share;

    UserHistory h{id, {}};
    h.counts.reserve(length);
    for (std::size_t s = 0; s < length; ++s) {
        std::uint32_t c = engaged ? engaged_counts(rng) : idle_counts(rng);
        if (!engaged && m.disengaged_rate <= 0.0) c = 0;
        h.counts.push_back(c);
        const double u = unit(rng);
        engaged = engaged ? (u >= leave) : (u < reengage);
    }
    return h;
}

} // namespace detail

// Deterministic in cfg.seed. Bucket membership is apportioned exactly and
// shuffled across users; every user's own process uses a stream seeded from
// (seed, user_id), so users can be simulated in any order.
inline std::vector<UserHistory> generate_population(const SynthConfig& cfg) {
    cfg.validate();
    const auto per_bucket = detail::apportion(cfg.n_users, cfg.quantity_skew);
    std::vector<std::size_t> bucket_of;
    bucket_of.reserve(cfg.n_users);
    for (std::size_t b = 0; b < per_bucket.size(); ++b) bucket_of.insert(bucket_of.end(), per_bucket[b], b);
    auto rng = make_rng(cfg.seed, "lengths");
    std::shuffle(bucket_of.begin(), bucket_of.end(), rng);

    std::vector<UserHistory> users;
    users.reserve(cfg.n_users);
    for (std::size_t i = 0; i < cfg.n_users; ++i) {
        const auto id = synth_user_id(i);
        const auto& bucket = cfg.quantity_skew[bucket_of[i]];
        auto len_rng = make_rng(cfg.seed, id, "length");
        std::uniform_int_distribution<std::size_t> len(bucket.min_sessions, bucket.max_sessions);
        users.push_back(detail::simulate_user(id, len(len_rng), cfg));
    }
    return users;
}

struct UserCalibration {
    UserId user_id;
    std::size_t windows = 0;
    double label0_fraction = 0.0;
};

struct CalibrationReport {
    std::size_t users = 0;
    std::size_t total_windows = 0;
    double label0_fraction = 0.0;
    double label1_fraction = 0.0;
    // Share of distinct feature vectors observed with both labels.
    double ambiguity_rate = 0.0;
    std::size_t distinct_vectors = 0;
    std::size_t users_without_windows = 0;
    std::size_t users_under_100_windows = 0;
    std::size_t users_over_200_windows = 0;
    std::vector<UserCalibration> per_user;
};

inline CalibrationReport calibration_report(std::span<const UserHistory> histories,
                                            const WindowConfig& cfg) {
    CalibrationReport r;
    r.users = histories.size();
    std::size_t zeros = 0;
    std::map<std::vector<double>, unsigned> seen;  // bit 0: label 0 seen, bit 1: label 1 seen
    for (const auto& h : histories) {
        const auto windows = build_windows(h, cfg);
        UserCalibration u{h.user_id, windows.size(), 0.0};
        const auto z = count_label(windows, 0);
        if (!windows.empty()) u.label0_fraction = static_cast<double>(z) / static_cast<double>(windows.size());
        zeros += z;
        r.total_windows += windows.size();
        if (windows.empty()) ++r.users_without_windows;
        if (windows.size() < 100) ++r.users_under_100_windows;
        if (windows.size() > 200) ++r.users_over_200_windows;
        for (const auto& w : windows) seen[w.x] |= (w.y == 1 ? 2u : 1u);
        r.per_user.push_back(std::move(u));
    }
    if (r.total_windows > 0) {
        r.label0_fraction = static_cast<double>(zeros) / static_cast<double>(r.total_windows);
        r.label1_fraction = 1.0 - r.label0_fraction;
    }
    r.distinct_vectors = seen.size();
    if (!seen.empty()) {
        const auto both = std::count_if(seen.begin(), seen.end(), [](const auto& kv) { return kv.second == 3u; });
        r.ambiguity_rate = static_cast<double>(both) / static_cast<double>(seen.size());
    }
    return r;
}

inline nlohmann::json to_json(const CalibrationReport& r) {
    nlohmann::json per_user = nlohmann::json::array();
    for (const auto& u : r.per_user) {
        per_user.push_back({{"user_id", u.user_id}, {"windows", u.windows}, {"label0_fraction", u.label0_fraction}});
    }
    return {
        {"users", r.users},
        {"total_windows", r.total_windows},
        {"label0_fraction", r.label0_fraction},
        {"label1_fraction", r.label1_fraction},
        {"ambiguity_rate", r.ambiguity_rate},
        {"distinct_vectors", r.distinct_vectors},
        {"users_without_windows", r.users_without_windows},
        {"users_under_100_windows", r.users_under_100_windows},
        {"users_over_200_windows", r.users_over_200_windows},
        {"per_user", std::move(per_user)},
    };
}

} // namespace fedsim
