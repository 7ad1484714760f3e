#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

using UserId = std::string;
using ClientId = std::uint32_t;

// Chronological per-session acquisition counts of one user (two sessions per
// week). Index in `counts` is the session index.
struct UserHistory {
    UserId user_id;
    std::vector<std::uint32_t> counts;

    bool operator==(const UserHistory&) const = default;
};

struct WindowConfig {
    std::size_t window = 12;                 // T, sessions per feature vector
    std::size_t horizon = 3;                 // p, sessions used for the label
    std::uint32_t adherence_threshold = 2;   // future acquisitions needed for y = 1
    bool normalize = false;                  // off: raw counts; on: log1p(count)

    std::size_t span() const { return window + horizon; }

    void validate() const {
        if (window < 1) throw ConfigError("window length must be >= 1");
        if (horizon < 1) throw ConfigError("prediction horizon must be >= 1");
        if (adherence_threshold < 1) throw ConfigError("adherence threshold must be >= 1");
    }
};

struct LabeledWindow {
    std::vector<double> x;
    int y = 0;
    UserId user_id;

    bool operator==(const LabeledWindow&) const = default;
};

// One federation participant. `monitored_users` is kept sorted and unique.
struct ClientDataset {
    ClientId client_id = 0;
    std::vector<LabeledWindow> windows;
    std::vector<UserId> monitored_users;

    std::size_t size() const { return windows.size(); }

    std::size_t count_label(int y) const {
        return static_cast<std::size_t>(std::count_if(
            windows.begin(), windows.end(), [y](const LabeledWindow& w) { return w.y == y; }));
    }

    bool monitors(const UserId& id) const {
        return std::binary_search(monitored_users.begin(), monitored_users.end(), id);
    }
};

inline std::size_t count_label(std::span<const LabeledWindow> windows, int y) {
    return static_cast<std::size_t>(std::count_if(
        windows.begin(), windows.end(), [y](const LabeledWindow& w) { return w.y == y; }));
}

inline int label(std::span<const std::uint32_t> future, std::size_t horizon,
                 std::uint32_t threshold) {
    if (future.size() != horizon) {
        throw InputError("label: expected " + std::to_string(horizon) + " future sessions, got " +
                         std::to_string(future.size()));
    }
    std::uint64_t sum = 0;
    for (auto c : future) sum += c;
    return sum >= threshold ? 1 : 0;
}

inline double encode_count(std::uint32_t c, bool normalize) {
    return normalize ? std::log1p(static_cast<double>(c)) : static_cast<double>(c);
}

// Stride-1 sliding windows: window i covers sessions [i, i+T) and is labeled
// from sessions [i+T, i+T+p). Histories shorter than T+p give no windows.
inline std::vector<LabeledWindow> build_windows(const UserHistory& history,
                                                const WindowConfig& cfg) {
    cfg.validate();
    std::vector<LabeledWindow> out;
    const auto& c = history.counts;
    if (c.size() < cfg.span()) return out;
    const std::size_t n = c.size() - cfg.span() + 1;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        LabeledWindow w;
        w.user_id = history.user_id;
        w.x.reserve(cfg.window);
        for (std::size_t j = 0; j < cfg.window; ++j) w.x.push_back(encode_count(c[i + j], cfg.normalize));
        w.y = label(std::span(c).subspan(i + cfg.window, cfg.horizon), cfg.horizon,
                    cfg.adherence_threshold);
        out.push_back(std::move(w));
    }
    return out;
}

inline std::vector<LabeledWindow> build_windows(std::span<const UserHistory> users,
                                                const WindowConfig& cfg) {
    std::vector<LabeledWindow> out;
    for (const auto& u : users) {
        auto w = build_windows(u, cfg);
        out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
    return out;
}

// Keeps clients holding at least `min_per_class` windows of each label.
inline std::vector<ClientDataset> exclude_low_info(std::vector<ClientDataset> clients,
                                                   std::size_t min_per_class) {
    std::erase_if(clients, [min_per_class](const ClientDataset& c) {
        return c.count_label(0) < min_per_class || c.count_label(1) < min_per_class;
    });
    return clients;
}

struct HoldoutSplit {
    std::vector<UserHistory> train;
    std::vector<UserHistory> test;
};

inline void sort_by_user_id(std::vector<UserHistory>& users) {
    std::sort(users.begin(), users.end(),
              [](const UserHistory& a, const UserHistory& b) { return a.user_id < b.user_id; });
}

// Draws `n_holdout` test users uniformly without replacement. Users are sorted
// by id first, so the split depends on the id set and the seed only. Both
// halves come back sorted by id.
inline HoldoutSplit split_holdout_users(std::vector<UserHistory> users, std::size_t n_holdout,
                                        std::uint64_t seed) {
    if (n_holdout >= users.size()) {
        throw ConfigError("holdout of " + std::to_string(n_holdout) + " users needs more than " +
                          std::to_string(users.size()) + " users");
    }
    sort_by_user_id(users);
    for (std::size_t i = 1; i < users.size(); ++i) {
        if (users[i].user_id == users[i - 1].user_id) {
            throw InputError("duplicate user id '" + users[i].user_id + "'");
        }
    }
    std::vector<std::size_t> order(users.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = make_rng(seed, "holdout");
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<bool> is_test(users.size(), false);
    for (std::size_t i = 0; i < n_holdout; ++i) is_test[order[i]] = true;

    HoldoutSplit split;
    split.test.reserve(n_holdout);
    split.train.reserve(users.size() - n_holdout);
    for (std::size_t i = 0; i < users.size(); ++i) {
        (is_test[i] ? split.test : split.train).push_back(std::move(users[i]));
    }
    return split;
}

// ---------------------------------------------------------------------------
// CSV I/O

namespace detail {

inline std::string trim(std::string_view s) {
    const auto* ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(ws);
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(trim(field));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::uint64_t parse_unsigned(const std::string& s, const std::string& what, std::size_t line) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
        throw InputError("line " + std::to_string(line) + ": " + what + " '" + s +
                         "' is not a non-negative integer");
    }
    try {
        return std::stoull(s);
    } catch (const std::exception&) {
        throw InputError("line " + std::to_string(line) + ": " + what + " out of range");
    }
}

} // namespace detail

// Columns: user_id, session_index, acquisition_count. Rows of a user may come
// in any order but session indices must be dense from 0. Users are returned in
// order of first appearance.
inline std::vector<UserHistory> read_histories_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw InputError("history CSV is empty");
    if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    const auto header = detail::split_csv_line(line);
    if (header != std::vector<std::string>{"user_id", "session_index", "acquisition_count"}) {
        throw InputError("history CSV header must be 'user_id,session_index,acquisition_count'");
    }

    std::vector<UserId> order;
    std::unordered_map<UserId, std::map<std::uint64_t, std::uint32_t>> sessions;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 3) {
            throw InputError("line " + std::to_string(lineno) + ": expected 3 fields");
        }
        if (f[0].empty()) throw InputError("line " + std::to_string(lineno) + ": empty user_id");
        const auto idx = detail::parse_unsigned(f[1], "session_index", lineno);
        const auto cnt = detail::parse_unsigned(f[2], "acquisition_count", lineno);
        if (cnt > UINT32_MAX) throw InputError("line " + std::to_string(lineno) + ": count too large");
        auto [it, fresh] = sessions.try_emplace(f[0]);
        if (fresh) order.push_back(f[0]);
        if (!it->second.emplace(idx, static_cast<std::uint32_t>(cnt)).second) {
            throw InputError("line " + std::to_string(lineno) + ": duplicate session " + f[1] +
                             " for user '" + f[0] + "'");
        }
    }

    std::vector<UserHistory> users;
    users.reserve(order.size());
    for (const auto& id : order) {
        const auto& s = sessions.at(id);
        UserHistory h{id, {}};
        h.counts.reserve(s.size());
        std::uint64_t expect = 0;
        for (const auto& [idx, cnt] : s) {
            if (idx != expect) {
                throw InputError("user '" + id + "': session indices are not dense from 0 (missing " +
                                 std::to_string(expect) + ")");
            }
            h.counts.push_back(cnt);
            ++expect;
        }
        users.push_back(std::move(h));
    }
    return users;
}

inline std::vector<UserHistory> load_histories_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    return read_histories_csv(in);
}

inline void write_histories_csv(std::ostream& out, std::span<const UserHistory> users) {
    out << "user_id,session_index,acquisition_count\n";
    for (const auto& u : users) {
        for (std::size_t i = 0; i < u.counts.size(); ++i) {
            out << u.user_id << ',' << i << ',' << u.counts[i] << '\n';
        }
    }
}

// Debug dump: user_id, x_0..x_{T-1}, y.
inline void write_windows_csv(std::ostream& out, std::span<const LabeledWindow> windows) {
    const std::size_t dim = windows.empty() ? 0 : windows.front().x.size();
    out << "user_id";
    for (std::size_t j = 0; j < dim; ++j) out << ",x_" << j;
    out << ",y\n";
    for (const auto& w : windows) {
        out << w.user_id;
        for (double v : w.x) out << ',' << v;
        out << ',' << w.y << '\n';
    }
}

} // namespace fedsim
