#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include "fedsim/dataset.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

UserHistory history(std::string id, std::vector<std::uint32_t> counts) { return {std::move(id), std::move(counts)}; }

ClientDataset client_with(ClientId id, std::size_t zeros, std::size_t ones) {
    ClientDataset c;
    c.client_id = id;
    c.monitored_users = {"u" + std::to_string(id)};
    for (std::size_t i = 0; i < zeros; ++i) c.windows.push_back({std::vector<double>(12, 0.0), 0, c.monitored_users[0]});
    for (std::size_t i = 0; i < ones; ++i) c.windows.push_back({std::vector<double>(12, 1.0), 1, c.monitored_users[0]});
    return c;
}

} // namespace

TEST(BuildWindows, FifteenZerosGiveOneNegativeWindow) {
    const auto w = build_windows(history("a", std::vector<std::uint32_t>(15, 0)), {});
    ASSERT_EQ(w.size(), 1u);
    EXPECT_EQ(w[0].x, std::vector<double>(12, 0.0));
    EXPECT_EQ(w[0].y, 0);
    EXPECT_EQ(w[0].user_id, "a");
}

TEST(BuildWindows, TwoFutureAcquisitionsMeanAdherent) {
    std::vector<std::uint32_t> c(12, 0);
    c.insert(c.end(), {1, 1, 0});
    const auto w = build_windows(history("a", c), {});
    ASSERT_EQ(w.size(), 1u);
    EXPECT_EQ(w[0].y, 1);
}

TEST(BuildWindows, SixteenOnes) {
    const auto w = build_windows(history("a", std::vector<std::uint32_t>(16, 1)), {});
    ASSERT_EQ(w.size(), 2u);
    EXPECT_EQ(w[0].y, 1);
    EXPECT_EQ(w[1].y, 1);
}

TEST(BuildWindows, ShortHistoryYieldsNothing) {
    EXPECT_TRUE(build_windows(history("a", std::vector<std::uint32_t>(14, 3)), {}).empty());
    EXPECT_TRUE(build_windows(history("a", {}), {}).empty());
}

TEST(BuildWindows, SlidesChronologically) {
    std::vector<std::uint32_t> c(20);
    std::iota(c.begin(), c.end(), 0u);
    const auto w = build_windows(history("a", c), {});
    ASSERT_EQ(w.size(), 6u);
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(w[i].x.front(), static_cast<double>(i));
}

TEST(BuildWindows, NormalizeFlagAppliesLog1p) {
    WindowConfig cfg;
    cfg.normalize = true;
    const auto w = build_windows(history("a", std::vector<std::uint32_t>(15, 3)), cfg);
    ASSERT_EQ(w.size(), 1u);
    EXPECT_DOUBLE_EQ(w[0].x[0], std::log1p(3.0));
}

TEST(BuildWindows, PropertyMatchesBruteForceRelabeler) {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 300; ++trial) {
        WindowConfig cfg;
        cfg.window = 1 + rng() % 14;
        cfg.horizon = 1 + rng() % 5;
        cfg.adherence_threshold = 1 + static_cast<std::uint32_t>(rng() % 4);
        std::vector<std::uint32_t> c(rng() % 60);
        for (auto& v : c) v = static_cast<std::uint32_t>(rng() % 3);
        const auto w = build_windows(history("u", c), cfg);
        const std::size_t expected = c.size() >= cfg.window + cfg.horizon ? c.size() - cfg.window - cfg.horizon + 1 : 0;
        ASSERT_EQ(w.size(), expected);
        for (std::size_t i = 0; i < w.size(); ++i) {
            ASSERT_EQ(w[i].x.size(), cfg.window);
            ASSERT_EQ(w[i].y, oracle::relabel(c, i, cfg.window, cfg.horizon, cfg.adherence_threshold));
        }
    }
}

TEST(Label, Examples) {
    const std::vector<std::uint32_t> a{0, 0, 1}, b{2, 0, 0}, c{1, 1, 1};
    EXPECT_EQ(label(a, 3, 2), 0);
    EXPECT_EQ(label(b, 3, 2), 1);
    EXPECT_EQ(label(c, 3, 2), 1);
}

TEST(Label, LengthMismatchThrows) {
    const std::vector<std::uint32_t> a{1, 1};
    EXPECT_THROW(label(a, 3, 2), InputError);
}

TEST(WindowConfig, RejectsZeroes) {
    WindowConfig c;
    c.window = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.horizon = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.adherence_threshold = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ExcludeLowInfo, Boundaries) {
    EXPECT_TRUE(exclude_low_info({client_with(0, 4, 20)}, 5).empty());
    EXPECT_EQ(exclude_low_info({client_with(0, 5, 5)}, 5).size(), 1u);
    EXPECT_TRUE(exclude_low_info({client_with(0, 12, 8)}, 10).empty());
    EXPECT_EQ(exclude_low_info({client_with(0, 0, 0)}, 0).size(), 1u);
}

TEST(ExcludeLowInfo, PreservesOrderAndIsIdempotent) {
    std::mt19937_64 rng(3);
    std::vector<ClientDataset> clients;
    for (ClientId i = 0; i < 40; ++i) clients.push_back(client_with(i, rng() % 15, rng() % 15));
    for (std::size_t m : {0u, 5u, 10u}) {
        const auto once = exclude_low_info(clients, m);
        const auto twice = exclude_low_info(once, m);
        ASSERT_EQ(once.size(), twice.size());
        for (std::size_t i = 0; i < once.size(); ++i) {
            EXPECT_EQ(once[i].client_id, twice[i].client_id);
            if (i > 0) {
                EXPECT_LT(once[i - 1].client_id, once[i].client_id);
            }
            EXPECT_GE(once[i].count_label(0), m);
            EXPECT_GE(once[i].count_label(1), m);
        }
    }
}

TEST(SplitHoldout, Sizes) {
    std::vector<UserHistory> users;
    for (int i = 0; i < 454; ++i) users.push_back(history("user" + std::to_string(i), {1}));
    const auto s = split_holdout_users(users, 50, 9);
    EXPECT_EQ(s.train.size(), 404u);
    EXPECT_EQ(s.test.size(), 50u);
    const auto all = split_holdout_users(users, 0, 9);
    EXPECT_EQ(all.train.size(), 454u);
    EXPECT_TRUE(all.test.empty());
}

TEST(SplitHoldout, PartitionDeterministicAndOrderInvariant) {
    std::vector<UserHistory> users;
    for (int i = 0; i < 100; ++i) users.push_back(history("id" + std::to_string(i), {static_cast<std::uint32_t>(i)}));
    const auto a = split_holdout_users(users, 17, 5);
    auto shuffled = users;
    std::mt19937_64 rng(1);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto b = split_holdout_users(shuffled, 17, 5);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);

    std::set<UserId> seen;
    for (const auto& u : a.train) seen.insert(u.user_id);
    for (const auto& u : a.test) EXPECT_TRUE(seen.insert(u.user_id).second);
    EXPECT_EQ(seen.size(), users.size());

    const auto c = split_holdout_users(users, 17, 6);
    EXPECT_NE(a.test, c.test);
}

TEST(SplitHoldout, RejectsOversizedHoldout) {
    std::vector<UserHistory> users{history("a", {}), history("b", {})};
    EXPECT_THROW(split_holdout_users(users, 2, 0), ConfigError);
}

TEST(HistoryCsv, ReadsUnorderedRowsAndRoundTrips) {
    std::istringstream in("user_id,session_index,acquisition_count\n"
                          "b,1,4\n"
                          "a,0,1\n"
                          "b,0,3\n"
                          "a,1, 2\n"
                          "a,2,0\n");
    const auto users = read_histories_csv(in);
    ASSERT_EQ(users.size(), 2u);
    EXPECT_EQ(users[0], history("b", {3, 4}));
    EXPECT_EQ(users[1], history("a", {1, 2, 0}));

    std::ostringstream out;
    write_histories_csv(out, users);
    std::istringstream back(out.str());
    EXPECT_EQ(read_histories_csv(back), users);
}

TEST(HistoryCsv, RejectsMalformedInput) {
    const auto parse = [](const std::string& s) {
        std::istringstream in(s);
        return read_histories_csv(in);
    };
    EXPECT_THROW(parse(""), InputError);
    EXPECT_THROW(parse("user,session,count\n"), InputError);
    EXPECT_THROW(parse("user_id,session_index,acquisition_count\na,1,2\n"), InputError);        // not dense
    EXPECT_THROW(parse("user_id,session_index,acquisition_count\na,0,-2\n"), InputError);       // negative
    EXPECT_THROW(parse("user_id,session_index,acquisition_count\na,0,1\na,0,1\n"), InputError); // duplicate
    EXPECT_THROW(parse("user_id,session_index,acquisition_count\na,0\n"), InputError);
}

TEST(WindowCsv, HeaderAndRow) {
    std::ostringstream out;
    const std::vector<LabeledWindow> w{{{1, 2}, 1, "u7"}};
    write_windows_csv(out, w);
    EXPECT_EQ(out.str(), "user_id,x_0,x_1,y\nu7,1,2,1\n");
}
