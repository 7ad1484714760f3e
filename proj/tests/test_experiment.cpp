#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedsim/experiment.hpp"

using namespace fedsim;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
    auto c = preset("desk");
    c.synth.n_users = 20;
    c.holdout_users = 5;
    c.n_seeds = 2;
    c.fed.rounds = 2;
    c.fed.local_epochs = 1;
    c.fed.centralized_epochs = 2;
    c.fed.silo_sizes = {5, 5, 5};
    return c;
}

fs::path scratch_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("fedsim_test_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

} // namespace

TEST(Config, PresetsAndDefaults) {
    const auto full = preset("paper");
    EXPECT_EQ(full.synth.n_users, 454u);
    EXPECT_EQ(full.holdout_users, 50u);
    EXPECT_EQ(full.n_seeds, 10u);
    EXPECT_EQ(full.fed.rounds, 20u);
    EXPECT_EQ(full.fed.local_epochs, 5u);
    EXPECT_EQ(full.fed.train.batch_size, 32u);
    EXPECT_DOUBLE_EQ(full.fed.train.learning_rate, 1e-3);
    EXPECT_DOUBLE_EQ(full.cross_device_fraction, 0.4);
    EXPECT_DOUBLE_EQ(full.cross_silo_fraction, 1.0);
    EXPECT_NO_THROW(full.validate());

    const auto desk = preset("desk");
    EXPECT_EQ(desk.synth.n_users, 60u);
    EXPECT_EQ(desk.holdout_users, 10u);
    EXPECT_EQ(desk.n_seeds, 3u);
    EXPECT_EQ(desk.fed.rounds, 10u);
    EXPECT_NO_THROW(desk.validate());
    EXPECT_THROW(preset("huge"), ConfigError);
}

TEST(Config, OverlayAndStrictKeys) {
    const auto j = nlohmann::json::parse(R"({
        "seed": 7, "n_seeds": 2, "settings": ["cross_device"], "scenarios": ["raw", "undersample"],
        "fed": {"rounds": 3}, "train": {"learning_rate": 0.01}, "window": {"normalize": true}
    })");
    const auto c = apply_config_json(preset("desk"), j);
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.settings, std::vector<Setting>{Setting::cross_device});
    EXPECT_EQ(c.scenarios, (std::vector<Scenario>{Scenario::raw, Scenario::undersample}));
    EXPECT_EQ(c.fed.rounds, 3u);
    EXPECT_DOUBLE_EQ(c.fed.train.learning_rate, 0.01);
    EXPECT_TRUE(c.window.normalize);
    EXPECT_EQ(c.synth.n_users, 60u);

    EXPECT_THROW(apply_config_json(preset("desk"), nlohmann::json::parse(R"({"sead": 1})")), ConfigError);
    EXPECT_THROW(apply_config_json(preset("desk"), nlohmann::json::parse(R"({"fed": {"round": 1}})")), ConfigError);
    EXPECT_THROW(apply_config_json(preset("desk"), nlohmann::json::parse(R"({"seed": "x"})")), ConfigError);
    EXPECT_THROW(apply_config_json(preset("desk"), nlohmann::json::parse(R"({"scenarios": ["bogus"]})")), ConfigError);
}

TEST(Config, RejectsInconsistentScenarioAndMethod) {
    auto c = apply_config_json(preset("desk"), nlohmann::json::parse(
                                                   R"({"scenarios": ["oversample"], "resample": {"method": "undersample"}})"));
    EXPECT_THROW(c.validate(), ConfigError);
    c = apply_config_json(preset("desk"), nlohmann::json::parse(
                                              R"({"scenarios": ["oversample"], "resample": {"method": "kmeans_smote"}})"));
    EXPECT_NO_THROW(c.validate());
    c.fed.silo_sizes = {1, 2, 3};
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, LoadFromFile) {
    const auto dir = scratch_dir("cfg");
    write_text_file(dir / "c.json", R"({"n_seeds": 4})");
    EXPECT_EQ(load_config((dir / "c.json").string(), preset("desk")).n_seeds, 4u);
    write_text_file(dir / "bad.json", "{ not json");
    EXPECT_THROW(load_config((dir / "bad.json").string(), preset("desk")), ConfigError);
    EXPECT_THROW(load_config((dir / "missing.json").string(), preset("desk")), ConfigError);
    fs::remove_all(dir);
}

TEST(RunCell, CentralizedRawOnFiftyUsers) {
    auto c = tiny_config();
    c.synth.n_users = 50;
    const auto users = generate_population(c.synth);
    const auto cell = run_cell(c, users, Setting::centralized, Scenario::raw, 0);
    ASSERT_TRUE(cell.ok) << cell.error;
    for (std::size_t i = 0; i < kMetricNames.size(); ++i) {
        EXPECT_GE(metric_value(cell.metrics, i), 0.0);
        EXPECT_LE(metric_value(cell.metrics, i), 1.0);
    }
    EXPECT_EQ(cell.participating_clients, 1u);
    EXPECT_EQ(cell.log_lines.size(), c.fed.centralized_epochs);
}

TEST(RunCell, ExclusionNeverAddsClients) {
    const auto c = tiny_config();
    const auto users = generate_population(c.synth);
    const auto raw = run_cell(c, users, Setting::cross_device, Scenario::raw, 0);
    const auto d5 = run_cell(c, users, Setting::cross_device, Scenario::drop_users_5, 0);
    const auto d10 = run_cell(c, users, Setting::cross_device, Scenario::drop_users_10, 0);
    ASSERT_TRUE(raw.ok) << raw.error;
    if (d5.ok) {
        EXPECT_LE(d5.participating_clients, raw.participating_clients);
    }
    if (d10.ok && d5.ok) {
        EXPECT_LE(d10.participating_clients, d5.participating_clients);
    }
    EXPECT_EQ(raw.log_lines.size(), c.fed.rounds);
}

TEST(RunCell, EmptyExclusionIsAFailedCell) {
    auto c = tiny_config();
    const auto users = generate_population(c.synth);
    c.window.adherence_threshold = 1000;   // every window becomes label 0, so nobody keeps 5 of each class
    const auto cell = run_cell(c, users, Setting::cross_device, Scenario::drop_users_5, 0);
    EXPECT_FALSE(cell.ok);
    EXPECT_FALSE(cell.error.empty());
}

TEST(Grid, DeterministicFailureTolerantAndReportable) {
    auto c = tiny_config();
    c.settings = {Setting::centralized, Setting::cross_device};
    c.scenarios = {Scenario::raw, Scenario::undersample, Scenario::drop_users_10};
    const auto users = generate_population(c.synth);

    const auto a = run_grid(c, users);
    c.parallel = 2;
    const auto b = run_grid(c, users);
    ASSERT_EQ(a.cells.size(), 2u * 3u * 2u);

    const auto da = scratch_dir("grid_a"), db = scratch_dir("grid_b");
    write_grid_outputs(da, c, a);
    write_grid_outputs(db, c, b);
    EXPECT_EQ(slurp(da / "grid.csv"), slurp(db / "grid.csv"));
    EXPECT_EQ(slurp(da / "per_seed.csv"), slurp(db / "per_seed.csv"));
    EXPECT_EQ(slurp(da / "grid.csv").substr(0, std::string(kGridHeader).size()), kGridHeader);

    for (const auto& cell : a.cells) {
        if (!cell.ok) continue;
        for (std::size_t i = 0; i < kMetricNames.size(); ++i) {
            EXPECT_GE(metric_value(cell.metrics, i), 0.0);
            EXPECT_LE(metric_value(cell.metrics, i), 1.0);
        }
    }

    // report recomputes the aggregates from per_seed.csv
    std::ostringstream table;
    const auto rep = report_grid(da, table);
    for (const auto& row : a.rows) {
        const auto* back = find_row(rep.rows, row.setting, row.scenario);
        ASSERT_NE(back, nullptr);
        EXPECT_EQ(back->succeeded, row.succeeded);
        ASSERT_EQ(back->aggregate.has_value(), row.aggregate.has_value());
        if (!row.aggregate) continue;
        std::vector<MetricsReport> runs;
        for (const auto& cell : a.cells) {
            if (cell.ok && cell.setting == row.setting && cell.scenario == row.scenario) runs.push_back(cell.metrics);
        }
        const auto oracle = aggregate_seeds(runs);
        for (std::size_t m = 0; m < kMetricNames.size(); ++m) {
            EXPECT_NEAR(back->aggregate->metrics[m].mean, oracle.metrics[m].mean, 1e-12);
            EXPECT_NEAR(back->aggregate->metrics[m].std, oracle.metrics[m].std, 1e-12);
        }
    }
    std::ifstream gm(da / "plots" / "gmean_by_setting.csv");
    std::string line;
    std::size_t rows = 0;
    std::getline(gm, line);
    while (std::getline(gm, line)) rows += !line.empty();
    EXPECT_EQ(rows, c.settings.size() * c.scenarios.size());
    EXPECT_TRUE(fs::exists(da / "plots" / "metrics_cross_device.csv"));
    EXPECT_EQ(fs::directory_iterator(da / "runs") == fs::directory_iterator(), false);
    fs::remove_all(da);
    fs::remove_all(db);
}

TEST(Grid, FailedCellDoesNotAbortGrid) {
    auto c = tiny_config();
    c.settings = {Setting::cross_device};
    c.scenarios = {Scenario::raw, Scenario::drop_users_10};
    c.n_seeds = 1;
    c.window.adherence_threshold = 1000;
    const auto users = generate_population(c.synth);
    const auto r = run_grid(c, users);
    ASSERT_EQ(r.cells.size(), 2u);
    EXPECT_FALSE(r.cells[1].ok);
    const auto* failed = find_row(r.rows, Setting::cross_device, Scenario::drop_users_10);
    ASSERT_NE(failed, nullptr);
    EXPECT_EQ(failed->failed, 1u);
    EXPECT_FALSE(failed->aggregate.has_value());

    const auto d = scratch_dir("grid_fail");
    write_grid_outputs(d, c, r);
    const auto summary = nlohmann::json::parse(slurp(d / "summary.json"));
    EXPECT_EQ(summary.at("failures").size(), 1u);
    std::ostringstream table;
    EXPECT_NE(report_grid(d, table).rows.size(), 0u);
    EXPECT_NE(table.str().find("failed"), std::string::npos);
    fs::remove_all(d);
}

TEST(Report, MissingOrCorruptFiles) {
    const auto d = scratch_dir("report_bad");
    std::ostringstream out;
    EXPECT_THROW(report_grid(d, out), InputError);
    write_text_file(d / "per_seed.csv", "nonsense\n");
    EXPECT_THROW(report_grid(d, out), InputError);
    write_text_file(d / "per_seed.csv", std::string(kPerSeedHeader) + "\ncentralized,raw,0,1,ok,1\n");
    EXPECT_THROW(report_grid(d, out), InputError);
    fs::remove_all(d);
}

TEST(Report, OneCellOneRow) {
    const auto d = scratch_dir("report_one");
    write_text_file(d / "per_seed.csv", std::string(kPerSeedHeader) +
                                            "\ncentralized,raw,0,1,ok,1,100,0,3,1,5,1,0.8,0.75,0.75,0.75,0.79,\n");
    std::ostringstream out;
    const auto rep = report_grid(d, out);
    EXPECT_EQ(rep.rows.size(), 1u);
    std::size_t lines = 0;
    for (char ch : out.str()) lines += ch == '\n';
    EXPECT_EQ(lines, 3u);   // two header lines plus one scenario row
    fs::remove_all(d);
}
