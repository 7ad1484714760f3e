#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedsim/error.hpp"
#include <nlohmann/json.hpp>

namespace fedsim {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }

    bool operator==(const ConfusionCounts&) const = default;
};

struct MetricsReport {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double gmean = 0.0;
    ConfusionCounts counts;
    // Names of metrics whose denominator was zero; those are reported as 0.
    std::set<std::string> undefined;

    bool operator==(const MetricsReport&) const = default;
};

inline constexpr std::array<const char*, 5> kMetricNames{"accuracy", "precision", "recall", "f1", "gmean"};

inline double metric_value(const MetricsReport& r, std::size_t i) {
    switch (i) {
    case 0: return r.accuracy;
    case 1: return r.precision;
    case 2: return r.recall;
    case 3: return r.f1;
    default: return r.gmean;
    }
}

// A window is predicted positive when its probability is >= threshold.
inline ConfusionCounts confusion(std::span<const double> probabilities, std::span<const int> labels,
                                 double threshold = 0.5) {
    if (probabilities.size() != labels.size()) {
        throw InputError("confusion: " + std::to_string(probabilities.size()) + " probabilities vs " +
                         std::to_string(labels.size()) + " labels");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool predicted = probabilities[i] >= threshold;
        const bool actual = labels[i] == 1;
        if (predicted && actual) ++c.tp;
        else if (predicted) ++c.fp;
        else if (actual) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline MetricsReport compute_metrics(const ConfusionCounts& c) {
    if (c.total() == 0) throw InputError("compute_metrics: no evaluated samples");
    MetricsReport r;
    r.counts = c;
    const auto ratio = [&r](std::uint64_t num, std::uint64_t den, const char* name, bool& ok) {
        ok = den != 0;
        if (!ok) {
            r.undefined.insert(name);
            return 0.0;
        }
        return static_cast<double>(num) / static_cast<double>(den);
    };
    bool ok_acc = false, ok_p = false, ok_r = false;
    r.accuracy = ratio(c.tp + c.tn, c.total(), "accuracy", ok_acc);
    r.precision = ratio(c.tp, c.tp + c.fp, "precision", ok_p);
    r.recall = ratio(c.tp, c.tp + c.fn, "recall", ok_r);
    const bool ok_spec = c.tn + c.fp != 0;
    const double specificity = ok_spec ? static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp) : 0.0;

    if (ok_p && ok_r && r.precision + r.recall > 0.0) {
        r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
    } else {
        r.undefined.insert("f1");
    }
    if (ok_r && ok_spec) {
        r.gmean = std::sqrt(r.recall * specificity);
    } else {
        r.undefined.insert("gmean");
    }
    return r;
}

inline MetricsReport evaluate(std::span<const double> probabilities, std::span<const int> labels,
                              double threshold = 0.5) {
    return compute_metrics(confusion(probabilities, labels, threshold));
}

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;
};

struct SeedAggregate {
    std::size_t runs = 0;
    std::array<MetricSummary, 5> metrics{};   // indexed like kMetricNames
    std::map<std::string, std::size_t> undefined_counts;

    const MetricSummary& accuracy() const { return metrics[0]; }
    const MetricSummary& precision() const { return metrics[1]; }
    const MetricSummary& recall() const { return metrics[2]; }
    const MetricSummary& f1() const { return metrics[3]; }
    const MetricSummary& gmean() const { return metrics[4]; }
};

// Mean and population standard deviation of each metric across runs.
inline SeedAggregate aggregate_seeds(std::span<const MetricsReport> reports) {
    if (reports.empty()) throw InputError("aggregate_seeds: no reports");
    SeedAggregate a;
    a.runs = reports.size();
    const double n = static_cast<double>(reports.size());
    for (std::size_t m = 0; m < kMetricNames.size(); ++m) {
        // Offset from the first run so identical runs give their value and a
        // zero spread exactly.
        const double first = metric_value(reports.front(), m);
        double offset = 0.0;
        for (const auto& r : reports) offset += metric_value(r, m) - first;
        const double mean = first + offset / n;
        double sq = 0.0;
        for (const auto& r : reports) {
            const double d = metric_value(r, m) - mean;
            sq += d * d;
        }
        a.metrics[m] = {mean, std::sqrt(sq / n)};
    }
    for (const auto& r : reports) {
        for (const auto& name : r.undefined) ++a.undefined_counts[name];
    }
    return a;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    return {
        {"accuracy", r.accuracy},
        {"precision", r.precision},
        {"recall", r.recall},
        {"f1", r.f1},
        {"gmean", r.gmean},
        {"tp", r.counts.tp},
        {"fp", r.counts.fp},
        {"tn", r.counts.tn},
        {"fn", r.counts.fn},
        {"undefined", r.undefined},
    };
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.gmean = j.at("gmean").get<double>();
    r.counts = {j.at("tp").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(), j.at("tn").get<std::uint64_t>(),
                j.at("fn").get<std::uint64_t>()};
    if (j.contains("undefined")) r.undefined = j.at("undefined").get<std::set<std::string>>();
    return r;
}

} // namespace fedsim
