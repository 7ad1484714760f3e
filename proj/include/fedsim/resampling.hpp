#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

enum class ResampleMethod { none, undersample, kmeans_smote, smote_enn };

inline const char* to_string(ResampleMethod m) {
    switch (m) {
    case ResampleMethod::none: return "none";
    case ResampleMethod::undersample: return "undersample";
    case ResampleMethod::kmeans_smote: return "kmeans_smote";
    case ResampleMethod::smote_enn: return "smote_enn";
    }
    return "?";
}

inline ResampleMethod parse_resample_method(const std::string& s) {
    if (s == "none") return ResampleMethod::none;
    if (s == "undersample") return ResampleMethod::undersample;
    if (s == "kmeans_smote") return ResampleMethod::kmeans_smote;
    if (s == "smote_enn") return ResampleMethod::smote_enn;
    throw ConfigError("unknown resample method '" + s + "'");
}

struct ResampleSpec {
    ResampleMethod method = ResampleMethod::none;
    std::size_t k_neighbors = 5;
    std::size_t k_clusters = 8;
    // A cluster receives synthetic points only if its minority share exceeds this.
    double cluster_imbalance_threshold = 0.5;
    std::size_t enn_k = 3;
    std::size_t kmeans_max_iter = 100;
    std::uint64_t seed = 0;

    void validate() const {
        if (k_neighbors < 1) throw ConfigError("resample: k_neighbors must be >= 1");
        if (k_clusters < 1) throw ConfigError("resample: k_clusters must be >= 1");
        if (enn_k < 1) throw ConfigError("resample: enn_k must be >= 1");
        if (kmeans_max_iter < 1) throw ConfigError("resample: kmeans_max_iter must be >= 1");
        if (!(cluster_imbalance_threshold >= 0.0 && cluster_imbalance_threshold < 1.0)) {
            throw ConfigError("resample: cluster_imbalance_threshold must lie in [0, 1)");
        }
    }
};

// What a resampler did, for experiment reports.
struct ResampleStats {
    std::size_t synthesized = 0;
    std::size_t removed = 0;
    bool fell_back_to_plain_smote = false;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Indices of the k points closest to `query` (Euclidean), nearest first; ties
// go to the lower index. `exclude` removes one index from consideration, which
// is how callers drop the query point itself.
inline std::vector<std::size_t> knn(std::span<const double> query,
                                    std::span<const std::vector<double>> points, std::size_t k,
                                    std::optional<std::size_t> exclude = std::nullopt) {
    const std::size_t available = points.size() - (exclude && *exclude < points.size() ? 1 : 0);
    if (k > available) {
        throw InputError("knn: k=" + std::to_string(k) + " exceeds " + std::to_string(available) +
                         " candidate points");
    }
    std::vector<std::pair<double, std::size_t>> d;
    d.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (exclude && *exclude == i) continue;
        d.emplace_back(squared_distance(query, points[i]), i);
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    std::vector<std::size_t> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
    return out;
}

namespace detail {

struct ClassSplit {
    int minority = 1;
    int majority = 0;
    std::size_t n_minority = 0;
    std::size_t n_majority = 0;
};

inline ClassSplit split_classes(std::span<const LabeledWindow> windows) {
    const auto ones = count_label(windows, 1);
    const auto zeros = windows.size() - ones;
    ClassSplit s;
    if (ones <= zeros) {
        s = {1, 0, ones, zeros};
    } else {
        s = {0, 1, zeros, ones};
    }
    return s;
}

inline void require_minority(const ClassSplit& s, std::size_t at_least, const char* who) {
    if (s.n_minority < at_least) {
        throw ImbalanceError(std::string(who) + ": minority class has " + std::to_string(s.n_minority) +
                             " samples, need at least " + std::to_string(at_least));
    }
}

// Appends `count` SMOTE points interpolated inside `pool` (indices into
// `windows`, all of the minority label). Each point picks a base uniformly
// from the pool and one of its k nearest pool neighbours.
inline void smote_into(std::span<const LabeledWindow> windows, std::span<const std::size_t> pool,
                       std::size_t count, std::size_t k_neighbors, Rng& rng,
                       std::vector<LabeledWindow>& out) {
    if (count == 0) return;
    std::vector<std::vector<double>> pts;
    pts.reserve(pool.size());
    for (auto i : pool) pts.push_back(windows[i].x);
    const std::size_t k = std::min(k_neighbors, pts.size() - 1);

    std::vector<std::vector<std::size_t>> neighbours(pts.size());
    std::uniform_int_distribution<std::size_t> pick_base(0, pts.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_nn(0, k - 1);
    std::uniform_real_distribution<double> gap(0.0, 1.0);
    for (std::size_t n = 0; n < count; ++n) {
        const auto a = pick_base(rng);
        if (neighbours[a].empty()) neighbours[a] = knn(pts[a], pts, k, a);
        const auto b = neighbours[a][pick_nn(rng)];
        const double lambda = gap(rng);
        LabeledWindow z;
        z.y = windows[pool[a]].y;
        z.user_id = windows[pool[a]].user_id;
        z.x.resize(pts[a].size());
        for (std::size_t j = 0; j < z.x.size(); ++j) z.x[j] = pts[a][j] + lambda * (pts[b][j] - pts[a][j]);
        out.push_back(std::move(z));
    }
}

inline std::vector<std::size_t> indices_of(std::span<const LabeledWindow> windows, int y) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        if (windows[i].y == y) idx.push_back(i);
    }
    return idx;
}

// Splits `total` over `weights` by largest remainder; ties go to the lower index.
inline std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights) {
    double sum = 0.0;
    for (double w : weights) sum += w;
    std::vector<std::size_t> out(weights.size(), 0);
    if (weights.empty()) return out;
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = sum > 0.0 ? static_cast<double>(total) * weights[i] / sum
                                        : static_cast<double>(total) / static_cast<double>(weights.size());
        out[i] = std::min(total - assigned, static_cast<std::size_t>(std::floor(exact)));
        assigned += out[i];
        rema.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++out[rema[k % rema.size()].second];
    return out;
}

} // namespace detail

inline std::vector<LabeledWindow> random_undersample(std::span<const LabeledWindow> windows,
                                                     std::uint64_t seed) {
    const auto s = detail::split_classes(windows);
    if (s.n_minority == 0) throw ImbalanceError("undersample: input holds a single class");
    const auto majority = detail::indices_of(windows, s.majority);
    std::vector<std::size_t> kept;
    kept.reserve(s.n_minority);
    auto rng = make_rng(seed, "undersample");
    std::sample(majority.begin(), majority.end(), std::back_inserter(kept), s.n_minority, rng);

    std::vector<bool> keep(windows.size(), false);
    for (std::size_t i = 0; i < windows.size(); ++i) keep[i] = windows[i].y == s.minority;
    for (auto i : kept) keep[i] = true;
    std::vector<LabeledWindow> out;
    out.reserve(2 * s.n_minority);
    for (std::size_t i = 0; i < windows.size(); ++i) {
        if (keep[i]) out.push_back(windows[i]);
    }
    return out;
}

// Plain SMOTE up to class parity. Synthetic points are appended after the input.
inline std::vector<LabeledWindow> smote(std::span<const LabeledWindow> windows, const ResampleSpec& spec,
                                        ResampleStats* stats = nullptr) {
    spec.validate();
    const auto s = detail::split_classes(windows);
    detail::require_minority(s, 2, "smote");
    std::vector<LabeledWindow> out(windows.begin(), windows.end());
    const auto pool = detail::indices_of(windows, s.minority);
    auto rng = make_rng(spec.seed, "smote");
    detail::smote_into(windows, pool, s.n_majority - s.n_minority, spec.k_neighbors, rng, out);
    if (stats) stats->synthesized += s.n_majority - s.n_minority;
    return out;
}

struct KMeansResult {
    std::vector<std::vector<double>> centroids;
    std::vector<std::size_t> assignment;   // per point, index into centroids
    std::size_t iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding. Stops once assignments no longer
// change or after max_iter sweeps; clusters left empty are dropped and the
// surviving ones renumbered in order.
inline KMeansResult kmeans(std::span<const std::vector<double>> points, std::size_t k,
                           std::size_t max_iter, Rng& rng) {
    if (points.empty()) throw InputError("kmeans: no points");
    k = std::min(k, points.size());
    const std::size_t n = points.size();

    KMeansResult r;
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    r.centroids.push_back(points[first(rng)]);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    while (r.centroids.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], squared_distance(points[i], r.centroids.back()));
            total += d2[i];
        }
        std::size_t chosen = n - 1;
        if (total > 0.0) {
            const double target = unit(rng) * total;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > target && d2[i] > 0.0) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = first(rng);
        }
        r.centroids.push_back(points[chosen]);
    }

    const std::size_t dim = points.front().size();
    r.assignment.assign(n, 0);
    bool first_pass = true;
    for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < r.centroids.size(); ++c) {
                const double d = squared_distance(points[i], r.centroids[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (first_pass || r.assignment[i] != best) changed = true;
            r.assignment[i] = best;
        }
        first_pass = false;
        if (!changed) break;
        std::vector<std::vector<double>> sums(r.centroids.size(), std::vector<double>(dim, 0.0));
        std::vector<std::size_t> sizes(r.centroids.size(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto& s = sums[r.assignment[i]];
            for (std::size_t j = 0; j < dim; ++j) s[j] += points[i][j];
            ++sizes[r.assignment[i]];
        }
        for (std::size_t c = 0; c < r.centroids.size(); ++c) {
            if (sizes[c] == 0) continue;
            for (std::size_t j = 0; j < dim; ++j) r.centroids[c][j] = sums[c][j] / static_cast<double>(sizes[c]);
        }
    }

    std::vector<std::size_t> sizes(r.centroids.size(), 0);
    for (auto a : r.assignment) ++sizes[a];
    std::vector<std::size_t> remap(r.centroids.size(), 0);
    std::vector<std::vector<double>> kept;
    for (std::size_t c = 0; c < r.centroids.size(); ++c) {
        if (sizes[c] == 0) continue;
        remap[c] = kept.size();
        kept.push_back(std::move(r.centroids[c]));
    }
    r.centroids = std::move(kept);
    for (auto& a : r.assignment) a = remap[a];
    return r;
}

// k-Means SMOTE:
//  1. cluster all samples with k-means (k = min(k_clusters, n));
//  2. keep clusters whose minority share exceeds the threshold and that hold
//     at least two minority samples;
//  3. split the deficit (majority - minority) across kept clusters in
//     proportion to their mean pairwise minority distance (sparser clusters
//     get more points);
//  4. run SMOTE inside each kept cluster.
// Falls back to plain SMOTE over the whole minority class when no cluster
// qualifies.
inline std::vector<LabeledWindow> kmeans_smote(std::span<const LabeledWindow> windows,
                                               const ResampleSpec& spec, ResampleStats* stats = nullptr) {
    spec.validate();
    const auto s = detail::split_classes(windows);
    detail::require_minority(s, 2, "kmeans_smote");
    std::vector<LabeledWindow> out(windows.begin(), windows.end());
    const std::size_t deficit = s.n_majority - s.n_minority;
    if (deficit == 0) return out;

    std::vector<std::vector<double>> pts;
    pts.reserve(windows.size());
    for (const auto& w : windows) pts.push_back(w.x);
    auto rng = make_rng(spec.seed, "kmeans_smote");
    const auto km = kmeans(pts, spec.k_clusters, spec.kmeans_max_iter, rng);

    std::vector<std::vector<std::size_t>> minority_in(km.centroids.size());
    std::vector<std::size_t> size_of(km.centroids.size(), 0);
    for (std::size_t i = 0; i < windows.size(); ++i) {
        ++size_of[km.assignment[i]];
        if (windows[i].y == s.minority) minority_in[km.assignment[i]].push_back(i);
    }

    std::vector<std::size_t> selected;
    std::vector<double> sparsity;
    for (std::size_t c = 0; c < km.centroids.size(); ++c) {
        const auto& m = minority_in[c];
        const double share = static_cast<double>(m.size()) / static_cast<double>(size_of[c]);
        if (m.size() < 2 || !(share > spec.cluster_imbalance_threshold)) continue;
        double sum = 0.0;
        for (std::size_t a = 0; a < m.size(); ++a) {
            for (std::size_t b = a + 1; b < m.size(); ++b) {
                sum += std::sqrt(squared_distance(windows[m[a]].x, windows[m[b]].x));
            }
        }
        const double pairs = static_cast<double>(m.size() * (m.size() - 1) / 2);
        selected.push_back(c);
        sparsity.push_back(sum / pairs);
    }

    if (selected.empty()) {
        if (stats) stats->fell_back_to_plain_smote = true;
        const auto pool = detail::indices_of(windows, s.minority);
        detail::smote_into(windows, pool, deficit, spec.k_neighbors, rng, out);
    } else {
        const auto quota = detail::apportion(deficit, sparsity);
        for (std::size_t i = 0; i < selected.size(); ++i) {
            detail::smote_into(windows, minority_in[selected[i]], quota[i], spec.k_neighbors, rng, out);
        }
    }
    if (stats) stats->synthesized += deficit;
    return out;
}

// Edited nearest neighbours, repeated until no sample is removed: a sample is
// dropped when more than half of its k nearest neighbours (among the samples
// still present) carry the other label. On return every survivor agrees with
// its neighbourhood in the surviving set. Survivors keep their input order.
inline std::vector<LabeledWindow> edited_nearest_neighbours(std::span<const LabeledWindow> windows,
                                                            std::size_t k, ResampleStats* stats = nullptr) {
    const std::size_t n = windows.size();
    std::vector<std::size_t> alive(n);
    std::iota(alive.begin(), alive.end(), std::size_t{0});
    // Neighbour lists hold original indices; a list is recomputed only when one
    // of its members has been removed.
    std::vector<std::vector<std::size_t>> nn(n);
    std::vector<bool> removed(n, false);
    std::vector<bool> stale(n, true);

    std::vector<std::pair<double, std::size_t>> scratch;
    for (;;) {
        const std::size_t kk = std::min(k, alive.empty() ? 0 : alive.size() - 1);
        if (kk == 0) break;
        for (auto i : alive) {
            if (!stale[i] && nn[i].size() == kk) continue;
            scratch.clear();
            for (auto j : alive) {
                if (j != i) scratch.emplace_back(squared_distance(windows[i].x, windows[j].x), j);
            }
            std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(kk), scratch.end());
            nn[i].resize(kk);
            for (std::size_t t = 0; t < kk; ++t) nn[i][t] = scratch[t].second;
            stale[i] = false;
        }
        std::vector<std::size_t> drop;
        for (auto i : alive) {
            std::size_t disagree = 0;
            for (auto j : nn[i]) disagree += windows[j].y != windows[i].y ? 1 : 0;
            if (2 * disagree > kk) drop.push_back(i);
        }
        if (drop.empty()) break;
        for (auto i : drop) removed[i] = true;
        std::erase_if(alive, [&](std::size_t i) { return removed[i]; });
        for (auto i : alive) {
            for (auto j : nn[i]) {
                if (removed[j]) {
                    stale[i] = true;
                    break;
                }
            }
        }
        if (stats) stats->removed += drop.size();
    }

    std::vector<LabeledWindow> out;
    out.reserve(alive.size());
    for (auto i : alive) out.push_back(windows[i]);
    return out;
}

// SMOTE to parity followed by ENN over both classes. The result may be
// imbalanced again since ENN edits the classes unevenly.
inline std::vector<LabeledWindow> smote_enn(std::span<const LabeledWindow> windows, const ResampleSpec& spec,
                                            ResampleStats* stats = nullptr) {
    auto over = smote(windows, spec, stats);
    auto edited = edited_nearest_neighbours(over, spec.enn_k, stats);
    if (count_label(edited, 0) == 0 || count_label(edited, 1) == 0) {
        throw ImbalanceError("smote_enn: editing removed an entire class");
    }
    return edited;
}

inline std::vector<LabeledWindow> resample(std::span<const LabeledWindow> windows, const ResampleSpec& spec,
                                           ResampleStats* stats = nullptr) {
    switch (spec.method) {
    case ResampleMethod::none: return {windows.begin(), windows.end()};
    case ResampleMethod::undersample: {
        auto out = random_undersample(windows, spec.seed);
        if (stats) stats->removed += windows.size() - out.size();
        return out;
    }
    case ResampleMethod::kmeans_smote: return kmeans_smote(windows, spec, stats);
    case ResampleMethod::smote_enn: return smote_enn(windows, spec, stats);
    }
    return {windows.begin(), windows.end()};
}

} // namespace fedsim
