#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedsim/dataset.hpp"
#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Layer widths from input to output. Hidden layers use ReLU and dropout, the
// last layer is a single sigmoid unit.
struct Architecture {
    std::vector<std::size_t> widths{12, 128, 64, 32, 1};

    static Architecture for_input(std::size_t input_dim) {
        Architecture a;
        a.widths.front() = input_dim;
        return a;
    }

    std::size_t layers() const { return widths.size() - 1; }
    std::size_t input_dim() const { return widths.front(); }
    std::size_t fan_in(std::size_t l) const { return widths[l]; }
    std::size_t fan_out(std::size_t l) const { return widths[l + 1]; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < layers(); ++l) n += fan_in(l) * fan_out(l) + fan_out(l);
        return n;
    }

    void validate() const {
        if (widths.size() < 2) throw ConfigError("architecture needs an input and an output layer");
        if (widths.back() != 1) throw ConfigError("architecture must end in a single output unit");
        for (auto w : widths) {
            if (w == 0) throw ConfigError("architecture widths must be >= 1");
        }
    }

    bool operator==(const Architecture&) const = default;
};

// Weights and biases in one contiguous buffer. Layout, layer by layer from the
// input: W_l as a row-major fan_in x fan_out matrix, then b_l (fan_out). The
// checkpoint file and FedAvg both operate on this flat view.
class ModelParameters {
public:
    ModelParameters() = default;
    explicit ModelParameters(Architecture arch)
        : arch_(std::move(arch)), values_(arch_.parameter_count(), 0.0) {
        arch_.validate();
        offsets();
    }

    static ModelParameters from_flat(Architecture arch, std::vector<double> flat) {
        ModelParameters p(std::move(arch));
        if (flat.size() != p.values_.size()) {
            throw InputError("parameter vector has " + std::to_string(flat.size()) + " values, architecture needs " +
                             std::to_string(p.values_.size()));
        }
        p.values_ = std::move(flat);
        return p;
    }

    const Architecture& architecture() const { return arch_; }
    std::size_t size() const { return values_.size(); }
    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::vector<double> flatten() const { return values_; }

    Eigen::Map<RowMatrix> weights(std::size_t l) {
        return {values_.data() + w_off_[l], static_cast<Eigen::Index>(arch_.fan_in(l)),
                static_cast<Eigen::Index>(arch_.fan_out(l))};
    }
    Eigen::Map<const RowMatrix> weights(std::size_t l) const {
        return {values_.data() + w_off_[l], static_cast<Eigen::Index>(arch_.fan_in(l)),
                static_cast<Eigen::Index>(arch_.fan_out(l))};
    }
    Eigen::Map<Eigen::RowVectorXd> bias(std::size_t l) {
        return {values_.data() + b_off_[l], static_cast<Eigen::Index>(arch_.fan_out(l))};
    }
    Eigen::Map<const Eigen::RowVectorXd> bias(std::size_t l) const {
        return {values_.data() + b_off_[l], static_cast<Eigen::Index>(arch_.fan_out(l))};
    }

    bool same_shape(const ModelParameters& o) const { return arch_ == o.arch_; }
    bool all_finite() const {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    bool operator==(const ModelParameters& o) const { return arch_ == o.arch_ && values_ == o.values_; }

private:
    void offsets() {
        w_off_.clear();
        b_off_.clear();
        std::size_t off = 0;
        for (std::size_t l = 0; l < arch_.layers(); ++l) {
            w_off_.push_back(off);
            off += arch_.fan_in(l) * arch_.fan_out(l);
            b_off_.push_back(off);
            off += arch_.fan_out(l);
        }
    }

    Architecture arch_;
    std::vector<double> values_;
    std::vector<std::size_t> w_off_;
    std::vector<std::size_t> b_off_;
};

// Gradients share the parameter layout.
using Gradient = ModelParameters;

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 1;
    double dropout_rate = 0.2;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw ConfigError("learning rate must be finite and >= 0");
        }
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
    }
};

enum class Mode { train, eval };

inline constexpr double kProbabilityClamp = 1e-7;

// Glorot-uniform weights, zero biases.
inline ModelParameters init_params(std::uint64_t seed, const Architecture& arch = {}) {
    ModelParameters p(arch);
    auto rng = make_rng(seed, "init");
    for (std::size_t l = 0; l < arch.layers(); ++l) {
        const double limit = std::sqrt(6.0 / static_cast<double>(arch.fan_in(l) + arch.fan_out(l)));
        std::uniform_real_distribution<double> dist(-limit, limit);
        auto w = p.weights(l);
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
        }
    }
    return p;
}

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double clamp_probability(double p) {
    return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

inline double bce_loss(double p, int y) {
    p = clamp_probability(p);
    return y == 1 ? -std::log(p) : -std::log1p(-p);
}

namespace detail {

// Activations of one mini-batch, kept for the backward pass.
struct ForwardTrace {
    std::vector<RowMatrix> activations;   // activations[0] = input, [l+1] = output of layer l
    std::vector<RowMatrix> masks;         // scaled dropout masks per hidden layer (empty if none)
    Eigen::VectorXd logits;
};

inline RowMatrix gather_inputs(std::span<const LabeledWindow> windows, std::span<const std::size_t> rows,
                               std::size_t dim) {
    RowMatrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& w = windows[rows[r]].x;
        if (w.size() != dim) {
            throw InputError("window has " + std::to_string(w.size()) + " features, model expects " +
                             std::to_string(dim));
        }
        for (std::size_t j = 0; j < dim; ++j) {
            if (!std::isfinite(w[j])) throw NumericError("non-finite feature value");
            x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = w[j];
        }
    }
    return x;
}

// Dropout masks are drawn row by row, unit by unit, layer by layer, so a
// given rng state always produces the same masks for the same batch.
inline ForwardTrace forward_batch(const ModelParameters& params, RowMatrix input, Mode mode, Rng* rng,
                                  double dropout_rate) {
    const auto& arch = params.architecture();
    ForwardTrace t;
    t.activations.reserve(arch.layers() + 1);
    t.activations.push_back(std::move(input));
    const bool drop = mode == Mode::train && dropout_rate > 0.0;
    std::bernoulli_distribution keep(1.0 - dropout_rate);
    const double scale = drop ? 1.0 / (1.0 - dropout_rate) : 1.0;
    for (std::size_t l = 0; l < arch.layers(); ++l) {
        RowMatrix z = t.activations.back() * params.weights(l);
        z.rowwise() += params.bias(l);
        if (l + 1 == arch.layers()) {
            t.logits = z.col(0);
            t.activations.push_back(std::move(z));
            break;
        }
        z = z.cwiseMax(0.0);
        if (drop) {
            RowMatrix mask(z.rows(), z.cols());
            for (Eigen::Index r = 0; r < mask.rows(); ++r) {
                for (Eigen::Index c = 0; c < mask.cols(); ++c) mask(r, c) = keep(*rng) ? scale : 0.0;
            }
            z = z.cwiseProduct(mask);
            t.masks.push_back(std::move(mask));
        } else {
            t.masks.emplace_back();
        }
        t.activations.push_back(std::move(z));
    }
    return t;
}

inline std::vector<std::size_t> all_rows(std::size_t n) {
    std::vector<std::size_t> r(n);
    std::iota(r.begin(), r.end(), std::size_t{0});
    return r;
}

} // namespace detail

// Probability for one feature vector. Train mode applies inverted dropout
// after every hidden layer using `rng`; eval mode ignores it. The result is
// clamped to [1e-7, 1 - 1e-7].
inline double forward(const ModelParameters& params, std::span<const double> x, Mode mode, Rng& rng,
                      double dropout_rate) {
    const auto dim = params.architecture().input_dim();
    if (x.size() != dim) throw InputError("forward: expected " + std::to_string(dim) + " features");
    RowMatrix in(1, static_cast<Eigen::Index>(dim));
    for (std::size_t j = 0; j < dim; ++j) {
        if (!std::isfinite(x[j])) throw NumericError("forward: non-finite input");
        in(0, static_cast<Eigen::Index>(j)) = x[j];
    }
    const auto t = detail::forward_batch(params, std::move(in), mode, &rng, dropout_rate);
    return clamp_probability(sigmoid(t.logits(0)));
}

inline double forward(const ModelParameters& params, std::span<const double> x) {
    Rng unused(0);
    return forward(params, x, Mode::eval, unused, 0.0);
}

// Eval-mode probabilities for every window.
inline std::vector<double> predict(const ModelParameters& params, std::span<const LabeledWindow> windows) {
    std::vector<double> out;
    out.reserve(windows.size());
    constexpr std::size_t chunk = 1024;
    for (std::size_t start = 0; start < windows.size(); start += chunk) {
        const auto n = std::min(chunk, windows.size() - start);
        std::vector<std::size_t> rows(n);
        std::iota(rows.begin(), rows.end(), start);
        auto t = detail::forward_batch(params, detail::gather_inputs(windows, rows, params.architecture().input_dim()),
                                       Mode::eval, nullptr, 0.0);
        for (Eigen::Index i = 0; i < t.logits.size(); ++i) out.push_back(clamp_probability(sigmoid(t.logits(i))));
    }
    return out;
}

// Mean eval-mode BCE over the windows.
inline double local_loss(const ModelParameters& params, std::span<const LabeledWindow> windows) {
    if (windows.empty()) throw InputError("local_loss: no windows");
    const auto p = predict(params, windows);
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) sum += bce_loss(p[i], windows[i].y);
    return sum / static_cast<double>(p.size());
}

// Exact gradient of the mean clamped BCE over the rows `batch` of `windows`,
// with dropout masks sampled from `rng`. Where the clamp is active the loss is
// flat in the logit, so those samples contribute nothing.
inline Gradient backward(const ModelParameters& params, std::span<const LabeledWindow> windows,
                         std::span<const std::size_t> batch, Rng& rng, double dropout_rate) {
    if (batch.empty()) throw InputError("backward: empty batch");
    const auto& arch = params.architecture();
    auto t = detail::forward_batch(params, detail::gather_inputs(windows, batch, arch.input_dim()), Mode::train, &rng,
                                   dropout_rate);
    const auto n = static_cast<Eigen::Index>(batch.size());

    RowMatrix delta(n, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double p = sigmoid(t.logits(r));
        const bool clamped = p < kProbabilityClamp || p > 1.0 - kProbabilityClamp;
        delta(r, 0) = clamped ? 0.0 : (p - static_cast<double>(windows[batch[static_cast<std::size_t>(r)]].y));
    }
    delta /= static_cast<double>(n);

    Gradient g(arch);
    for (std::size_t l = arch.layers(); l-- > 0;) {
        g.weights(l).noalias() = t.activations[l].transpose() * delta;
        g.bias(l) = delta.colwise().sum();
        if (l == 0) break;
        RowMatrix back = delta * params.weights(l).transpose();
        // activations[l] is post-ReLU, post-dropout output of layer l-1
        const auto& mask = t.masks[l - 1];
        const auto& act = t.activations[l];
        for (Eigen::Index r = 0; r < back.rows(); ++r) {
            for (Eigen::Index c = 0; c < back.cols(); ++c) {
                if (mask.size() != 0) {
                    back(r, c) *= mask(r, c);
                    if (mask(r, c) == 0.0) continue;
                }
                if (!(act(r, c) > 0.0)) back(r, c) = 0.0;
            }
        }
        delta = std::move(back);
    }
    return g;
}

inline Gradient backward(const ModelParameters& params, std::span<const LabeledWindow> batch, Rng& rng,
                         double dropout_rate) {
    const auto rows = detail::all_rows(batch.size());
    return backward(params, batch, rows, rng, dropout_rate);
}

inline void apply_sgd(ModelParameters& params, const Gradient& g, double learning_rate) {
    if (!params.same_shape(g)) throw InputError("sgd_step: gradient shape does not match parameters");
    auto v = params.values();
    auto d = g.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= learning_rate * d[i];
}

inline ModelParameters sgd_step(ModelParameters params, const Gradient& g, double learning_rate) {
    apply_sgd(params, g, learning_rate);
    return params;
}

// One pass over `windows`: shuffle with a stream derived from (seed, epoch),
// then forward/backward/step per mini-batch. The final batch may be short.
inline void train_one_epoch(ModelParameters& params, std::span<const LabeledWindow> windows, const TrainConfig& cfg,
                            std::size_t epoch) {
    if (windows.empty()) throw InputError("train: no windows");
    auto rng = make_rng(cfg.seed, epoch, "epoch");
    auto order = detail::all_rows(windows.size());
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const auto n = std::min(cfg.batch_size, order.size() - start);
        const auto g = backward(params, windows, std::span(order).subspan(start, n), rng, cfg.dropout_rate);
        apply_sgd(params, g, cfg.learning_rate);
    }
}

inline ModelParameters train_epochs(ModelParameters params, std::span<const LabeledWindow> windows,
                                    const TrainConfig& cfg) {
    cfg.validate();
    if (windows.empty()) throw InputError("train_epochs: no windows");
    for (std::size_t e = 0; e < cfg.epochs; ++e) train_one_epoch(params, windows, cfg, e);
    if (!params.all_finite()) throw NumericError("training diverged: non-finite parameters");
    return params;
}

// ---------------------------------------------------------------------------
// Checkpoint: 12-byte magic, little-endian uint32 version, then every value as
// a little-endian IEEE-754 double in the flat layout above.

inline constexpr std::array<char, 12> kCheckpointMagic{'F', 'E', 'D', 'S', 'I', 'M', '-', 'M', 'L', 'P', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void write_checkpoint(std::ostream& out, const ModelParameters& params) {
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    const auto v = params.values();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!out) throw Error("failed writing checkpoint");
}

inline ModelParameters read_checkpoint(std::istream& in, const Architecture& arch = {}) {
    std::array<char, 12> magic{};
    std::uint32_t version = 0;
    in.read(magic.data(), magic.size());
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    if (!in || magic != kCheckpointMagic) throw InputError("not a parameter checkpoint");
    if (version != kCheckpointVersion) throw InputError("unsupported checkpoint version " + std::to_string(version));
    std::vector<double> flat(arch.parameter_count());
    in.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
    if (!in) throw InputError("checkpoint truncated");
    if (in.peek() != std::char_traits<char>::eof()) throw InputError("checkpoint has trailing data");
    return ModelParameters::from_flat(arch, std::move(flat));
}

} // namespace fedsim
