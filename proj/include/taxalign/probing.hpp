#pragma once

// Linear probing of frozen per-token features: pool each sample's tokens,
// fit one affine layer with softmax cross-entropy and Adam, report accuracy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "taxalign/errors.hpp"
#include "taxalign/nn.hpp"
#include "taxalign/random.hpp"

namespace taxalign {

enum class PoolMode { mean, last };

inline std::vector<double> pool_features(const nn::Matrix& tokens, PoolMode mode) {
    if (tokens.rows() == 0 || tokens.cols() == 0) throw domain_error("cannot pool an empty token matrix");
    if (mode == PoolMode::last) {
        auto r = tokens.row(tokens.rows() - 1);
        return {r.begin(), r.end()};
    }
    std::vector<double> out(tokens.cols(), 0.0);
    for (std::size_t r = 0; r < tokens.rows(); ++r) {
        for (std::size_t c = 0; c < tokens.cols(); ++c) out[c] += tokens(r, c);
    }
    for (auto& x : out) x /= static_cast<double>(tokens.rows());
    return out;
}

struct ProbeDataset {
    nn::Matrix features;              // samples x width
    std::vector<std::size_t> labels;  // class index per row
    std::size_t classes = 0;

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
    [[nodiscard]] std::size_t width() const noexcept { return features.cols(); }

    void validate() const {
        if (features.rows() != labels.size()) {
            throw shape_error("probe dataset has " + std::to_string(features.rows()) + " feature rows and " +
                              std::to_string(labels.size()) + " labels");
        }
        for (auto l : labels) {
            if (l >= classes) throw domain_error("probe label " + std::to_string(l) + " outside " + std::to_string(classes) + " classes");
        }
    }

    [[nodiscard]] std::size_t distinct_labels() const {
        std::vector<std::size_t> s(labels);
        std::sort(s.begin(), s.end());
        return static_cast<std::size_t>(std::unique(s.begin(), s.end()) - s.begin());
    }
};

/// Stacks pooled rows into a dataset.
inline ProbeDataset make_probe_dataset(std::span<const nn::Matrix> tokens, std::span<const std::size_t> labels,
                                       std::size_t classes, PoolMode mode) {
    if (tokens.size() != labels.size()) throw shape_error("token matrices and labels differ in count");
    if (tokens.empty()) throw domain_error("empty probe dataset");
    ProbeDataset d;
    d.classes = classes;
    d.features = nn::Matrix(tokens.size(), tokens.front().cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i].cols() != d.features.cols()) throw shape_error("token width differs at sample " + std::to_string(i));
        auto p = pool_features(tokens[i], mode);
        std::copy(p.begin(), p.end(), d.features.row(i).begin());
    }
    d.labels.assign(labels.begin(), labels.end());
    d.validate();
    return d;
}

/// Picks `per_label` indices of every label after a seeded shuffle; result is
/// ordered by label, then by shuffled position.
inline std::vector<std::size_t> balanced_sample(std::span<const std::size_t> labels, std::size_t per_label,
                                                std::uint64_t seed) {
    std::map<std::size_t, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
    Rng rng(seed);
    std::vector<std::size_t> out;
    for (auto& [label, idx] : by_label) {
        if (idx.size() < per_label) {
            throw domain_error("label " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                               " samples, need " + std::to_string(per_label));
        }
        rng.shuffle(std::span<std::size_t>(idx));
        out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(per_label));
    }
    return out;
}

struct ProbeConfig {
    std::size_t batch_size = 512;
    double lr = 1e-4;
    std::size_t epochs = 500;
    std::uint64_t seed = 0;
};

struct LinearProbe {
    nn::Matrix weight;  // width x classes
    nn::Matrix bias;    // 1 x classes

    [[nodiscard]] std::size_t width() const noexcept { return weight.rows(); }
    [[nodiscard]] std::size_t classes() const noexcept { return weight.cols(); }

    [[nodiscard]] nn::Matrix logits(const nn::Matrix& x) const {
        if (x.cols() != width()) {
            throw shape_error("probe expects width " + std::to_string(width()) + ", got " + std::to_string(x.cols()));
        }
        nn::Matrix z = nn::matmul(x, weight);
        for (std::size_t r = 0; r < z.rows(); ++r) {
            for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += bias(0, c);
        }
        return z;
    }
};

struct ProbeLoss {
    double loss = 0.0;
    nn::Matrix d_weight;
    nn::Matrix d_bias;
};

/// Mean softmax cross-entropy over the selected rows, with gradients.
inline ProbeLoss probe_loss(const LinearProbe& probe, const ProbeDataset& data, std::span<const std::size_t> rows) {
    if (rows.empty()) throw domain_error("probe loss over no rows");
    nn::Matrix x(rows.size(), data.width());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(data.features.row(rows[i]).begin(), data.features.row(rows[i]).end(), x.row(i).begin());
    }
    nn::Matrix z = probe.logits(x);
    const double n = static_cast<double>(rows.size());
    nn::Matrix dz(z.rows(), z.cols());
    ProbeLoss out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto logp = nn::log_softmax(z.row(i));
        const std::size_t y = data.labels[rows[i]];
        out.loss -= logp[y] / n;
        for (std::size_t c = 0; c < z.cols(); ++c) dz(i, c) = (std::exp(logp[c]) - (c == y ? 1.0 : 0.0)) / n;
    }
    out.d_weight = nn::matmul_tn(x, dz);
    out.d_bias = nn::Matrix(1, z.cols());
    for (std::size_t i = 0; i < dz.rows(); ++i) {
        for (std::size_t c = 0; c < dz.cols(); ++c) out.d_bias(0, c) += dz(i, c);
    }
    return out;
}

struct ProbeTraining {
    LinearProbe probe;
    /// Full training-set loss before training and after each epoch.
    std::vector<double> loss_curve;
};

inline ProbeTraining train_probe(const ProbeDataset& data, const ProbeConfig& config) {
    data.validate();
    if (data.distinct_labels() < 2) throw domain_error("probe training needs at least 2 distinct labels");
    if (config.batch_size == 0) throw config_error("probe batch size must be positive");
    if (!(config.lr >= 0.0)) throw config_error("probe learning rate must be non-negative");
    Rng rng(derive_seed(config.seed, "probe"));
    ProbeTraining out;
    out.probe.weight = nn::Matrix(data.width(), data.classes);
    out.probe.bias = nn::Matrix(1, data.classes);
    const double bound = 1.0 / std::sqrt(static_cast<double>(data.width()));
    for (auto& w : out.probe.weight.flat()) w = rng.uniform(-bound, bound);

    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    out.loss_curve.push_back(probe_loss(out.probe, data, all).loss);
    nn::AdamState adam;
    adam.lr = config.lr;
    std::vector<std::size_t> order = all;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            auto g = probe_loss(out.probe, data, std::span<const std::size_t>(order).subspan(start, end - start));
            nn::adam_step({out.probe.weight.flat(), out.probe.bias.flat()}, {g.d_weight.flat(), g.d_bias.flat()}, adam);
        }
        out.loss_curve.push_back(probe_loss(out.probe, data, all).loss);
    }
    return out;
}

inline double evaluate_probe(const LinearProbe& probe, const ProbeDataset& data) {
    data.validate();
    if (data.size() == 0) throw domain_error("empty evaluation set");
    nn::Matrix z = probe.logits(data.features);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
        auto r = z.row(i);
        const auto pred = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
        correct += pred == data.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace taxalign
