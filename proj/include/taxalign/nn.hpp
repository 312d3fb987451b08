#pragma once

// Minimal dense numeric core: row-major double matrices, three-layer MLPs with
// hand-written backward passes, Adam, and a central-difference gradient oracle.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "taxalign/binary_io.hpp"
#include "taxalign/errors.hpp"
#include "taxalign/random.hpp"

namespace taxalign::nn {

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw shape_error("matrix data of length " + std::to_string(data_.size()) + " for shape " +
                              std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    static Matrix row_vector(std::span<const double> v) { return Matrix(1, v.size(), {v.begin(), v.end()}); }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    [[nodiscard]] std::span<double> flat() noexcept { return data_; }
    [[nodiscard]] std::span<const double> flat() const noexcept { return data_; }

    [[nodiscard]] std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// A * B.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw shape_error("matmul " + a.shape() + " * " + b.shape());
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

/// A^T * B.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw shape_error("matmul_tn " + a.shape() + "^T * " + b.shape());
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aki * b(k, j);
        }
    }
    return out;
}

/// A * B^T.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw shape_error("matmul_nt " + a.shape() + " * " + b.shape() + "^T");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
            out(i, j) = s;
        }
    }
    return out;
}

inline void add_inplace(Matrix& dst, const Matrix& src, double scale = 1.0) {
    if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
        throw shape_error("add " + src.shape() + " into " + dst.shape());
    }
    auto d = dst.flat();
    auto s = src.flat();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double silu(double x) noexcept { return x * sigmoid(x); }

/// d/dx silu(x) = s(x) * (1 + x * (1 - s(x))).
inline double silu_grad(double x) noexcept {
    double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

inline Matrix silu(const Matrix& m) {
    Matrix out = m;
    for (auto& x : out.flat()) x = silu(x);
    return out;
}

enum class Activation { silu, identity };

/// Affine map Y = X W + b, W stored in x out.
struct Linear {
    Matrix weight;  // in x out
    Matrix bias;    // 1 x out

    Linear() = default;
    Linear(std::size_t in, std::size_t out) : weight(in, out), bias(1, out) {}

    [[nodiscard]] std::size_t in() const noexcept { return weight.rows(); }
    [[nodiscard]] std::size_t out() const noexcept { return weight.cols(); }

    [[nodiscard]] Matrix forward(const Matrix& x) const {
        Matrix y = matmul(x, weight);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += bias(0, c);
        }
        return y;
    }

    /// Kaiming-uniform weights, bound sqrt(6 / fan_in); zero bias.
    void init_kaiming(Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in()));
        for (auto& w : weight.flat()) w = rng.uniform(-bound, bound);
        bias.fill(0.0);
    }
};

using ParamList = std::vector<std::span<double>>;
using GradList = std::vector<std::span<const double>>;

/// Three affine layers; the activation follows layers 1 and 2 only.
struct Mlp {
    std::array<Linear, 3> layers;
    Activation activation = Activation::silu;

    Mlp() = default;
    Mlp(std::size_t in, std::size_t hidden, std::size_t out, Activation act = Activation::silu)
        : layers{Linear(in, hidden), Linear(hidden, hidden), Linear(hidden, out)}, activation(act) {}

    Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, Activation act = Activation::silu)
        : Mlp(in, hidden, out, act) {
        for (auto& l : layers) l.init_kaiming(rng);
    }

    [[nodiscard]] std::size_t in() const noexcept { return layers[0].in(); }
    [[nodiscard]] std::size_t hidden() const noexcept { return layers[0].out(); }
    [[nodiscard]] std::size_t out() const noexcept { return layers[2].out(); }

    /// W1, b1, W2, b2, W3, b3.
    ParamList parameters() {
        ParamList p;
        for (auto& l : layers) {
            p.push_back(l.weight.flat());
            p.push_back(l.bias.flat());
        }
        return p;
    }

    [[nodiscard]] GradList parameters() const {
        GradList p;
        for (const auto& l : layers) {
            p.push_back(l.weight.flat());
            p.push_back(l.bias.flat());
        }
        return p;
    }

    [[nodiscard]] std::size_t parameter_count() const noexcept {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    [[nodiscard]] std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (auto p : parameters()) h = fnv1a64(p, h);
        return h;
    }

    friend bool operator==(const Mlp& a, const Mlp& b) {
        for (std::size_t i = 0; i < 3; ++i) {
            if (!(a.layers[i].weight == b.layers[i].weight) || !(a.layers[i].bias == b.layers[i].bias)) return false;
        }
        return a.activation == b.activation;
    }
};

/// Geometric mean of the two widths, rounded up.
inline std::size_t default_hidden_width(std::size_t a, std::size_t b) {
    return static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(a) * static_cast<double>(b))));
}

struct MlpCache {
    Matrix input;
    Matrix pre1, post1, pre2, post2;
    Matrix output;
};

struct MlpGrads {
    std::array<Matrix, 3> weight;
    std::array<Matrix, 3> bias;

    MlpGrads() = default;
    explicit MlpGrads(const Mlp& net) {
        for (std::size_t i = 0; i < 3; ++i) {
            weight[i] = Matrix(net.layers[i].weight.rows(), net.layers[i].weight.cols());
            bias[i] = Matrix(1, net.layers[i].bias.cols());
        }
    }

    [[nodiscard]] GradList as_list() const {
        GradList g;
        for (std::size_t i = 0; i < 3; ++i) {
            g.push_back(weight[i].flat());
            g.push_back(bias[i].flat());
        }
        return g;
    }

    void accumulate(const MlpGrads& other, double scale = 1.0) {
        for (std::size_t i = 0; i < 3; ++i) {
            add_inplace(weight[i], other.weight[i], scale);
            add_inplace(bias[i], other.bias[i], scale);
        }
    }

    void scale(double s) {
        for (std::size_t i = 0; i < 3; ++i) {
            for (auto& x : weight[i].flat()) x *= s;
            for (auto& x : bias[i].flat()) x *= s;
        }
    }
};

namespace detail {

inline Matrix activate(const Matrix& z, Activation act) { return act == Activation::silu ? silu(z) : z; }

}  // namespace detail

/// Row-wise forward pass; the cache keeps the pre-activations for backward.
inline Matrix mlp_forward(const Mlp& net, const Matrix& input, MlpCache* cache = nullptr) {
    if (input.cols() != net.in()) {
        throw shape_error("MLP expects " + std::to_string(net.in()) + " input columns, got " + input.shape());
    }
    Matrix pre1 = net.layers[0].forward(input);
    Matrix post1 = detail::activate(pre1, net.activation);
    Matrix pre2 = net.layers[1].forward(post1);
    Matrix post2 = detail::activate(pre2, net.activation);
    Matrix out = net.layers[2].forward(post2);
    if (cache) *cache = MlpCache{input, std::move(pre1), std::move(post1), std::move(pre2), std::move(post2), out};
    return out;
}

struct MlpBackward {
    Matrix input_grad;
    MlpGrads grads;
};

/// Reverse-mode gradients of the forward map for a given output gradient.
inline MlpBackward mlp_backward(const Mlp& net, const MlpCache& cache, const Matrix& output_grad) {
    const std::size_t n = cache.input.rows();
    if (cache.input.cols() != net.in() || cache.pre1.cols() != net.hidden() || cache.pre2.cols() != net.hidden() ||
        cache.output.cols() != net.out() || cache.pre1.rows() != n || cache.output.rows() != n) {
        throw shape_error("stale MLP cache: input " + cache.input.shape() + ", output " + cache.output.shape() +
                          " for net " + std::to_string(net.in()) + "-" + std::to_string(net.hidden()) + "-" +
                          std::to_string(net.out()));
    }
    if (output_grad.rows() != n || output_grad.cols() != net.out()) {
        throw shape_error("output gradient " + output_grad.shape() + " does not match MLP output " + cache.output.shape());
    }
    auto act_back = [&](const Matrix& grad_post, const Matrix& pre) {
        if (net.activation == Activation::identity) return grad_post;
        Matrix g = grad_post;
        auto gf = g.flat();
        auto pf = pre.flat();
        for (std::size_t i = 0; i < gf.size(); ++i) gf[i] *= silu_grad(pf[i]);
        return g;
    };
    auto bias_grad = [](const Matrix& g) {
        Matrix b(1, g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) b(0, c) += g(r, c);
        }
        return b;
    };

    MlpBackward out;
    const Matrix& g3 = output_grad;
    out.grads.weight[2] = matmul_tn(cache.post2, g3);
    out.grads.bias[2] = bias_grad(g3);
    Matrix g2 = act_back(matmul_nt(g3, net.layers[2].weight), cache.pre2);
    out.grads.weight[1] = matmul_tn(cache.post1, g2);
    out.grads.bias[1] = bias_grad(g2);
    Matrix g1 = act_back(matmul_nt(g2, net.layers[1].weight), cache.pre1);
    out.grads.weight[0] = matmul_tn(cache.input, g1);
    out.grads.bias[0] = bias_grad(g1);
    out.input_grad = matmul_nt(g1, net.layers[0].weight);
    return out;
}

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update. Moment buffers are sized on first use; all
/// gradients are checked for finiteness before any parameter changes.
inline void adam_step(const ParamList& params, const GradList& grads, AdamState& state) {
    if (params.size() != grads.size()) {
        throw shape_error("Adam got " + std::to_string(grads.size()) + " gradients for " +
                          std::to_string(params.size()) + " tensors");
    }
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (params[t].size() != grads[t].size()) {
            throw shape_error("Adam tensor " + std::to_string(t) + ": parameter size " +
                              std::to_string(params[t].size()) + ", gradient size " + std::to_string(grads[t].size()));
        }
        for (double g : grads[t]) {
            if (!std::isfinite(g)) throw numeric_error("non-finite gradient in tensor " + std::to_string(t));
        }
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), 0.0);
            state.v.emplace_back(p.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw shape_error("Adam state tracks a different tensor list");
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& m = state.m[t];
        auto& v = state.v[t];
        if (m.size() != params[t].size()) throw shape_error("Adam moment shape mismatch in tensor " + std::to_string(t));
        for (std::size_t i = 0; i < params[t].size(); ++i) {
            const double g = grads[t][i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            params[t][i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

/// Plain gradient descent.
inline void sgd_step(const ParamList& params, const GradList& grads, double lr) {
    if (params.size() != grads.size()) throw shape_error("SGD tensor count mismatch");
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (params[t].size() != grads[t].size()) throw shape_error("SGD tensor size mismatch");
        for (std::size_t i = 0; i < params[t].size(); ++i) {
            if (!std::isfinite(grads[t][i])) throw numeric_error("non-finite gradient");
            params[t][i] -= lr * grads[t][i];
        }
    }
}

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate.
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> params, double h = 1e-5) {
    std::vector<double> p(params.begin(), params.end());
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double up = f(p);
        p[i] = orig - h;
        const double down = f(p);
        p[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw numeric_error("non-finite function value at coordinate " + std::to_string(i));
        }
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max|a - n| / max(1, max|n|).
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
    if (analytic.size() != numeric.size()) throw shape_error("gradient length mismatch");
    double diff = 0.0, scale = 1.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max(scale, std::abs(numeric[i]));
    }
    return diff / scale;
}

/// Softmax over a vector, computed with the max subtracted.
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw domain_error("softmax of an empty vector");
    double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - mx);
    for (auto& x : p) x /= z;
    return p;
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
    if (logits.empty()) throw domain_error("log-softmax of an empty vector");
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    // Shift before subtracting log(z) so large logits keep their low bits.
    const double log_z = std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (logits[i] - mx) - log_z;
    return out;
}

struct CosineGrad {
    double value = 0.0;
    std::vector<double> d_a;  // d cos(a, b) / d a
};

/// cos(a, b) and its gradient with respect to a: b/(|a||b|) - cos * a/|a|^2.
inline CosineGrad cosine_with_grad(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw shape_error("cosine of vectors with different lengths");
    double na = 0.0, nb = 0.0, ab = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] * a[i];
        nb += b[i] * b[i];
        ab += a[i] * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na == 0.0 || nb == 0.0) throw domain_error("cosine similarity of a zero-norm vector");
    CosineGrad out;
    const double raw = ab / (na * nb);
    out.value = std::clamp(raw, -1.0, 1.0);
    out.d_a.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out.d_a[i] = b[i] / (na * nb) - raw * a[i] / (na * na);
    return out;
}

struct NamedTensor {
    std::string name;
    Matrix value;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Checkpoint: `NN01`, then per tensor u32 name length, name, u32 rows,
/// u32 cols and rows*cols little-endian f64 values; tensors run to end of file.
inline std::string save_checkpoint(std::span<const NamedTensor> tensors) {
    std::string out = "NN01";
    for (const auto& t : tensors) {
        binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
        binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
        for (double v : t.value.flat()) binary::put_f64(out, v);
    }
    return out;
}

inline std::vector<NamedTensor> load_checkpoint(std::string_view data) {
    binary::Reader in(data);
    if (in.get_bytes(4) != "NN01") throw parse_error(0, "bad checkpoint magic, expected NN01");
    std::vector<NamedTensor> out;
    while (!in.done()) {
        NamedTensor t;
        t.name = in.get_bytes(in.get_le<std::uint32_t>());
        auto rows = in.get_le<std::uint32_t>();
        auto cols = in.get_le<std::uint32_t>();
        std::vector<double> values(static_cast<std::size_t>(rows) * cols);
        for (auto& v : values) v = in.get_f64();
        t.value = Matrix(rows, cols, std::move(values));
        out.push_back(std::move(t));
    }
    return out;
}

inline void append_mlp_tensors(std::vector<NamedTensor>& out, const std::string& prefix, const Mlp& net) {
    for (std::size_t i = 0; i < 3; ++i) {
        out.push_back({prefix + ".l" + std::to_string(i + 1) + ".weight", net.layers[i].weight});
        out.push_back({prefix + ".l" + std::to_string(i + 1) + ".bias", net.layers[i].bias});
    }
}

}  // namespace taxalign::nn
