#pragma once

// Cosine alignment of student features with frozen teacher embeddings:
// a visual loss over image-token features, a label loss on the answer
// position, and their average.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taxalign/errors.hpp"
#include "taxalign/nn.hpp"

namespace taxalign {

/// Read-only wrapper for teacher targets. Loss results carry no gradient
/// slots for values held here.
template <class T>
class Frozen {
public:
    Frozen() = default;
    explicit Frozen(T value) : value_(std::move(value)) {}
    [[nodiscard]] const T& get() const noexcept { return value_; }

private:
    T value_;
};

enum class VisualFeatureMode { all_tokens, last_token };
enum class TextFeatureMode { first_answer_token, mean_answer_tokens, last_question_token };

struct AlignmentConfig {
    /// Student layer providing image-token features (0 = input tokens, 1 = encoder output).
    std::size_t visual_layer = 1;
    /// Student layer providing answer-position features (1 = question state, 2 = answer state).
    std::size_t text_layer = 2;
    VisualFeatureMode visual_mode = VisualFeatureMode::all_tokens;
    TextFeatureMode text_mode = TextFeatureMode::first_answer_token;
    double visual_weight = 1.0;
    double label_weight = 1.0;

    void validate(std::size_t visual_depth = 1, std::size_t text_depth = 2) const {
        if (visual_layer > visual_depth) {
            throw config_error("visual target layer " + std::to_string(visual_layer) + " exceeds student depth " +
                               std::to_string(visual_depth));
        }
        if (text_layer < 1 || text_layer > text_depth) {
            throw config_error("text target layer " + std::to_string(text_layer) + " outside 1.." +
                               std::to_string(text_depth));
        }
        if (!(visual_weight >= 0.0) || !(label_weight >= 0.0)) throw config_error("loss weights must be non-negative");
    }
};

struct AlignmentBatch {
    nn::Matrix visual;    // N x D student image-token features
    nn::Matrix answer;    // N' x D student answer-token features
    nn::Matrix question;  // question-token features, may be empty
    Frozen<nn::Matrix> visual_targets;        // N x d
    Frozen<std::vector<double>> label_target;  // d
};

struct VisualLossResult {
    double loss = 0.0;
    std::vector<double> cosines;  // one per participating row
    nn::Matrix d_visual;          // same shape as batch.visual
    nn::MlpGrads projector;
};

struct LabelLossResult {
    double loss = 0.0;
    double cosine = 0.0;
    nn::Matrix d_answer;    // same shape as batch.answer
    nn::Matrix d_question;  // same shape as batch.question
    nn::MlpGrads projector;
};

/// -(1/N) sum_i cos(P_V(e_i), y_i) over all token rows, or over the last row only.
inline VisualLossResult visual_alignment_loss(const AlignmentBatch& batch, const nn::Mlp& projector,
                                              VisualFeatureMode mode = VisualFeatureMode::all_tokens) {
    const auto& targets = batch.visual_targets.get();
    if (batch.visual.rows() == 0) throw domain_error("visual alignment needs at least one token");
    if (targets.rows() != batch.visual.rows()) {
        throw shape_error("visual features " + batch.visual.shape() + " vs targets " + targets.shape());
    }
    if (projector.out() != targets.cols()) {
        throw shape_error("projector output width " + std::to_string(projector.out()) + " vs target width " +
                          std::to_string(targets.cols()));
    }
    const std::size_t first = mode == VisualFeatureMode::all_tokens ? 0 : batch.visual.rows() - 1;
    const std::size_t n = batch.visual.rows() - first;
    nn::Matrix input(n, batch.visual.cols());
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(batch.visual.row(first + i).begin(), batch.visual.row(first + i).end(), input.row(i).begin());
    }
    nn::MlpCache cache;
    nn::Matrix projected = nn::mlp_forward(projector, input, &cache);
    nn::Matrix d_projected(projected.rows(), projected.cols());
    VisualLossResult out;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        nn::CosineGrad c;
        try {
            c = nn::cosine_with_grad(projected.row(i), targets.row(first + i));
        } catch (const domain_error&) {
            throw domain_error("zero-norm projected feature or target at visual row " + std::to_string(first + i));
        }
        sum += c.value;
        out.cosines.push_back(c.value);
        for (std::size_t j = 0; j < c.d_a.size(); ++j) d_projected(i, j) = -c.d_a[j] / static_cast<double>(n);
    }
    out.loss = -sum / static_cast<double>(n);
    auto back = nn::mlp_backward(projector, cache, d_projected);
    out.d_visual = nn::Matrix(batch.visual.rows(), batch.visual.cols());
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(back.input_grad.row(i).begin(), back.input_grad.row(i).end(), out.d_visual.row(first + i).begin());
    }
    out.projector = std::move(back.grads);
    return out;
}

/// -cos(P_T(a), y_label), where a is the first answer token, the mean of the
/// answer tokens, or the last question token.
inline LabelLossResult label_alignment_loss(const AlignmentBatch& batch, const nn::Mlp& projector,
                                            TextFeatureMode mode = TextFeatureMode::first_answer_token) {
    const auto& target = batch.label_target.get();
    if (projector.out() != target.size()) {
        throw shape_error("projector output width " + std::to_string(projector.out()) + " vs label target width " +
                          std::to_string(target.size()));
    }
    const nn::Matrix& source = mode == TextFeatureMode::last_question_token ? batch.question : batch.answer;
    if (source.rows() == 0) {
        throw domain_error(mode == TextFeatureMode::last_question_token ? "no question features for label alignment"
                                                                        : "no answer features for label alignment");
    }
    nn::Matrix feature(1, source.cols());
    if (mode == TextFeatureMode::mean_answer_tokens) {
        for (std::size_t r = 0; r < source.rows(); ++r) {
            for (std::size_t c = 0; c < source.cols(); ++c) feature(0, c) += source(r, c);
        }
        for (auto& x : feature.flat()) x /= static_cast<double>(source.rows());
    } else {
        const std::size_t r = mode == TextFeatureMode::first_answer_token ? 0 : source.rows() - 1;
        std::copy(source.row(r).begin(), source.row(r).end(), feature.row(0).begin());
    }
    nn::MlpCache cache;
    nn::Matrix projected = nn::mlp_forward(projector, feature, &cache);
    nn::CosineGrad c;
    try {
        c = nn::cosine_with_grad(projected.row(0), target);
    } catch (const domain_error&) {
        throw domain_error("zero-norm projected answer feature or label target");
    }
    LabelLossResult out;
    out.cosine = c.value;
    out.loss = -c.value;
    nn::Matrix d_projected(1, projected.cols());
    for (std::size_t j = 0; j < c.d_a.size(); ++j) d_projected(0, j) = -c.d_a[j];
    auto back = nn::mlp_backward(projector, cache, d_projected);
    out.d_answer = nn::Matrix(batch.answer.rows(), batch.answer.cols());
    out.d_question = nn::Matrix(batch.question.rows(), batch.question.cols());
    nn::Matrix& dst = mode == TextFeatureMode::last_question_token ? out.d_question : out.d_answer;
    if (mode == TextFeatureMode::mean_answer_tokens) {
        for (std::size_t r = 0; r < dst.rows(); ++r) {
            for (std::size_t col = 0; col < dst.cols(); ++col) {
                dst(r, col) = back.input_grad(0, col) / static_cast<double>(dst.rows());
            }
        }
    } else {
        const std::size_t r = mode == TextFeatureMode::first_answer_token ? 0 : dst.rows() - 1;
        std::copy(back.input_grad.row(0).begin(), back.input_grad.row(0).end(), dst.row(r).begin());
    }
    out.projector = std::move(back.grads);
    return out;
}

struct AlignmentResult {
    double loss = 0.0;
    double loss_v = 0.0;
    double loss_c = 0.0;
    double mean_visual_cosine = 0.0;
    double label_cosine = 0.0;
    nn::Matrix d_visual;
    nn::Matrix d_answer;
    nn::Matrix d_question;
    nn::MlpGrads visual_projector;
    nn::MlpGrads text_projector;
};

/// (w_v * L_V + w_c * L_C) / 2 with matching gradients; unit weights give the
/// plain average of the two losses.
inline AlignmentResult combined_alignment_loss(const AlignmentBatch& batch, const nn::Mlp& visual_projector,
                                               const nn::Mlp& text_projector, const AlignmentConfig& config) {
    auto v = visual_alignment_loss(batch, visual_projector, config.visual_mode);
    auto c = label_alignment_loss(batch, text_projector, config.text_mode);
    const double wv = config.visual_weight / 2.0;
    const double wc = config.label_weight / 2.0;
    AlignmentResult out;
    out.loss_v = v.loss;
    out.loss_c = c.loss;
    out.loss = wv * v.loss + wc * c.loss;
    double mean_cos = 0.0;
    for (double x : v.cosines) mean_cos += x;
    out.mean_visual_cosine = mean_cos / static_cast<double>(v.cosines.size());
    out.label_cosine = c.cosine;
    out.d_visual = std::move(v.d_visual);
    for (auto& x : out.d_visual.flat()) x *= wv;
    out.d_answer = std::move(c.d_answer);
    for (auto& x : out.d_answer.flat()) x *= wc;
    out.d_question = std::move(c.d_question);
    for (auto& x : out.d_question.flat()) x *= wc;
    out.visual_projector = std::move(v.projector);
    out.visual_projector.scale(wv);
    out.text_projector = std::move(c.projector);
    out.text_projector.scale(wc);
    return out;
}

}  // namespace taxalign
