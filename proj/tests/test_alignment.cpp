#include <gtest/gtest.h>

#include <cmath>
#include <type_traits>

#include "taxalign/alignment.hpp"
#include "taxalign/gradcheck.hpp"

using namespace taxalign;
using nn::Matrix;

namespace {

// Identity map of width d: all three layers are I with no activation.
nn::Mlp identity_mlp(std::size_t d) {
    nn::Mlp net(d, d, d, nn::Activation::identity);
    for (auto& l : net.layers) {
        for (std::size_t i = 0; i < d; ++i) l.weight(i, i) = 1.0;
    }
    return net;
}

Matrix rows(std::initializer_list<std::vector<double>> r) {
    Matrix m(r.size(), r.begin()->size());
    std::size_t i = 0;
    for (const auto& v : r) std::copy(v.begin(), v.end(), m.row(i++).begin());
    return m;
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (auto& x : m.flat()) x = rng.normal();
    return m;
}

AlignmentBatch batch_of(Matrix visual, Matrix targets, Matrix answer, std::vector<double> label) {
    AlignmentBatch b;
    b.visual = std::move(visual);
    b.visual_targets = Frozen<Matrix>(std::move(targets));
    b.answer = std::move(answer);
    b.label_target = Frozen<std::vector<double>>(std::move(label));
    return b;
}

}  // namespace

static_assert(std::is_same_v<decltype(std::declval<const Frozen<Matrix>&>().get()), const Matrix&>,
              "teacher targets are read-only");

TEST(VisualLoss, AlignedRowsGiveMinusOneWithOrthogonalGradient) {
    auto p = identity_mlp(2);
    auto b = batch_of(rows({{1, 2}, {-3, 1}}), rows({{2, 4}, {-6, 2}}), rows({{1, 0}}), {1, 0});
    auto r = visual_alignment_loss(b, p);
    EXPECT_NEAR(r.loss, -1.0, 1e-15);
    // The projector is the identity, so d_visual is the feature-space gradient.
    for (std::size_t i = 0; i < 2; ++i) {
        double dot = 0;
        for (std::size_t j = 0; j < 2; ++j) dot += r.d_visual(i, j) * b.visual(i, j);
        EXPECT_NEAR(dot, 0.0, 1e-15);
    }
}

TEST(VisualLoss, HalfAlignedAndAntiparallel) {
    auto p = identity_mlp(2);
    auto half = batch_of(rows({{1, 0}, {1, 0}}), rows({{3, 0}, {0, 1}}), rows({{1, 0}}), {1, 0});
    EXPECT_NEAR(visual_alignment_loss(half, p).loss, -0.5, 1e-15);
    auto anti = batch_of(rows({{1, 1}, {0, 2}}), rows({{-1, -1}, {0, -5}}), rows({{1, 0}}), {1, 0});
    EXPECT_NEAR(visual_alignment_loss(anti, p).loss, 1.0, 1e-15);
}

TEST(VisualLoss, LastTokenModeUsesOnlyLastRow) {
    auto p = identity_mlp(2);
    auto b = batch_of(rows({{1, 0}, {1, 0}}), rows({{-1, 0}, {1, 0}}), rows({{1, 0}}), {1, 0});
    auto r = visual_alignment_loss(b, p, VisualFeatureMode::last_token);
    EXPECT_NEAR(r.loss, -1.0, 1e-15);
    EXPECT_EQ(r.cosines.size(), 1u);
    EXPECT_EQ(r.d_visual(0, 0), 0.0);
    EXPECT_EQ(r.d_visual(0, 1), 0.0);
}

TEST(VisualLoss, ZeroRowNamed) {
    auto p = identity_mlp(2);
    auto b = batch_of(rows({{1, 0}, {0, 0}}), rows({{1, 0}, {1, 0}}), rows({{1, 0}}), {1, 0});
    try {
        visual_alignment_loss(b, p);
        FAIL();
    } catch (const domain_error& e) {
        EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
    }
    auto shape = batch_of(rows({{1, 0}}), rows({{1, 0}, {1, 0}}), rows({{1, 0}}), {1, 0});
    EXPECT_THROW(visual_alignment_loss(shape, p), shape_error);
}

TEST(LabelLoss, ModesAndExamples) {
    auto p = identity_mlp(2);
    auto b = batch_of(rows({{1, 0}}), rows({{1, 0}}), rows({{0, 3}, {1, 0}}), {0, 1});
    EXPECT_NEAR(label_alignment_loss(b, p).loss, -1.0, 1e-15);
    b.label_target = Frozen<std::vector<double>>({1, 0});
    EXPECT_NEAR(label_alignment_loss(b, p).loss, 0.0, 1e-15);
    b.question = rows({{5, 5}, {2, 0}});
    EXPECT_NEAR(label_alignment_loss(b, p, TextFeatureMode::last_question_token).loss, -1.0, 1e-15);
    // Mean of [0,3] and [1,0] is [0.5,1.5].
    EXPECT_NEAR(label_alignment_loss(b, p, TextFeatureMode::mean_answer_tokens).loss, -0.5 / std::sqrt(2.5), 1e-15);
}

TEST(LabelLoss, ZeroMeanAndEmptyAnswerAreErrors) {
    auto p = identity_mlp(2);
    auto b = batch_of(rows({{1, 0}}), rows({{1, 0}}), rows({{1, 2}, {-1, -2}}), {1, 2});
    EXPECT_THROW(label_alignment_loss(b, p, TextFeatureMode::mean_answer_tokens), domain_error);
    b.answer = Matrix();
    EXPECT_THROW(label_alignment_loss(b, p), domain_error);
    EXPECT_THROW(label_alignment_loss(b, p, TextFeatureMode::last_question_token), domain_error);
}

TEST(CombinedLoss, AverageOfConstituents) {
    auto p = identity_mlp(2);
    AlignmentConfig cfg;
    auto b = batch_of(rows({{1, 0}}), rows({{1, 0}}), rows({{0, 1}}), {0, 1});
    EXPECT_NEAR(combined_alignment_loss(b, p, p, cfg).loss, -1.0, 1e-15);
    b.label_target = Frozen<std::vector<double>>({1, 0});
    auto r = combined_alignment_loss(b, p, p, cfg);
    EXPECT_NEAR(r.loss, -0.5, 1e-15);
    EXPECT_NEAR(r.loss_v, -1.0, 1e-15);
    EXPECT_NEAR(r.loss_c, 0.0, 1e-15);
}

TEST(CombinedLoss, GradientsMatchFiniteDifferences) {
    GradcheckOptions opt;
    for (const char* op : {"visual_alignment_loss", "label_alignment_loss", "combined_alignment_loss"}) {
        auto r = run_gradcheck(op, opt);
        EXPECT_TRUE(r.passed) << op << " " << r.max_error;
    }
}

TEST(AlignmentProperties, RangeAndTargetScaleInvariance) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const std::size_t D = 6, d = 4;
        nn::Mlp pv(D, 5, d, rng), pt(D, 5, d, rng);
        auto targets = random_matrix(rng, 5, d);
        std::vector<double> label(d);
        for (auto& x : label) x = rng.normal();
        auto b = batch_of(random_matrix(rng, 5, D), targets, random_matrix(rng, 2, D), label);
        AlignmentConfig cfg;
        auto r = combined_alignment_loss(b, pv, pt, cfg);
        for (double v : {r.loss, r.loss_v, r.loss_c}) {
            EXPECT_GE(v, -1.0);
            EXPECT_LE(v, 1.0);
        }
        const double alpha = std::exp(rng.uniform(-5, 5));
        for (auto& x : targets.flat()) x *= alpha;
        for (auto& x : label) x *= alpha;
        auto scaled = batch_of(b.visual, targets, b.answer, label);
        EXPECT_NEAR(combined_alignment_loss(scaled, pv, pt, cfg).loss, r.loss, 1e-12);
    }
}

TEST(AlignmentProperties, StopGradientOnTargets) {
    Rng rng(4);
    nn::Mlp pv(3, 4, 3, rng);
    auto b = batch_of(random_matrix(rng, 4, 3), random_matrix(rng, 4, 3), random_matrix(rng, 1, 3), {1, 2, 3});
    auto before = visual_alignment_loss(b, pv);
    const Matrix targets_copy = b.visual_targets.get();
    // Perturbing targets changes the loss value.
    Matrix moved = targets_copy;
    moved(0, 0) += 1.0;
    auto b2 = batch_of(b.visual, moved, b.answer, {1, 2, 3});
    EXPECT_NE(visual_alignment_loss(b2, pv).loss, before.loss);
    // Gradient structures cover only features and projector parameters.
    EXPECT_EQ(before.d_visual.rows(), b.visual.rows());
    EXPECT_EQ(flatten(before.projector.as_list()).size(), pv.parameter_count());
    // An optimiser step over what the loss returns leaves the targets untouched.
    nn::AdamState adam;
    nn::adam_step(pv.parameters(), before.projector.as_list(), adam);
    EXPECT_EQ(b.visual_targets.get(), targets_copy);
}

TEST(AlignmentProperties, AdamOnProjectorReachesHighCosine) {
    Rng rng(2024);
    const std::size_t D = 16, d = 16, N = 8;
    nn::Mlp pv(D, nn::default_hidden_width(D, d), d, rng);
    auto b = batch_of(random_matrix(rng, N, D), random_matrix(rng, N, d), random_matrix(rng, 1, D),
                      std::vector<double>(d, 1.0));
    nn::AdamState adam;
    adam.lr = 1e-2;
    double first = visual_alignment_loss(b, pv).loss, last = first;
    for (int step = 0; step < 200; ++step) {
        auto r = visual_alignment_loss(b, pv);
        last = r.loss;
        nn::adam_step(pv.parameters(), r.projector.as_list(), adam);
    }
    last = visual_alignment_loss(b, pv).loss;
    EXPECT_LT(last, first);
    EXPECT_LT(last, -0.95);
}

TEST(AlignmentConfig, Validation) {
    AlignmentConfig c;
    EXPECT_NO_THROW(c.validate());
    c.visual_layer = 2;
    EXPECT_THROW(c.validate(), config_error);
    c = {};
    c.text_layer = 0;
    EXPECT_THROW(c.validate(), config_error);
    c = {};
    c.label_weight = -1;
    EXPECT_THROW(c.validate(), config_error);
}
