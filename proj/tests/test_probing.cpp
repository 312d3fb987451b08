#include <gtest/gtest.h>

#include <cmath>

#include "taxalign/fixtures.hpp"
#include "taxalign/gradcheck.hpp"
#include "taxalign/probing.hpp"

using namespace taxalign;
using nn::Matrix;

namespace {

struct Split {
    ProbeDataset train, test;
};

Split split_of(const std::vector<fixtures::TokenSample>& samples, std::size_t classes, PoolMode mode) {
    std::vector<Matrix> tr, te;
    std::vector<std::size_t> ltr, lte;
    for (const auto& s : samples) {
        (s.train ? tr : te).push_back(s.tokens);
        (s.train ? ltr : lte).push_back(static_cast<std::size_t>(s.label));
    }
    return {make_probe_dataset(tr, ltr, classes, mode), make_probe_dataset(te, lte, classes, mode)};
}

ProbeDataset random_dataset(std::uint64_t seed, std::size_t n, std::size_t width, std::size_t classes) {
    Rng rng(seed);
    ProbeDataset d;
    d.classes = classes;
    d.features = Matrix(n, width);
    for (auto& x : d.features.flat()) x = rng.normal();
    for (std::size_t i = 0; i < n; ++i) d.labels.push_back(i % classes);
    return d;
}

}  // namespace

TEST(Pool, Examples) {
    Matrix one(1, 3, std::vector<double>{1, 2, 3});
    EXPECT_EQ(pool_features(one, PoolMode::mean), (std::vector<double>{1, 2, 3}));
    EXPECT_EQ(pool_features(one, PoolMode::last), (std::vector<double>{1, 2, 3}));
    Matrix two(2, 2, std::vector<double>{1, 0, 0, 1});
    EXPECT_EQ(pool_features(two, PoolMode::mean), (std::vector<double>{0.5, 0.5}));
    EXPECT_EQ(pool_features(two, PoolMode::last), (std::vector<double>{0, 1}));
    Matrix copies(5, 2, std::vector<double>{0.3, -2, 0.3, -2, 0.3, -2, 0.3, -2, 0.3, -2});
    auto m = pool_features(copies, PoolMode::mean);
    EXPECT_NEAR(m[0], 0.3, 1e-15);
    EXPECT_NEAR(m[1], -2.0, 1e-15);
    EXPECT_THROW(pool_features(Matrix(), PoolMode::mean), domain_error);
}

TEST(Dataset, ValidationAndBalancedSample) {
    ProbeDataset d = random_dataset(1, 4, 2, 2);
    EXPECT_NO_THROW(d.validate());
    d.labels.push_back(0);
    EXPECT_THROW(d.validate(), shape_error);
    d = random_dataset(1, 4, 2, 2);
    d.labels[0] = 7;
    EXPECT_THROW(d.validate(), domain_error);

    std::vector<std::size_t> labels{0, 1, 0, 1, 0, 2, 2, 1};
    auto pick = balanced_sample(labels, 2, 3);
    ASSERT_EQ(pick.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(labels[pick[i]], i / 2);
    EXPECT_EQ(balanced_sample(labels, 2, 3), pick);
    EXPECT_THROW(balanced_sample(labels, 3, 3), domain_error);
}

TEST(TrainProbe, SeparableBlobsReachPerfectAccuracy) {
    auto split = split_of(fixtures::separable_blobs(500, 1), 2, PoolMode::mean);
    ProbeConfig cfg;
    cfg.seed = 1;
    auto t = train_probe(split.train, cfg);
    EXPECT_EQ(t.loss_curve.size(), cfg.epochs + 1);
    EXPECT_LT(t.loss_curve.back(), t.loss_curve.front());
    EXPECT_EQ(evaluate_probe(t.probe, split.test), 1.0);
}

TEST(TrainProbe, ZeroLearningRateKeepsLossConstant) {
    auto d = random_dataset(2, 64, 5, 4);
    ProbeConfig cfg;
    cfg.lr = 0.0;
    cfg.epochs = 20;
    cfg.batch_size = 16;
    auto t = train_probe(d, cfg);
    for (double l : t.loss_curve) EXPECT_EQ(l, t.loss_curve.front());
}

TEST(TrainProbe, DeterministicPerSeedAndRejectsSingleLabel) {
    auto d = random_dataset(3, 100, 4, 3);
    ProbeConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.lr = 1e-2;
    auto a = train_probe(d, cfg);
    auto b = train_probe(d, cfg);
    EXPECT_EQ(a.loss_curve, b.loss_curve);
    EXPECT_EQ(a.probe.weight, b.probe.weight);
    cfg.seed = 1;
    EXPECT_NE(train_probe(d, cfg).loss_curve, a.loss_curve);
    auto single = random_dataset(3, 10, 4, 1);
    EXPECT_THROW(train_probe(single, cfg), domain_error);
}

TEST(TrainProbe, CrossEntropyGradientMatchesFiniteDifferences) {
    GradcheckOptions opt;
    auto r = run_gradcheck("probe_cross_entropy", opt);
    EXPECT_TRUE(r.passed) << r.max_error;
}

TEST(EvaluateProbe, MemorisedSingleSampleAndWidthMismatch) {
    ProbeDataset d;
    d.classes = 3;
    d.features = Matrix(1, 2, std::vector<double>{1.0, -1.0});
    d.labels = {2};
    LinearProbe p{Matrix(2, 3, std::vector<double>{0, 0, 1, 0, 0, -1}), Matrix(1, 3)};
    EXPECT_EQ(evaluate_probe(p, d), 1.0);
    LinearProbe wide{Matrix(3, 3), Matrix(1, 3)};
    EXPECT_THROW(evaluate_probe(wide, d), shape_error);
}

TEST(EvaluateProbe, RandomProbeOnHundredLabelsIsNearChance) {
    auto d = random_dataset(4, 1000, 32, 100);
    Rng rng(5);
    LinearProbe p{Matrix(32, 100), Matrix(1, 100)};
    for (auto& w : p.weight.flat()) w = rng.normal();
    const double acc = evaluate_probe(p, d);
    const double half = 2.576 * std::sqrt(0.01 * 0.99 / 1000.0);
    EXPECT_NEAR(acc, 0.01, half);
}

TEST(EvaluateProbe, AccuracyIsAdditiveOverSplits) {
    auto a = random_dataset(6, 70, 3, 4);
    auto b = random_dataset(7, 30, 3, 4);
    Rng rng(8);
    LinearProbe p{Matrix(3, 4), Matrix(1, 4)};
    for (auto& w : p.weight.flat()) w = rng.normal();
    ProbeDataset both;
    both.classes = 4;
    both.features = Matrix(100, 3);
    for (std::size_t i = 0; i < 70; ++i) std::copy(a.features.row(i).begin(), a.features.row(i).end(), both.features.row(i).begin());
    for (std::size_t i = 0; i < 30; ++i) std::copy(b.features.row(i).begin(), b.features.row(i).end(), both.features.row(70 + i).begin());
    both.labels = a.labels;
    both.labels.insert(both.labels.end(), b.labels.begin(), b.labels.end());
    EXPECT_NEAR(evaluate_probe(p, both), (70 * evaluate_probe(p, a) + 30 * evaluate_probe(p, b)) / 100.0, 1e-15);
}

TEST(TokenSpread, MeanPoolBeatsLastTokenByTenPoints) {
    fixtures::TokenSpreadSpec spec;
    auto samples = fixtures::token_spread_dataset(spec);
    ProbeConfig cfg;
    auto mean = split_of(samples, spec.classes, PoolMode::mean);
    auto last = split_of(samples, spec.classes, PoolMode::last);
    const double acc_mean = evaluate_probe(train_probe(mean.train, cfg).probe, mean.test);
    const double acc_last = evaluate_probe(train_probe(last.train, cfg).probe, last.test);
    EXPECT_GE(acc_mean - acc_last, 0.10) << "mean " << acc_mean << " last " << acc_last;
}
