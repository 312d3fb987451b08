#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "taxalign/fixtures.hpp"
#include "taxalign/gradcheck.hpp"
#include "taxalign/rft.hpp"
#include "taxalign/toy_config.hpp"

using namespace taxalign;

namespace {

fixtures::ToyWorld small_world(std::size_t per_leaf = 2) {
    fixtures::ToyWorldSpec spec;
    spec.train_images_per_leaf = per_leaf;
    spec.eval_images_per_leaf = per_leaf;
    return fixtures::make_toy_world(spec);
}

TrainingData data_of(const fixtures::ToyWorld& w) {
    return TrainingData{&w.tree, &w.labels, &w.images, w.train, w.eval};
}

TrainConfig small_config() {
    TrainConfig c = ToyRunConfig{}.train;
    c.steps = 10;
    c.eval_every = 5;
    c.student.teacher_dim = 32;
    c.student.tokens = 4;
    return c;
}

std::vector<std::string> all_ids(const fixtures::ToyWorld& w) {
    std::vector<std::string> ids;
    for (const auto& a : w.train) ids.push_back(a.image_id);
    for (const auto& a : w.eval) ids.push_back(a.image_id);
    return ids;
}

std::vector<double> snapshot(const nn::ParamList& params) {
    std::vector<double> out;
    for (auto s : params) out.insert(out.end(), s.begin(), s.end());
    return out;
}

}  // namespace

TEST(Reward, ExactMatchRules) {
    EXPECT_EQ(accuracy_reward("B", "B"), 1.0);
    EXPECT_EQ(accuracy_reward("B", "C"), 0.0);
    EXPECT_EQ(accuracy_reward("b", "B"), 1.0);
    EXPECT_EQ(accuracy_reward(" B\n", "B"), 1.0);
    EXPECT_EQ(accuracy_reward("Dacnis", "Dacnis cayana"), 0.0);
    EXPECT_EQ(accuracy_reward("dacnis cayana", "Dacnis cayana"), 0.0);
    EXPECT_EQ(accuracy_reward("Dacnis cayana", "Dacnis cayana"), 1.0);
    EXPECT_EQ(accuracy_reward("B.", "B"), 0.0);
}

TEST(Advantages, Examples) {
    std::vector<double> r{1, 0, 0, 1};
    EXPECT_EQ(group_advantages(r, AdvantageMode::mean_std), (std::vector<double>{1, -1, -1, 1}));
    std::vector<double> same{1, 1, 1};
    for (auto mode : {AdvantageMode::mean_std, AdvantageMode::mean_baseline}) {
        for (double a : group_advantages(same, mode)) EXPECT_EQ(a, 0.0);
    }
    std::vector<double> two{1, 0};
    EXPECT_EQ(group_advantages(two, AdvantageMode::mean_baseline), (std::vector<double>{0.5, -0.5}));
    std::vector<double> one{1};
    EXPECT_THROW(group_advantages(one, AdvantageMode::mean_std), domain_error);
}

TEST(Advantages, SumToZero) {
    Rng rng(3);
    for (int t = 0; t < 500; ++t) {
        std::vector<double> r(2 + rng.below(15));
        for (auto& x : r) x = static_cast<double>(rng.below(2));
        for (auto mode : {AdvantageMode::mean_std, AdvantageMode::mean_baseline}) {
            auto a = group_advantages(r, mode);
            EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 0.0, 1e-12);
        }
    }
}

TEST(RolloutGroup, RewardsFromLetters) {
    VqaItem item;
    item.answer_letter = 'C';
    auto g = RolloutGroup::make(item, {'C', 'A', 'C', 'D'}, AdvantageMode::mean_std);
    EXPECT_EQ(g.rewards, (std::vector<double>{1, 0, 1, 0}));
    EXPECT_EQ(g.size(), 4u);
    EXPECT_THROW(RolloutGroup::make(item, {'C'}, AdvantageMode::mean_std), domain_error);
}

TEST(TeacherTokens, PerTokenPooledAndMissing) {
    EmbeddingTable t(2);
    t.add("a", {1, 1});
    t.add("a#0", {1, 0});
    t.add("a#1", {0, 1});
    t.add("b", {2, 2});
    auto per = teacher_image_tokens(t, "a", 2);
    EXPECT_EQ(per(1, 1), 1.0);
    EXPECT_EQ(per(1, 0), 0.0);
    auto pooled = teacher_image_tokens(t, "a", 2, VisualTargetMode::pooled);
    EXPECT_EQ(pooled(1, 0), 1.0);
    auto broadcast = teacher_image_tokens(t, "b", 3);
    EXPECT_EQ(broadcast(2, 0), 2.0);
    EXPECT_THROW(teacher_image_tokens(t, "a", 3), lookup_error);
    EXPECT_THROW(teacher_image_tokens(t, "zzz", 1), lookup_error);
}

TEST(Policy, ProbabilitiesAndTemperature) {
    auto w = small_world();
    auto data = data_of(w);
    auto cfg = small_config();
    auto items = build_training_items(cfg, data, w.eval, true);
    StudentConfig sc = cfg.student;
    ToyStudent student(sc, w.images, all_ids(w));
    for (std::size_t i = 0; i < 30; ++i) {
        auto pass = student_forward(student, items[i].image_id, items[i].rank_index);
        auto p = policy_forward(student, pass, items[i], w.labels);
        EXPECT_NEAR(std::accumulate(p.probs.begin(), p.probs.end(), 0.0), 1.0, 1e-12);
        const auto greedy = greedy_choice(p);
        for (double tau : {0.01, 0.5, 3.0}) {
            student.set_temperature(tau);
            EXPECT_EQ(greedy_choice(policy_forward(student, pass, items[i], w.labels)), greedy);
        }
        student.set_temperature(sc.temperature);
    }
    EXPECT_THROW(student.set_temperature(0.0), config_error);
    VqaItem bad = items[0];
    bad.choices[0].label = "not-a-label";
    auto pass = student_forward(student, bad.image_id, bad.rank_index);
    EXPECT_THROW(policy_forward(student, pass, bad, w.labels), lookup_error);
}

TEST(PolicyGradient, ZeroAdvantagesGiveZeroLossAndGrads) {
    auto w = small_world();
    auto cfg = small_config();
    auto items = build_training_items(cfg, data_of(w), w.eval, true);
    ToyStudent student(cfg.student, w.images, all_ids(w));
    RolloutGroup g;
    g.letters = {'A', 'B', 'C', 'D'};
    g.rewards = {0, 0, 0, 0};
    g.advantages = {0, 0, 0, 0};
    auto r = policy_gradient_loss(student, items[0], g, w.labels);
    EXPECT_EQ(r.loss, 0.0);
    const std::vector<double> zeros(student.token_count() * student.width(), 0.0);
    for (double x : flatten(r.grads.policy_list(student, zeros))) EXPECT_EQ(x, 0.0);
    g.letters = {'A'};
    g.advantages = {1.0};
    EXPECT_THROW(policy_gradient_loss(student, items[0], g, w.labels), domain_error);
}

TEST(PolicyGradient, MatchesFiniteDifferencesAndProjectorGradsAreZero) {
    GradcheckOptions opt;
    auto r = run_gradcheck("policy_gradient_loss", opt);
    EXPECT_TRUE(r.passed) << r.max_error;
}

TEST(TrainStep, ZeroLearningRatesKeepParametersButLogLosses) {
    auto w = small_world();
    auto data = data_of(w);
    auto cfg = small_config();
    cfg.lr_policy = 0.0;
    cfg.lr_projector = 0.0;
    auto items = build_training_items(cfg, data, w.train, false);
    ToyStudent student(cfg.student, w.images, all_ids(w));
    auto before = nn::save_checkpoint(student.tensors());
    Optimizers opt(cfg);
    Rng rng(1);
    std::span<const VqaItem> batch(items.data(), 8);
    auto log = train_step_alternating(student, batch, batch, data, cfg, opt, rng, 1);
    EXPECT_EQ(nn::save_checkpoint(student.tensors()), before);
    EXPECT_NE(log.loss_alignment, 0.0);
    EXPECT_NE(log.loss_v, 0.0);
    EXPECT_GE(log.mean_reward, 0.0);
    EXPECT_LE(log.mean_reward, 1.0);
}

TEST(TrainStep, RftSubStepLeavesProjectorsBitwiseUnchanged) {
    auto w = small_world();
    auto data = data_of(w);
    auto cfg = small_config();
    cfg.align_weight = 0.0;  // isolates the RFT update
    auto items = build_training_items(cfg, data, w.train, false);
    ToyStudent student(cfg.student, w.images, all_ids(w));
    Optimizers opt(cfg);
    Rng rng(2);
    for (std::size_t step = 1; step <= 20; ++step) {
        const auto proj = snapshot(student.projector_parameters());
        const auto pol = snapshot(student.policy_parameters());
        std::span<const VqaItem> batch(items.data() + (step % 10) * 8, 8);
        auto log = train_step_alternating(student, batch, batch, data, cfg, opt, rng, step);
        EXPECT_TRUE(log.projectors_frozen);
        EXPECT_EQ(snapshot(student.projector_parameters()), proj);
        if (log.mean_reward > 0.0 && log.mean_reward < 1.0) {
            EXPECT_NE(snapshot(student.policy_parameters()), pol);
        }
    }
}

TEST(TrainStep, AlignmentSubStepMovesProjectors) {
    auto w = small_world();
    auto data = data_of(w);
    auto cfg = small_config();
    auto items = build_training_items(cfg, data, w.train, false);
    ToyStudent student(cfg.student, w.images, all_ids(w));
    Optimizers opt(cfg);
    Rng rng(3);
    const auto hash = student.projector_hash();
    std::span<const VqaItem> batch(items.data(), 8);
    train_step_alternating(student, batch, batch, data, cfg, opt, rng, 1);
    EXPECT_NE(student.projector_hash(), hash);
}

TEST(RunTraining, DeterministicLogsAndCheckpoints) {
    auto w = small_world();
    auto cfg = small_config();
    auto a = run_training(cfg, data_of(w));
    auto b = run_training(cfg, data_of(w));
    EXPECT_EQ(a.steps, b.steps);
    EXPECT_EQ(a.checkpoint_hash, b.checkpoint_hash);
    cfg.seed = 1;
    EXPECT_NE(run_training(cfg, data_of(w)).checkpoint_hash, a.checkpoint_hash);
}

TEST(RunTraining, ZeroStepsIsNearChanceAcrossSeeds) {
    auto w = fixtures::make_toy_world({});
    auto cfg = small_config();
    cfg.steps = 0;
    // One seed's 540 greedy choices share a single random preference direction,
    // so items are not independent draws. Seeds are: average over them.
    const std::size_t seeds = 20;
    std::vector<double> acc;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        cfg.seed = seed;
        auto r = run_training(cfg, data_of(w));
        ASSERT_GE(r.eval_items, 500u);
        EXPECT_EQ(r.steps_run, 0u);
        ASSERT_EQ(r.eval_curve.size(), 1u);
        acc.push_back(r.final_accuracy);
    }
    const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / seeds;
    double ss = 0;
    for (double a : acc) ss += (a - mean) * (a - mean);
    const double sem = std::sqrt(ss / (seeds - 1) / seeds);
    // Student t, 19 degrees of freedom, two-sided 99%.
    EXPECT_NEAR(mean, 0.25, 2.861 * sem) << "sem " << sem;
}

TEST(RunTraining, AlignWeightZeroLogsAlignmentWithoutApplyingIt) {
    auto w = small_world();
    auto cfg = small_config();
    cfg.align_weight = 0.0;
    auto data = data_of(w);
    auto r = run_training(cfg, data);
    for (const auto& s : r.steps) {
        EXPECT_EQ(s.loss_alignment, 0.0);
        EXPECT_NE(s.loss_v, 0.0);
    }
}

TEST(RunTraining, WritesRunDirectory) {
    auto w = small_world();
    auto cfg = small_config();
    cfg.checkpoint_every = 5;
    auto dir = std::filesystem::temp_directory_path() / "taxalign_test_run";
    std::filesystem::remove_all(dir);
    ToyRunConfig toy;
    toy.train = cfg;
    auto r = run_training(cfg, data_of(w), RunOutputs{dir, toy_config_to_toml(toy)});
    for (const char* f : {"config.toml", "losses.csv", "alignment.csv", "eval.csv", "eval_report.json",
                          "checkpoints/step5.nn01", "checkpoints/step10.nn01"}) {
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    }
    EXPECT_FALSE(std::filesystem::exists(dir / "FAILED"));
    auto losses = text::read_file((dir / "losses.csv").string());
    EXPECT_TRUE(losses.starts_with("step,loss_alignment,loss_v,loss_c,loss_rft,mean_reward\n"));
    EXPECT_EQ(text::lines(losses).size(), 11u);
    auto j = nlohmann::json::parse(text::read_file((dir / "eval_report.json").string()));
    EXPECT_EQ(j["run"]["steps_run"], 10);
    EXPECT_DOUBLE_EQ(j["run"]["greedy_accuracy"].get<double>(), r.final_accuracy);
    auto ckpt = nn::load_checkpoint(text::read_file((dir / "checkpoints/step10.nn01").string()));
    EXPECT_EQ(fnv1a64(text::read_file((dir / "checkpoints/step10.nn01").string())), r.checkpoint_hash);
    EXPECT_FALSE(ckpt.empty());
    std::filesystem::remove_all(dir);
}

TEST(RunTraining, FailureLeavesMarker) {
    auto w = small_world();
    auto cfg = small_config();
    cfg.ranks = {1};  // rank 1 has only 3 labels
    cfg.ratio = {1};
    auto dir = std::filesystem::temp_directory_path() / "taxalign_test_fail";
    std::filesystem::remove_all(dir);
    EXPECT_THROW(run_training(cfg, data_of(w), RunOutputs{dir, ""}), benchmark_error);
    EXPECT_TRUE(std::filesystem::exists(dir / "FAILED"));
    std::filesystem::remove_all(dir);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.group_size = 1;
    EXPECT_THROW(c.validate(), config_error);
    c = {};
    c.ranks = {2, 3};
    c.ratio = {1};
    EXPECT_THROW(c.validate(), config_error);
}

TEST(ToyConfig, TomlRoundTripAndUnknownKeys) {
    ToyRunConfig c;
    c.train.seed = 9;
    c.train.alignment.text_mode = TextFeatureMode::mean_answer_tokens;
    auto text = toy_config_to_toml(c);
    auto back = toy_config_from_toml(text);
    EXPECT_EQ(toy_config_to_toml(back), text);
    EXPECT_EQ(back.train.seed, 9u);
    EXPECT_THROW(toy_config_from_toml("[train]\nstepz = 3\n"), config_error);
    EXPECT_THROW(toy_config_from_toml("[train]\nadvantage = \"median\"\n"), config_error);
    EXPECT_THROW(toy_config_from_toml("[train]\nsteps = -1\n"), config_error);
}
